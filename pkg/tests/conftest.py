import numpy as np
import pytest

from shotpack.model import ModelConfig, init_params
from shotpack.tasks import lm_documents
from shotpack.tokenizer import ByteBPETokenizer


@pytest.fixture(scope="session")
def tok():
    return ByteBPETokenizer.train(lm_documents(0, 30, 20), 320)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(vocab_size=320, d_model=16, n_layers=2, n_heads=2, d_ff=32, n_ctx=64)


@pytest.fixture
def tiny64(tiny_cfg):
    return init_params(tiny_cfg, seed=1, dtype=np.float64)


def jitter(params, seed=0, std=0.1):
    """Perturb every weight so layer norms, biases and smear weights are non-trivial."""
    rng = np.random.default_rng(seed)
    p = params.copy()
    for t in p.tensors.values():
        t.data = t.data + rng.normal(0, std, t.data.shape).astype(t.data.dtype)
    return p


_ACCEPTANCE: dict[str, list] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::test_criterion_")[1]
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE.setdefault(name, []).append((report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: (int(n.split("_")[0]), n)):
        for outcome, detail in _ACCEPTANCE[name]:
            verdict = "PASS" if outcome == "passed" else "FAIL"
            terminalreporter.write_line(f"{verdict}  criterion {name.replace('_', ' ', 1)}: {detail}")
