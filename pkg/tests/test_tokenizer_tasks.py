import collections
import itertools
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from shotpack.container import ContainerError, read_container, write_container
from shotpack.tasks import (FAMILIES, KEYS, LABELS, TaskError, TaskSpec, gen_task, lm_documents,
                            make_suite, recall_lines, uniform_surjection)
from shotpack.tokenizer import ByteBPETokenizer


@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.text(max_size=80))
def test_tokenizer_round_trip(tok, text):
    assert tok.decode(tok.encode(text)) == text


def test_tokenizer_learns_merges_and_serialises(tok):
    assert tok.vocab_size == 320
    ids = tok.encode("the old river")
    assert len(ids) < len("the old river")
    back = ByteBPETokenizer.from_json(tok.to_json())
    assert back.encode("the old river") == ids


def test_task_symbols_stay_single_tokens(tok):
    for c in KEYS + tuple("ABCXYZ\n|"):
        assert len(tok.encode(c)) == 1


def test_suite_is_disjoint_and_deterministic():
    s = make_suite(3, 1, seed=5)
    assert {t.task_id for t in s.held_in}.isdisjoint(s.held_out_ids)
    assert len(s.held_in) == 3 * len(FAMILIES)
    s2 = make_suite(3, 1, seed=5)
    assert [t.mapping for t in s.held_in] == [t.mapping for t in s2.held_in]
    assert s.by_id("keyed_lookup-test-0").category == "classification"
    with pytest.raises(KeyError):
        s.by_id("nope")


@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_task_samples_are_consistent(family):
    t = gen_task(TaskSpec(family, "x", 3))
    for ex in itertools.islice(t.stream(0), 50):
        assert ex.input and ex.target
        if t.label_set is not None:
            assert ex.target in t.label_set
        if ex.labels is not None:
            assert ex.target in ex.labels
    a = [e.input for e in itertools.islice(t.stream(7), 10)]
    assert a == [e.input for e in itertools.islice(t.stream(7), 10)]


def test_keyed_lookup_mapping_is_surjective():
    t = gen_task(TaskSpec("keyed_lookup", "x", 11, n_classes=26, n_keys=32))
    assert set(t.mapping.values()) == set(t.label_set)


def test_surjection_sampler_is_uniform():
    rng = np.random.default_rng(0)
    counts = collections.Counter(tuple(uniform_surjection(rng, 4, 3)) for _ in range(18_000))
    assert len(counts) == 36  # every onto map from 4 keys to 3 labels
    expected = 18_000 / 36
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 70  # 35 degrees of freedom, p < 1e-3


def test_bayes_posterior_brute_force():
    # small enough to enumerate every surjective map
    t = gen_task(TaskSpec("keyed_lookup", "x", 2, n_classes=3, n_keys=5))
    keys = list(t.mapping)
    ctx = [e for e in itertools.islice(t.stream(0), 40) if e.input in keys[:2]][:2]
    query = next(k for k in keys if k not in {e.input for e in ctx})
    post = t.bayes_posterior(ctx, query)
    counts = dict.fromkeys(t.label_set, 0)
    for assign in itertools.product(t.label_set, repeat=len(keys)):
        m = dict(zip(keys, assign))
        if set(assign) != set(t.label_set) or any(m[e.input] != e.target for e in ctx):
            continue
        counts[m[query]] += 1
    total = sum(counts.values())
    for c in t.label_set:
        assert math.isclose(post[c], counts[c] / total, rel_tol=1e-12)
    seen = t.bayes_posterior(ctx, ctx[0].input)
    assert seen[ctx[0].target] == 1.0


def test_task_errors():
    with pytest.raises(TaskError):
        gen_task(TaskSpec("nope", "x", 0))
    with pytest.raises(TaskError):
        gen_task(TaskSpec("keyed_lookup", "x", 0, n_classes=10, n_keys=5))
    with pytest.raises(TaskError):
        gen_task(TaskSpec("transduction", "x", 0)).bayes_posterior([], "a")


def test_text_generators_are_deterministic():
    assert lm_documents(3, 2, 5) == lm_documents(3, 2, 5)
    lines = recall_lines(1, 24)
    assert len(lines) == 24 and lines == recall_lines(1, 24)


def test_recall_lines_bind_each_key_once_per_line():
    for line in recall_lines(2, 50, n_keys=4, pairs=10):
        pairs = line.rstrip("\n").split(" ")
        assert len(pairs) == 10 and all(len(p) == 2 for p in pairs)
        binding = {}
        for key, label in pairs:
            assert key in KEYS and label in LABELS
            assert binding.setdefault(key, label) == label
        assert len(binding) <= 4


def test_container_round_trip_and_errors(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.int32).reshape(2, 3), "b": np.ones(2, dtype=">f8")}
    write_container(tmp_path / "c", "thing", {"k": 1}, arrays)
    meta, back = read_container(tmp_path / "c", kind="thing")
    assert meta == {"k": 1}
    np.testing.assert_array_equal(back["a"], arrays["a"])
    np.testing.assert_array_equal(back["b"], arrays["b"])
    with pytest.raises(ContainerError):
        read_container(tmp_path / "c", kind="other")
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ContainerError):
        read_container(tmp_path / "bad")
