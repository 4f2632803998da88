import collections
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shotpack.costmodel import CostParams, training_tokens
from shotpack.model import forward, init_lora, init_params
from shotpack.packing import MaskStrategy, prefix_instance
from shotpack import tensor as tn
from shotpack.tasks import make_suite
from shotpack.trainer import (LeakageError, TrainConfig, TrainingError, cosine_lr, draw_window,
                              masked_loss, run_meta_training, task_schedule, train_step)

from conftest import jitter


@pytest.fixture(scope="module")
def suite():
    return make_suite(1, 1, seed=0)


def cfg(**kw):
    base = dict(steps=2, global_batch=4, grad_accum=2, lr=1e-2, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def test_prefix_sum_equivalence(tiny64, tok, suite):
    p = jitter(tiny64, seed=1)
    rng = np.random.default_rng(0)
    task = suite.held_in[0]
    inst = draw_window(task, "many", MaskStrategy.MASK_ALL, tok, 64, rng)
    with tn.no_grad():
        _, per = masked_loss(forward(p, inst.token_ids), inst)
    total_all = per[inst.loss_mask].sum()
    total_last = 0.0
    for k in range(len(inst.boundaries)):
        pre = prefix_instance(inst, k, MaskStrategy.MASK_LAST)
        with tn.no_grad():
            _, per_k = masked_loss(forward(p, pre.token_ids), pre)
        total_last += per_k[pre.loss_mask].sum()
    assert math.isclose(total_all, total_last, rel_tol=1e-12)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1.0) == 1.0
    assert math.isclose(cosine_lr(100, 100, 1.0), 0.1)
    assert math.isclose(cosine_lr(50, 100, 1.0), 0.55)
    vals = [cosine_lr(s, 100, 1.0) for s in range(101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert cosine_lr(0, 100, 1.0, warmup_steps=10) == 0.1
    assert cosine_lr(0, 0, 2.0) == 2.0
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1.0)


def test_gradient_accumulation_matches_full_batch(tiny64, tok, suite):
    rng = np.random.default_rng(1)
    batch = [draw_window(t, "few", MaskStrategy.MASK_ALL, tok, 64, rng) for t in suite.held_in[:4]]
    ad = init_lora(tiny64)
    outs = []
    for accum in (1, 2, 4):
        c = cfg(global_batch=4, grad_accum=accum)
        new, _, m = train_step(tiny64, ad.copy(), batch, c, tn.AdamState(), 1e-2)
        outs.append((new.arrays(), m["loss"]))
    for arrays, loss in outs[1:]:
        assert math.isclose(loss, outs[0][1], rel_tol=1e-12)
        for k in arrays:
            np.testing.assert_allclose(arrays[k], outs[0][0][k], atol=1e-12)


def test_zero_lr_leaves_adapter_unchanged(tiny64, tok, suite):
    c = cfg(lr=0.0)
    ad0 = init_lora(tiny64, seed=0)
    ad, rep = run_meta_training(tiny64, suite.held_in, tok, c)
    for k, v in ad.arrays().items():
        np.testing.assert_array_equal(v, ad0.arrays()[k])
    assert len(rep.losses) == 2


def test_zero_steps(tiny64, tok, suite):
    ad, rep = run_meta_training(tiny64, suite.held_in, tok, cfg(steps=0))
    assert rep.losses == [] and rep.tokens_processed == 0
    assert all(not v.any() for k, v in ad.arrays().items() if k.endswith(".B"))


def test_training_reduces_loss_and_is_deterministic(tiny64, tok, suite):
    c = cfg(steps=6, lr=3e-2)
    a1, r1 = run_meta_training(tiny64, suite.held_in[:1], tok, c)
    a2, r2 = run_meta_training(tiny64, suite.held_in[:1], tok, c)
    assert r1.to_dict() == r2.to_dict()
    assert a1.fingerprint() == a2.fingerprint()
    assert r1.losses[-1] < r1.losses[0]


def test_leakage_aborts_before_training(tiny64, tok, suite):
    with pytest.raises(LeakageError, match="keyed_lookup-test-0"):
        run_meta_training(tiny64, suite.held_in + suite.held_out[:1], tok, cfg(),
                          held_out_ids=suite.held_out_ids)


def test_baseline_matrix_and_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(regime="zero", strategy=MaskStrategy.MASK_ALL)
    with pytest.raises(ValueError):
        TrainConfig(regime="few", strategy=MaskStrategy.AUTOREGRESSIVE)
    with pytest.raises(ValueError):
        TrainConfig(global_batch=6, grad_accum=4)
    TrainConfig(regime="many", strategy="autoregressive")


def test_no_tasks(tiny64, tok):
    with pytest.raises(TrainingError):
        run_meta_training(tiny64, [], tok, cfg())


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 7), st.integers(0, 60), st.integers(0, 1000))
def test_task_schedule_quotas(n_tasks, n_windows, seed):
    order = task_schedule(list(range(n_tasks)), n_windows, np.random.default_rng(seed))
    counts = collections.Counter(order)
    assert len(order) == n_windows
    got = [counts.get(t, 0) for t in range(n_tasks)]
    assert max(got) - min(got) <= 1


def test_regime_shot_counts(tok, suite):
    rng = np.random.default_rng(2)
    task = suite.held_in[0]
    assert draw_window(task, "zero", MaskStrategy.MASK_LAST, tok, 64, rng).shot_count == 0
    assert draw_window(task, "few", MaskStrategy.MASK_ALL, tok, 64, rng).shot_count == 5
    many = draw_window(task, "many", MaskStrategy.MASK_ALL, tok, 256, rng)
    assert many.shot_count > 20 and len(many) > 256 - 4


def test_few_shot_windows_do_not_exclude_the_query_label(tok):
    # class-balanced draws would never repeat a label within 6 examples of a
    # 26-class task, so the query label could never be copied from the shots
    task = next(t for t in make_suite(1, 1, seed=0).held_in if t.family == "keyed_lookup")
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(200):
        inst = draw_window(task, "few", MaskStrategy.MASK_ALL, tok, 64, rng)
        labels = [tok.decode(inst.token_ids[b.target_start:b.target_end].tolist()).strip()
                  for b in inst.boundaries]
        hits += labels[-1] in labels[:-1]
    assert hits > 20


@pytest.mark.parametrize("strategy,mode,cost_mode", [
    (MaskStrategy.MASK_ALL, "full", None),
    (MaskStrategy.MASK_LAST, "prefixes", "exact"),
])
def test_token_counts_reconcile_with_cost_model(tiny64, tok, suite, strategy, mode, cost_mode):
    kl = [t for t in suite.held_in if t.family == "keyed_lookup"]
    c = cfg(steps=1, global_batch=2, grad_accum=2, strategy=strategy, mask_last_mode=mode)
    _, rep = run_meta_training(tiny64, kl, tok, c)
    n_mean = rep.examples / rep.windows - 1
    p = CostParams(n_meta=rep.windows, n_w=64, n=n_mean, n_mean=n_mean + 1, scale_k=())
    if cost_mode is None:
        predicted = training_tokens("mask_all", p)
    else:
        predicted = training_tokens("mask_last", p, cost_mode)
    assert abs(rep.tokens_processed - predicted) / predicted < 0.05


def test_base_weights_stay_bit_identical(tiny64, tok, suite):
    before = {k: v.copy() for k, v in tiny64.arrays().items()}
    run_meta_training(tiny64, suite.held_in, tok, cfg(steps=3))
    for k, v in tiny64.arrays().items():
        np.testing.assert_array_equal(v, before[k])


def test_default_run_loss_trends_down(tiny_cfg, tok, suite):
    p = init_params(tiny_cfg, seed=0, dtype=np.float32)
    c = TrainConfig(steps=100, lr=3e-3, global_batch=4, grad_accum=1, regime="few")
    _, rep = run_meta_training(p, [t for t in suite.held_in if t.family == "keyed_lookup"], tok, c)
    assert np.mean(rep.losses[-50:]) < np.mean(rep.losses[:50])
