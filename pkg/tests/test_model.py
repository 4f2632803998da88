import dataclasses

import numpy as np
import pytest

from shotpack import tensor as tn
from shotpack.model import (ConfigError, ContextLengthError, ForwardCounter, ModelConfig,
                            forward, forward_logits, init_lora, init_params, load_checkpoint,
                            merge_lora, parameter_report, save_checkpoint, weight_names)

from conftest import jitter


def lora_with_values(params, seed=0, **kw):
    ad = init_lora(params, **kw)
    rng = np.random.default_rng(seed)
    for k, t in ad.tensors.items():
        if k.endswith(".B"):
            t.data = rng.normal(0, 0.1, t.data.shape)
    return ad


@pytest.mark.parametrize("variant", [{}, {"smear_keys": True}, {"positional": "rotary"},
                                     {"tie_embeddings": False}])
def test_causality(tiny_cfg, variant):
    cfg = dataclasses.replace(tiny_cfg, **variant)
    p = jitter(init_params(cfg, seed=2))
    rng = np.random.default_rng(0)
    toks = rng.integers(cfg.vocab_size, size=20)
    base = forward_logits(p, toks)
    changed = toks.copy()
    changed[12:] = (changed[12:] + 7) % cfg.vocab_size
    out = forward_logits(p, changed)
    np.testing.assert_array_equal(base[:12], out[:12])
    assert not np.allclose(base[12:], out[12:])


def test_batch_rows_are_independent(tiny64):
    toks = np.random.default_rng(1).integers(320, size=(3, 10))
    batched = forward_logits(tiny64, toks)
    for r in range(3):
        np.testing.assert_allclose(batched[r], forward_logits(tiny64, toks[r]), atol=1e-12)


def test_fresh_lora_is_exact_identity(tiny64):
    ad = init_lora(tiny64, rank=8, alpha=16.0)
    toks = np.arange(12)
    np.testing.assert_array_equal(forward_logits(tiny64, toks, ad), forward_logits(tiny64, toks))
    assert ad.scale == 2.0
    assert ad.targets == ("h0.attn.q", "h0.attn.v", "h1.attn.q", "h1.attn.v")


def test_lora_forward_equals_merged_weights(tiny64):
    ad = lora_with_values(tiny64, rank=4, alpha=8.0)
    toks = np.arange(15)
    np.testing.assert_allclose(forward_logits(tiny64, toks, ad),
                               forward_logits(merge_lora(tiny64, ad), toks), atol=1e-12)


def test_lora_gradients_flow_only_to_adapter(tiny64):
    ad = lora_with_values(tiny64)
    ad.set_trainable(True)
    tiny64.set_trainable(False)
    toks = np.arange(10)
    tgt = np.roll(toks, -1)
    tn.tsum(tn.cross_entropy_per_token(forward(tiny64, toks, ad), tgt)).backward()
    assert all(t.grad is not None for t in ad.tensors.values())
    assert all(t.grad is None for t in tiny64.tensors.values())


def test_parameter_report(tiny64):
    ad = init_lora(tiny64, rank=2)
    rep = parameter_report(tiny64, ad)
    assert rep["lora_params"] == 4 * (2 * 16 + 16 * 2)
    assert rep["total_params"] == tiny64.n_params() + rep["lora_params"]


@pytest.mark.parametrize("smear", [False, True])
def test_kv_cache_matches_full_forward(tiny_cfg, smear):
    cfg = dataclasses.replace(tiny_cfg, smear_keys=smear)
    p = jitter(init_params(cfg, seed=3))
    ad = lora_with_values(p)
    toks = np.random.default_rng(2).integers(cfg.vocab_size, size=30)
    full = forward_logits(p, toks, ad)
    with tn.no_grad():
        _, kv = forward(p, toks[:17], ad, return_kv=True)
        tail = forward(p, toks[17:], ad, past=kv).data
    np.testing.assert_allclose(tail, full[17:], atol=1e-12)


def test_one_cache_serves_a_batch(tiny64):
    rng = np.random.default_rng(3)
    prompt = rng.integers(320, size=9)
    conts = rng.integers(320, size=(4, 3))
    with tn.no_grad():
        _, kv = forward(tiny64, prompt, return_kv=True)
        batched = forward(tiny64, conts, past=kv).data
    for r in range(4):
        full = forward_logits(tiny64, np.concatenate([prompt, conts[r]]))
        np.testing.assert_allclose(batched[r], full[9:], atol=1e-12)


def test_counter_pairs(tiny64):
    c = ForwardCounter()
    with tn.no_grad():
        _, kv = forward(tiny64, np.arange(10), counter=c, return_kv=True)
        forward(tiny64, np.arange(4), past=kv, counter=c)
    assert c.positions == 14
    assert c.attention_pairs == 55 + (4 * 10 + 10)


def test_context_overflow(tiny64):
    with pytest.raises(ContextLengthError):
        forward_logits(tiny64, np.zeros(65, dtype=int))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(n_ctx=32)
    with pytest.raises(ConfigError):
        ModelConfig(positional="alibi")


def test_lora_rejects_bad_targets(tiny64):
    with pytest.raises(ConfigError):
        init_lora(tiny64, targets=("h9.attn.q",))
    with pytest.raises(ConfigError):
        init_lora(tiny64, rank=0)


def test_checkpoint_round_trip(tmp_path, tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, smear_keys=True)
    p = jitter(init_params(cfg, seed=4))
    ad = lora_with_values(p)
    save_checkpoint(tmp_path / "m.ckpt", p, ad, meta={"note": "x"})
    p2, ad2, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"note": "x"}
    assert p2.config == cfg
    assert p2.fingerprint() == p.fingerprint() and ad2.fingerprint() == ad.fingerprint()
    toks = np.arange(11)
    np.testing.assert_array_equal(forward_logits(p2, toks, ad2), forward_logits(p, toks, ad))
    save_checkpoint(tmp_path / "b.ckpt", p)
    assert load_checkpoint(tmp_path / "b.ckpt")[1] is None


def test_checkpoints_are_byte_deterministic(tmp_path, tiny64):
    save_checkpoint(tmp_path / "a.ckpt", tiny64)
    save_checkpoint(tmp_path / "b.ckpt", tiny64.copy())
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_weight_names_cover_init(tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, smear_keys=True, tie_embeddings=False)
    assert set(init_params(cfg).tensors) == set(weight_names(cfg))


def test_lora_share_at_default_config():
    p = init_params(ModelConfig(), seed=0, dtype=np.float32)
    rep = parameter_report(p, init_lora(p))
    assert rep["trainable_fraction"] < 0.05
