"""Desk-scale benchmark pipeline: tokenizer, base model, meta-training runs, trend checks."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import (accuracy_eval, max_shots, model_logits_fn, perplexity_eval)
from .inference import InferenceEngine
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .packing import FEW_SHOT_CONTEXT, MaskStrategy
from .tasks import lm_documents, make_suite, recall_lines
from .tokenizer import ByteBPETokenizer
from .trainer import TrainConfig, pretrain, run_meta_training


@dataclass(frozen=True)
class BenchConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    n_ctx: int = 256
    smear_keys: bool = True
    init_std: float = 0.05
    vocab_size: int = 512
    tokenizer_docs: int = 200
    pretrain_docs: int = 2000
    pretrain_recall_lines: int = 20000
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 8
    doc_sentences: int = 60
    probe_docs: int = 32
    probe_lengths: tuple[int, ...] = (16, 32, 64, 128, 256)
    probe_window: int = 16
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=self.vocab_size, d_model=self.d_model,
                           n_layers=self.n_layers, n_heads=self.n_heads, d_ff=self.d_ff,
                           n_ctx=self.n_ctx, smear_keys=self.smear_keys,
                           init_std=self.init_std)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["probe_lengths"] = list(self.probe_lengths)
        return d


def build_tokenizer(cfg: BenchConfig) -> ByteBPETokenizer:
    """Merges are learned from probe-grammar text only, so task symbols stay single bytes."""
    docs = lm_documents(cfg.seed, cfg.tokenizer_docs, cfg.doc_sentences)
    return ByteBPETokenizer.train(docs, cfg.vocab_size)


def pretraining_streams(cfg: BenchConfig, tok: ByteBPETokenizer) -> list[np.ndarray]:
    docs = lm_documents(cfg.seed + 1, cfg.pretrain_docs, cfg.doc_sentences)
    text = np.asarray(tok.encode("\n\n".join(docs)), dtype=np.int32)
    streams = [text]
    if cfg.pretrain_recall_lines:
        recall = "".join(recall_lines(cfg.seed, cfg.pretrain_recall_lines))
        streams.append(np.asarray(tok.encode(recall), dtype=np.int32))
    return streams


def probe_docs(cfg: BenchConfig, tok: ByteBPETokenizer) -> list[np.ndarray]:
    """Held-out documents of the probe grammar (a seed never used for training)."""
    docs = lm_documents(cfg.seed + 10_007, cfg.probe_docs, cfg.doc_sentences)
    return [np.asarray(tok.encode(d), dtype=np.int64) for d in docs]


def build_base(cfg: BenchConfig, cache_path=None, log=None):
    """Pretrained base model and tokenizer; reuses ``cache_path`` when it matches ``cfg``."""
    tok = build_tokenizer(cfg)
    if cache_path is not None and Path(cache_path).exists():
        params, _, extra = load_checkpoint(cache_path)
        if extra.get("bench") == cfg.to_dict():
            return params, tok
    params = init_params(cfg.model_config(), seed=cfg.seed, dtype=np.float32)
    streams = pretraining_streams(cfg, tok)

    def cb(step, loss):
        if log is not None and (step % 100 == 0 or step == cfg.pretrain_steps - 1):
            log(f"pretrain step {step} loss {loss:.4f}")

    params, losses = pretrain(params, streams, cfg.pretrain_steps, lr=cfg.pretrain_lr,
                              batch=cfg.pretrain_batch, seed=cfg.seed, callback=cb)
    if cache_path is not None:
        Path(cache_path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(cache_path, params, meta={"bench": cfg.to_dict(),
                                                  "final_loss": losses[-1] if losses else None})
    return params, tok


def default_cache_path() -> Path:
    root = os.environ.get("SHOTPACK_CACHE", Path.home() / ".cache" / "shotpack")
    return Path(root) / "base.ckpt"


# ---------------------------------------------------------------- trend study


@dataclass
class TrendConfig:
    steps: int = 150
    lr: float = 3e-3
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_kinds: tuple[str, ...] = ("attn.q", "attn.v")
    eval_count: int = 200
    seeds: tuple[int, ...] = (0, 1, 2)
    excluded_category: str = "classification"
    task_family: str = "keyed_lookup"
    train_per_family: int = 3
    global_batch: int = 8
    equal_examples: bool = True  # zero/few-shot batches grow to match many-shot example counts

    def train_config(self, regime: str, strategy, seed: int, batch_scale: int = 1) -> TrainConfig:
        return TrainConfig(strategy=strategy, regime=regime, steps=self.steps, lr=self.lr,
                           seed=seed, lora_rank=self.lora_rank, lora_alpha=self.lora_alpha,
                           lora_kinds=self.lora_kinds, global_batch=self.global_batch * batch_scale)


def examples_per_window(regime: str, tasks, tok, n_ctx: int) -> float:
    """Average number of demonstrations plus query in one training window."""
    if regime == "zero":
        return 1.0
    if regime == "few":
        return FEW_SHOT_CONTEXT + 1.0
    return float(np.mean([max_shots(t, tok, n_ctx) + 1 for t in tasks]))


def batch_scale(regime: str, tasks, tok, n_ctx: int) -> int:
    """Batch multiplier that gives ``regime`` as many training examples per step as many-shot."""
    many = examples_per_window("many", tasks, tok, n_ctx)
    return max(1, round(many / examples_per_window(regime, tasks, tok, n_ctx)))


VARIANTS = {
    "many_mask_all": ("many", MaskStrategy.MASK_ALL),
    "few_mask_all": ("few", MaskStrategy.MASK_ALL),
    "zero_sft": ("zero", MaskStrategy.MASK_LAST),
    "many_autoregressive": ("many", MaskStrategy.AUTOREGRESSIVE),
}


@dataclass
class TrendSeedResult:
    seed: int
    max_shots: int
    accuracy: dict[str, float]
    perplexity: dict[str, dict[int, float]]
    checks: dict[str, bool] = field(default_factory=dict)


def trend_seed(params, tok, bench: BenchConfig, cfg: TrendConfig, seed: int, log=None) -> TrendSeedResult:
    suite = make_suite(cfg.train_per_family, 1, seed=seed)
    target = next(t for t in suite.held_out if t.family == cfg.task_family)
    n_max = max_shots(target, tok, bench.n_ctx)
    adapters = {"base": None}
    for name, (regime, strategy) in VARIANTS.items():
        scale = batch_scale(regime, suite.held_in, tok, bench.n_ctx) if cfg.equal_examples else 1
        adapters[name], _ = run_meta_training(params, suite.held_in, tok,
                                              cfg.train_config(regime, strategy, seed, scale),
                                              held_out_ids=suite.held_out_ids)
        if log:
            log(f"seed {seed}: trained {name}")
    kept = [t for t in suite.held_in if t.category != cfg.excluded_category]
    adapters["ablation"], _ = run_meta_training(params, kept, tok,
                                                cfg.train_config("many", MaskStrategy.MASK_ALL, seed),
                                                held_out_ids=suite.held_out_ids)
    acc = {}
    for name, ad in adapters.items():
        res = accuracy_eval(InferenceEngine(params, ad), target, n_max, cfg.eval_count, seed, tok,
                            strategy=name, n_w=bench.n_ctx)
        acc[name] = res.value
        if log:
            log(f"seed {seed}: {name} accuracy@{n_max} = {res.value:.3f}")
    docs = probe_docs(bench, tok)
    ppl = {}
    for name in ("base", "many_mask_all", "zero_sft"):
        ppl[name] = perplexity_eval(model_logits_fn(params, adapters[name]), docs,
                                    bench.probe_lengths, bench.probe_window)
    deg_many = {L: ppl["many_mask_all"][L] - ppl["base"][L] for L in bench.probe_lengths}
    deg_zero = {L: ppl["zero_sft"][L] - ppl["base"][L] for L in bench.probe_lengths}
    checks = {
        "many_beats_few": acc["many_mask_all"] > acc["few_mask_all"],
        "few_beats_base": acc["few_mask_all"] > acc["base"],
        "ablation_beats_base": acc["ablation"] > acc["base"],
        "less_forgetting": all(deg_many[L] < deg_zero[L] for L in bench.probe_lengths),
    }
    return TrendSeedResult(seed, n_max, acc, ppl, checks)


def majority(results: list[TrendSeedResult]) -> dict[str, bool]:
    keys = results[0].checks.keys()
    return {k: sum(r.checks[k] for r in results) * 2 > len(results) for k in keys}


def trend_summary(results: list[TrendSeedResult]) -> str:
    return json.dumps({"seeds": [dataclasses.asdict(r) for r in results],
                       "majority": majority(results)}, indent=2, sort_keys=True)
