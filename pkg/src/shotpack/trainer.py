"""Masked-loss LoRA fine-tuning over packed in-context instances."""

from __future__ import annotations

import dataclasses
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .model import LoraAdapter, ModelParams, forward, init_lora, lora_targets
from .packing import (FEW_SHOT_CONTEXT, MaskStrategy, PackedInstance, pack_examples,
                      pack_max_context, prefix_instance, preamble_length, render_example,
                      uniform_stream)
from .tensor import AdamState, ContractError, Tensor, adam_step


class TrainingError(RuntimeError):
    pass


class LeakageError(TrainingError):
    pass


# rows of the baseline matrix: regime -> allowed loss strategies
BASELINES = {
    "zero": (MaskStrategy.MASK_LAST,),
    "few": (MaskStrategy.MASK_LAST, MaskStrategy.MASK_ALL),
    "many": (MaskStrategy.MASK_LAST, MaskStrategy.MASK_ALL, MaskStrategy.AUTOREGRESSIVE),
}


@dataclass
class TrainConfig:
    strategy: MaskStrategy = MaskStrategy.MASK_ALL
    regime: str = "many"
    steps: int = 200
    lr: float = 3e-4
    floor_fraction: float = 0.1
    warmup_steps: int = 0
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    global_batch: int = 8
    grad_accum: int = 4
    seed: int = 0
    mask_last_mode: str = "full"  # "full": one window, last target only; "prefixes": every prefix
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_kinds: tuple[str, ...] = ("attn.q", "attn.v")
    instances_per_task: int | None = None  # overrides steps when set
    few_shot_context: int = FEW_SHOT_CONTEXT
    dtype: str = "float32"

    def __post_init__(self):
        self.strategy = MaskStrategy(self.strategy)
        self.lora_kinds = tuple(self.lora_kinds)
        self.validate()

    def validate(self) -> None:
        if self.regime not in BASELINES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.strategy not in BASELINES[self.regime]:
            raise ValueError(f"{self.regime}-shot training with {self.strategy.value!r} "
                             "is not a baseline configuration")
        if self.global_batch < 1 or self.grad_accum < 1 or self.global_batch % self.grad_accum:
            raise ValueError("global_batch must be a positive multiple of grad_accum")
        if self.mask_last_mode not in ("full", "prefixes"):
            raise ValueError(f"unknown mask_last_mode {self.mask_last_mode!r}")
        if not 0.0 <= self.floor_fraction <= 1.0:
            raise ValueError("floor_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["strategy"] = self.strategy.value
        d["lora_kinds"] = list(self.lora_kinds)
        return d


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    tokens_processed: int = 0
    target_positions: int = 0
    instances: int = 0
    windows: int = 0
    examples: int = 0
    per_task_instances: dict[str, int] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self, include_time: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not include_time:
            d.pop("wall_time")
        return d


# ---------------------------------------------------------------- loss


def masked_loss(logits: Tensor, inst: PackedInstance, strategy: MaskStrategy | None = None):
    """Mean next-token cross entropy over the loss positions of ``inst``.

    ``logits`` is (T, V) for the instance's tokens. Returns the scalar loss and
    a per-position loss vector where entry t is the loss of token t given
    tokens < t (entry 0 is 0).
    """
    toks = np.asarray(inst.token_ids)
    t = len(toks)
    if logits.shape[0] != t:
        raise ContractError(f"logits cover {logits.shape[0]} positions, instance has {t}")
    mask = inst.loss_mask if strategy is None else inst.with_strategy(strategy).loss_mask
    count = int(mask.sum())
    if count == 0:
        raise ContractError("loss mask selects no positions")
    shifted = np.zeros(t, dtype=np.int64)
    shifted[:-1] = toks[1:]
    ce = tn.cross_entropy_per_token(logits, shifted)
    w = np.zeros(t)
    w[:-1] = mask[1:] / count
    per_position = np.zeros(t, dtype=ce.data.dtype)
    per_position[1:] = ce.data[:-1]
    return tn.weighted_sum(ce, w), per_position


def _batch_loss(params, adapter, insts: Sequence[PackedInstance], denom: int) -> Tensor:
    """Sum over ``insts`` of each instance's mean masked loss, divided by ``denom``."""
    t = max(len(i) for i in insts)
    toks = np.zeros((len(insts), t), dtype=np.int64)
    w = np.zeros((len(insts), t))
    for r, inst in enumerate(insts):
        n = len(inst)
        toks[r, :n] = inst.token_ids
        count = int(inst.loss_mask.sum())
        if count == 0:
            raise ContractError(f"instance {r} of the batch has an empty loss mask")
        w[r, :n - 1] = inst.loss_mask[1:] / (count * denom)
    shifted = np.zeros_like(toks)
    shifted[:, :-1] = toks[:, 1:]
    logits = forward(params, toks, adapter)
    ce = tn.cross_entropy_per_token(logits, shifted)
    return tn.weighted_sum(ce, w)


# ---------------------------------------------------------------- schedule


def cosine_lr(step: int, total_steps: int, peak: float, floor_fraction: float = 0.1,
              warmup_steps: int = 0) -> float:
    """Cosine decay from ``peak`` at step 0 to ``peak * floor_fraction`` at ``total_steps``."""
    if not 0 <= step <= max(total_steps, 0):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return peak
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    floor = peak * floor_fraction
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------- one optimiser step


def train_step(params: ModelParams, adapter: LoraAdapter, batch: Sequence[PackedInstance],
               cfg: TrainConfig, state: AdamState, lr: float):
    """Accumulate gradients over ``cfg.grad_accum`` micro-batches, then one Adam step.

    Only adapter tensors change. Returns ``(adapter, state, metrics)``.
    """
    if not batch:
        raise ContractError("empty batch")
    adapter.set_trainable(True)
    n_micro = min(cfg.grad_accum, len(batch))
    chunks = np.array_split(np.arange(len(batch)), n_micro)
    grads = {k: np.zeros_like(t.data) for k, t in adapter.tensors.items()}
    total = 0.0
    for idx in chunks:
        for t in adapter.tensors.values():
            t.grad = None
        try:
            loss = _batch_loss(params, adapter, [batch[i] for i in idx], len(batch))
        except FloatingPointError as e:
            raise TrainingError(f"non-finite forward pass ({e}); lr={lr}, "
                                f"tasks={sorted({b.task for b in batch})}") from e
        if not np.isfinite(loss.data):
            raise TrainingError(f"loss is {loss.data}; lr={lr}")
        loss.backward()
        total += float(loss.data)
        for k, t in adapter.tensors.items():
            if t.grad is not None:
                grads[k] = grads[k] + t.grad
    for t in adapter.tensors.values():
        t.grad = None
    new, state = adam_step(adapter.arrays(), grads, state, lr, cfg.beta1, cfg.beta2,
                           cfg.weight_decay, cfg.eps)
    out = LoraAdapter(adapter.rank, adapter.alpha, adapter.targets,
                      {k: Tensor(v) for k, v in new.items()})
    tokens = sum(len(b) for b in batch)
    return out, state, {"loss": total, "lr": lr, "tokens": tokens,
                        "targets": int(sum(b.loss_mask.sum() for b in batch))}


# ---------------------------------------------------------------- instance construction


def draw_window(task, regime: str, strategy: MaskStrategy, tokenizer, n_w: int,
                rng: np.random.Generator, few_shot_context: int = FEW_SHOT_CONTEXT) -> PackedInstance:
    """One freshly drawn training window for ``task`` in the given regime.

    Examples are re-drawn uniformly for every window. A class-balanced stream
    would leak into the query: in a short window the query label would never
    appear among the shots, which teaches the adapter to avoid copying.
    """
    stream = uniform_stream(task.pool(), rng)
    tpl = task.template
    if regime == "zero":
        return pack_examples([next(stream)], tpl, tokenizer, n_w, strategy)
    if regime == "few":
        exs = list(itertools.islice(stream, few_shot_context + 1))
        return pack_examples(exs, tpl, tokenizer, n_w, strategy)
    budget = n_w - preamble_length(tpl, tokenizer)
    exs, used = [], 0
    for ex in stream:
        a, b = render_example(ex, tpl, tokenizer)
        if used + len(a) + len(b) > budget:
            break
        exs.append(ex)
        used += len(a) + len(b)
    res = pack_max_context(exs, tpl, tokenizer, n_w, strategy)
    return res.instance


def expand_window(inst: PackedInstance, cfg: TrainConfig) -> list[PackedInstance]:
    if cfg.strategy is MaskStrategy.MASK_LAST and cfg.mask_last_mode == "prefixes":
        return [prefix_instance(inst, k, MaskStrategy.MASK_LAST) for k in range(len(inst.boundaries))]
    return [inst]


def task_schedule(tasks, n_windows: int, rng: np.random.Generator) -> list:
    """Equal per-task quotas (remainder spread one each), order shuffled."""
    base, extra = divmod(n_windows, len(tasks))
    order = []
    bonus = set(rng.permutation(len(tasks))[:extra].tolist())
    for i, t in enumerate(tasks):
        order += [t] * (base + (1 if i in bonus else 0))
    return [order[i] for i in rng.permutation(len(order))]


def run_meta_training(params: ModelParams, tasks, tokenizer, cfg: TrainConfig, *,
                      held_out_ids=(), adapter: LoraAdapter | None = None,
                      callback: Callable[[int, dict], None] | None = None):
    """Multi-task LoRA fine-tuning. Returns ``(adapter, TrainReport)``.

    Every window is single-task; tasks receive equal window quotas. Aborts
    before any update if a held-out task id appears among ``tasks``.
    """
    leaked = sorted({t.task_id for t in tasks} & set(held_out_ids))
    if leaked:
        raise LeakageError(f"held-out task(s) in the training set: {leaked}")
    if not tasks and (cfg.steps or cfg.instances_per_task):
        raise TrainingError("no training tasks")
    n_w = params.config.n_ctx
    dtype = np.dtype(cfg.dtype)
    base = params if params.dtype == dtype else params.astype(dtype)
    base.set_trainable(False)
    if adapter is None:
        adapter = init_lora(base, cfg.lora_rank, cfg.lora_alpha,
                            lora_targets(base.config, cfg.lora_kinds), seed=cfg.seed)
    adapter = adapter.astype(dtype)
    rng = np.random.default_rng([cfg.seed, 1])
    if cfg.instances_per_task is not None:
        n_windows = cfg.instances_per_task * len(tasks)
    else:
        n_windows = cfg.steps * cfg.global_batch
    schedule = task_schedule(tasks, n_windows, rng) if n_windows else []
    n_steps = math.ceil(len(schedule) / cfg.global_batch)
    report = TrainReport()
    state = AdamState()
    t0 = time.perf_counter()
    for step in range(n_steps):
        chunk = schedule[step * cfg.global_batch:(step + 1) * cfg.global_batch]
        batch = []
        for task in chunk:
            win = draw_window(task, cfg.regime, cfg.strategy, tokenizer, n_w, rng,
                              cfg.few_shot_context)
            report.windows += 1
            report.examples += len(win.boundaries)
            report.per_task_instances[task.task_id] = report.per_task_instances.get(task.task_id, 0) + 1
            batch.extend(expand_window(win, cfg))
        lr = cosine_lr(step, max(n_steps - 1, 0), cfg.lr, cfg.floor_fraction, cfg.warmup_steps)
        adapter, state, m = train_step(base, adapter, batch, cfg, state, lr)
        report.losses.append(m["loss"])
        report.lrs.append(lr)
        report.tokens_processed += m["tokens"]
        report.target_positions += m["targets"]
        report.instances += len(batch)
        if callback is not None:
            callback(step, m)
    report.wall_time = time.perf_counter() - t0
    adapter.set_trainable(False)
    return adapter, report


# ---------------------------------------------------------------- base-model pretraining


def lm_windows(token_stream: np.ndarray, length: int, rng: np.random.Generator, count: int):
    starts = rng.integers(0, len(token_stream) - length, size=count)
    return np.stack([token_stream[s:s + length] for s in starts])


def pretrain(params: ModelParams, token_streams: Sequence[np.ndarray], steps: int, *,
             lr: float = 3e-3, batch: int = 8, length: int | None = None, seed: int = 0,
             weight_decay: float = 0.0, floor_fraction: float = 0.1, warmup_steps: int = 50,
             dtype="float32", callback=None) -> tuple[ModelParams, list[float]]:
    """Full-parameter next-token training of the base model on raw token streams.

    Each batch row is a random window from one stream; streams are chosen in
    proportion to their length.
    """
    length = length or params.config.n_ctx
    rng = np.random.default_rng([seed, 2])
    p = params.astype(np.dtype(dtype))
    p.set_trainable(True)
    weights = np.array([len(s) for s in token_streams], dtype=float)
    weights /= weights.sum()
    state = AdamState()
    losses = []
    for step in range(steps):
        which = rng.choice(len(token_streams), size=batch, p=weights)
        rows = [lm_windows(token_streams[w], length, rng, 1)[0] for w in which]
        toks = np.stack(rows).astype(np.int64)
        targets = np.zeros_like(toks)
        targets[:, :-1] = toks[:, 1:]
        w = np.zeros(toks.shape)
        w[:, :-1] = 1.0 / (batch * (length - 1))
        for t in p.tensors.values():
            t.grad = None
        loss = tn.weighted_sum(tn.cross_entropy_per_token(forward(p, toks), targets), w)
        loss.backward()
        cur = cosine_lr(step, max(steps - 1, 0), lr, floor_fraction, warmup_steps)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in p.tensors.items()}
        new, state = adam_step(p.arrays(), grads, state, cur, 0.9, 0.99, weight_decay, 1e-8)
        p = ModelParams(p.config, {k: Tensor(v, requires_grad=True) for k, v in new.items()})
        losses.append(float(loss.data))
        if callback is not None:
            callback(step, losses[-1])
    p.set_trainable(False)
    return p, losses
