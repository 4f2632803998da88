"""Tiny decoder-only causal transformer with LoRA adapters on its projections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .container import read_container, write_container
from .tensor import Tensor


class ContextLengthError(ValueError):
    """A sequence does not fit in the model's context window."""


class ConfigError(ValueError):
    """A model or adapter configuration is inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    n_ctx: int = 512  # maximum context window n_w, in tokens
    positional: str = "learned"  # "learned" | "rotary"
    tie_embeddings: bool = True
    ln_eps: float = 1e-5
    init_std: float = 0.02
    smear_keys: bool = False  # blend each attention key with the previous position's key

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_ctx < 64:
            raise ConfigError("n_ctx must be at least 64 tokens")
        if self.positional not in ("learned", "rotary"):
            raise ConfigError(f"unknown positional scheme {self.positional!r}")
        if self.positional == "rotary" and (self.d_model // self.n_heads) % 2:
            raise ConfigError("rotary positions need an even head size")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fingerprint(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256(kind.encode())
    h.update(json.dumps(meta, sort_keys=True).encode())
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(a.dtype.str.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: Tensor(t.data.copy()) for k, t in self.tensors.items()})

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.config, {k: Tensor(t.data.astype(dtype)) for k, t in self.tensors.items()})

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def fingerprint(self) -> str:
        return _fingerprint("model", self.config.to_dict(), self.arrays())


def weight_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb"]
    if config.positional == "learned":
        names.append("pos_emb")
    for i in range(config.n_layers):
        p = f"h{i}."
        names += [p + "ln1.g", p + "ln1.b", p + "attn.q", p + "attn.k", p + "attn.v",
                  p + "attn.o", p + "ln2.g", p + "ln2.b", p + "mlp.fc", p + "mlp.fc_b",
                  p + "mlp.proj", p + "mlp.proj_b"]
        if config.smear_keys:
            names.append(p + "attn.smear")
    names += ["ln_f.g", "ln_f.b"]
    if not config.tie_embeddings:
        names.append("lm_head")
    return names


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff
    std = config.init_std
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.n_ctx, d),
              "lm_head": (config.vocab_size, d), "ln_f.g": (d,), "ln_f.b": (d,)}
    out = {}
    for name in weight_names(config):
        leaf = name.split(".", 1)[1] if name.startswith("h") else name
        if leaf in ("ln1.g", "ln2.g", "ln_f.g") or name == "ln_f.g":
            arr = np.ones(d)
        elif leaf in ("ln1.b", "ln2.b", "mlp.proj_b") or name == "ln_f.b":
            arr = np.zeros(d)
        elif leaf == "mlp.fc_b":
            arr = np.zeros(f)
        elif leaf == "attn.smear":
            arr = np.zeros(config.n_heads)
        elif leaf in ("attn.q", "attn.k", "attn.v", "attn.o"):
            arr = rng.normal(0.0, std, (d, d))
        elif leaf == "mlp.fc":
            arr = rng.normal(0.0, std, (f, d))
        elif leaf == "mlp.proj":
            arr = rng.normal(0.0, std, (d, f))
        else:
            arr = rng.normal(0.0, std, shapes[name])
        out[name] = Tensor(arr.astype(dtype))
    return ModelParams(config, out)


# ---------------------------------------------------------------- LoRA


DEFAULT_LORA_TARGETS = ("attn.q", "attn.v")


@dataclass
class LoraAdapter:
    """Low-rank deltas ``(alpha / rank) * B @ A`` keyed by target weight name.

    ``tensors`` holds ``"<target>.A"`` of shape (rank, d_in) and ``"<target>.B"``
    of shape (d_out, rank).
    """

    rank: int
    alpha: float
    targets: tuple[str, ...]
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def pair(self, target: str) -> tuple[Tensor, Tensor]:
        return self.tensors[target + ".A"], self.tensors[target + ".B"]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> LoraAdapter:
        return LoraAdapter(self.rank, self.alpha, self.targets,
                           {k: Tensor(t.data.copy()) for k, t in self.tensors.items()})

    def astype(self, dtype) -> LoraAdapter:
        return LoraAdapter(self.rank, self.alpha, self.targets,
                           {k: Tensor(t.data.astype(dtype)) for k, t in self.tensors.items()})

    def set_trainable(self, flag: bool = True) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def meta(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "targets": list(self.targets)}

    def fingerprint(self) -> str:
        return _fingerprint("lora", self.meta(), self.arrays())


def lora_targets(config: ModelConfig, kinds=DEFAULT_LORA_TARGETS) -> tuple[str, ...]:
    return tuple(f"h{i}.{k}" for i in range(config.n_layers) for k in kinds)


def init_lora(params: ModelParams, rank: int = 8, alpha: float = 16.0, targets=None,
              seed: int = 0) -> LoraAdapter:
    """Fresh adapter: A ~ N(0, 1/d_in), B = 0, so the delta starts at exactly zero."""
    targets = tuple(targets) if targets is not None else lora_targets(params.config)
    rng = np.random.default_rng(seed)
    dtype = params.dtype
    tensors = {}
    for t in targets:
        if t not in params.tensors or params[t].ndim != 2:
            raise ConfigError(f"LoRA target {t!r} is not a weight matrix of the model")
        d_out, d_in = params[t].shape
        tensors[t + ".A"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (rank, d_in)).astype(dtype))
        tensors[t + ".B"] = Tensor(np.zeros((d_out, rank), dtype=dtype))
    return LoraAdapter(rank, alpha, targets, tensors)


def _check_adapter(params: ModelParams, adapter: LoraAdapter) -> None:
    for t in adapter.targets:
        if t not in params.tensors:
            raise ConfigError(f"adapter targets {t!r}, which the model does not have")
        a, b = adapter.pair(t)
        if (b.shape[0], a.shape[1]) != params[t].shape:
            raise ConfigError(f"adapter delta for {t!r} has shape {(b.shape[0], a.shape[1])}, "
                              f"weight has {params[t].shape}")


def apply_lora(params: ModelParams, adapter: LoraAdapter) -> dict[str, np.ndarray]:
    """Effective weights with every targeted matrix replaced by ``W + scale * B @ A``."""
    _check_adapter(params, adapter)
    eff = params.arrays()
    for t in adapter.targets:
        a, b = adapter.pair(t)
        eff[t] = eff[t] + adapter.scale * (b.data @ a.data)
    return eff


def merge_lora(params: ModelParams, adapter: LoraAdapter | None) -> ModelParams:
    if adapter is None:
        return params.copy()
    eff = apply_lora(params, adapter)
    return ModelParams(params.config, {k: Tensor(v.copy()) for k, v in eff.items()})


def parameter_report(params: ModelParams, adapter: LoraAdapter | None) -> dict:
    base = params.n_params()
    lora = adapter.n_params() if adapter is not None else 0
    return {"base_params": base, "lora_params": lora, "total_params": base + lora,
            "trainable_fraction": lora / (base + lora)}


# ---------------------------------------------------------------- forward


@dataclass
class ForwardCounter:
    """Instrumentation: positions pushed through the model and query-key pairs scored."""

    calls: int = 0
    positions: int = 0
    attention_pairs: int = 0

    def reset(self) -> None:
        self.calls = self.positions = self.attention_pairs = 0


def _linear(x: Tensor, params: ModelParams, name: str, adapter: LoraAdapter | None) -> Tensor:
    out = tn.matmul(x, params[name].T)
    if adapter is not None and name in adapter.targets:
        a, b = adapter.pair(name)
        out = out + tn.matmul(tn.matmul(x, a.T), b.T) * adapter.scale
    return out


def forward(params: ModelParams, tokens, adapter: LoraAdapter | None = None, *,
            past=None, counter: ForwardCounter | None = None, return_kv: bool = False):
    """Run the decoder over ``tokens`` of shape (T,) or (B, T).

    ``past`` is a per-layer list of ``(keys, values)`` arrays of shape
    (B, H, P, head_dim) for a cached prefix of length P; the new tokens are
    placed at absolute positions P..P+T-1. Returns logits of shape (T, V) or
    (B, T, V), plus the extended per-layer key/value list when ``return_kv``.
    """
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    bsz, t = tokens.shape
    offset = 0 if not past else past[0][0].shape[2]
    if offset + t > cfg.n_ctx:
        raise ContextLengthError(f"{offset + t} tokens exceed the {cfg.n_ctx}-token window")
    if adapter is not None:
        _check_adapter(params, adapter)
    if counter is not None:
        counter.calls += 1
        counter.positions += bsz * t
        counter.attention_pairs += bsz * (t * offset + t * (t + 1) // 2)

    h, dh = cfg.n_heads, cfg.head_dim
    x = tn.embedding(params["tok_emb"], tokens)
    if cfg.positional == "learned":
        pos = np.broadcast_to(np.arange(offset, offset + t), (bsz, t))
        x = x + tn.embedding(params["pos_emb"], pos)
    new_kv = []
    inv_sqrt = 1.0 / np.sqrt(dh)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        a = tn.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)

        def heads(z):
            return tn.transpose(tn.reshape(z, (bsz, t, h, dh)), (0, 2, 1, 3))

        q = heads(_linear(a, params, p + "attn.q", adapter))
        k = heads(_linear(a, params, p + "attn.k", adapter))
        v = heads(_linear(a, params, p + "attn.v", adapter))
        if cfg.positional == "rotary":
            q = tn.rotary(q, offset)
            k = tn.rotary(k, offset)
        if past:
            # a single cached prefix may serve a batch of continuations
            pk, pv = (np.broadcast_to(z, (bsz,) + z.shape[1:]) for z in past[i])
            k = tn.concat([Tensor(pk), k], axis=2)
            v = tn.concat([Tensor(pv), v], axis=2)
        if return_kv:
            new_kv.append((k.data, v.data))
        if cfg.smear_keys:
            # the cache keeps raw keys; smearing is recomputed over the whole prefix
            k = tn.smear(k, params[p + "attn.smear"])
        scores = tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))) * inv_sqrt
        probs = tn.softmax(scores, axis=-1, causal_offset=offset)
        ctx = tn.reshape(tn.transpose(tn.matmul(probs, v), (0, 2, 1, 3)), (bsz, t, cfg.d_model))
        x = x + _linear(ctx, params, p + "attn.o", adapter)
        m = tn.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
        m = tn.gelu(_linear(m, params, p + "mlp.fc", adapter) + params[p + "mlp.fc_b"])
        x = x + (_linear(m, params, p + "mlp.proj", adapter) + params[p + "mlp.proj_b"])
    x = tn.layer_norm(x, params["ln_f.g"], params["ln_f.b"], cfg.ln_eps)
    head = params["tok_emb"] if cfg.tie_embeddings else params["lm_head"]
    logits = tn.matmul(x, head.T)
    if squeeze:
        logits = tn.reshape(logits, (t, cfg.vocab_size))
    return (logits, new_kv) if return_kv else logits


def forward_logits(params: ModelParams, tokens, adapter: LoraAdapter | None = None,
                   counter: ForwardCounter | None = None) -> np.ndarray:
    """Gradient-free logits as a plain array."""
    with tn.no_grad():
        return forward(params, tokens, adapter, counter=counter).data


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ModelParams, adapter: LoraAdapter | None = None,
                    meta: dict | None = None) -> None:
    arrays = {"base/" + k: v for k, v in params.arrays().items()}
    info = {"config": params.config.to_dict(), "lora": None, "extra": meta or {}}
    if adapter is not None:
        info["lora"] = adapter.meta()
        arrays.update({"lora/" + k: v for k, v in adapter.arrays().items()})
    write_container(path, "checkpoint", info, arrays)


def load_checkpoint(path) -> tuple[ModelParams, LoraAdapter | None, dict]:
    info, arrays = read_container(path, kind="checkpoint")
    cfg = ModelConfig(**info["config"])
    base = {k[5:]: Tensor(v) for k, v in arrays.items() if k.startswith("base/")}
    missing = set(weight_names(cfg)) - set(base)
    if missing:
        raise ConfigError(f"checkpoint is missing weights: {sorted(missing)[:3]}")
    params = ModelParams(cfg, base)
    adapter = None
    if info["lora"] is not None:
        lo = info["lora"]
        tensors = {k[5:]: Tensor(v) for k, v in arrays.items() if k.startswith("lora/")}
        adapter = LoraAdapter(lo["rank"], lo["alpha"], tuple(lo["targets"]), tensors)
        _check_adapter(params, adapter)
    return params, adapter, info["extra"]
