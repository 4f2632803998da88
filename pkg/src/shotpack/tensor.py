"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds a fresh graph node when any input requires a gradient and
grad mode is on. ``Tensor.backward`` walks the graph in reverse topological
order and accumulates ``.grad`` on every node that requires one.

Shapes must match exactly, with two exceptions: adding a 1-D bias over the
last axis, and ``matmul`` against a 2-D right operand (``(..., m, k) @ (k, n)``).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

# Finite checks are cheap relative to matmuls; disable only for profiling.
CHECK_FINITE = True

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An op was called outside its documented contract."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self, tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2))

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # no op mutates arrays in place, so storing views is safe
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def bw(g):
            _accum(a, g)
            _accum(b, g)
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def bw(g):
            _accum(a, g)
            _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0))
    else:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match")
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not match")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not match")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bw, "scale")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    k = float(np.sqrt(2.0 / np.pi))
    xd = x.data
    x2 = xd * xd
    t = np.tanh(k * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = k * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        _accum(x, g * d)

    return _make(out, (x,), bw, "gelu")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, np.ascontiguousarray(g.transpose(inv)))

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, bounds, axis=axis)):
            _accum(x, part)

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # one large 2-D product is much faster than numpy's batched loop
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, ga)
        if b.requires_grad:
            if b.ndim == 2:
                ga = a.data.reshape(-1, a.shape[-1])
                _accum(b, ga.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), bw, "matmul")


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; ids may have any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accum(table, acc)

    return _make(table.data[ids], (table,), bw, "embedding")


def smear(k: Tensor, logits: Tensor) -> Tensor:
    """Blend each key with the previous position's key along axis -2.

    ``k`` is (B, H, T, d) and ``logits`` is (H,); head h uses weight
    w = sigmoid(logits[h]) for the previous key. Position 0 blends with zeros.
    """
    if k.ndim != 4 or logits.shape != (k.shape[1],):
        raise ShapeError(f"smear: keys {k.shape} with weights {logits.shape}")
    w = (1.0 / (1.0 + np.exp(-logits.data))).astype(k.dtype)[None, :, None, None]
    prev = np.zeros_like(k.data)
    prev[:, :, 1:] = k.data[:, :, :-1]
    out = (1.0 - w) * k.data + w * prev

    def bw(g):
        if k.requires_grad:
            gk = (1.0 - w) * g
            gk[:, :, :-1] += w * g[:, :, 1:]
            _accum(k, gk)
        if logits.requires_grad:
            ga = (g * (prev - k.data)).sum(axis=(0, 2, 3)) * (w * (1.0 - w)).reshape(-1)
            _accum(logits, ga.astype(logits.dtype))

    return _make(out, (k, logits), bw, "smear")


# ---------------------------------------------------------------- normalisation


def _causal_keep(tq: int, tk: int, offset: int) -> np.ndarray:
    # query i sits at absolute position offset + i and may see keys j <= offset + i
    return np.arange(tk)[None, :] <= (np.arange(tq)[:, None] + offset)


def softmax(x: Tensor, axis: int = -1, causal_offset: int | None = None) -> Tensor:
    """Max-stabilised softmax.

    With ``causal_offset`` set, the last two axes are (query, key) and key j is
    hidden from query i whenever ``j > causal_offset + i``; hidden entries get
    probability exactly zero.
    """
    if causal_offset is None:
        z = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        if axis not in (-1, x.ndim - 1):
            raise ContractError("causal softmax normalises over the last axis")
        keep = _causal_keep(x.shape[-2], x.shape[-1], causal_offset)
        if x.shape[-2] and not keep.any(axis=-1).all():
            raise ContractError("causal mask leaves a query row empty")
        masked = np.where(keep, x.data, -np.inf)
        z = masked - masked.max(axis=axis, keepdims=True)
        e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        s = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - s))

    return _make(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def rotary(x: Tensor, offset: int = 0, base: float = 10000.0) -> Tensor:
    """Rotary position encoding over (..., T, d) with absolute start ``offset``."""
    t, d = x.shape[-2], x.shape[-1]
    if d % 2:
        raise ShapeError("rotary needs an even feature size")
    half = d // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = (np.arange(offset, offset + t, dtype=np.float64)[:, None]) * freqs[None, :]
    cos = np.concatenate([np.cos(ang)] * 2, axis=-1).astype(x.dtype)
    sin = np.concatenate([np.sin(ang)] * 2, axis=-1).astype(x.dtype)

    def rot(v):
        return np.concatenate([-v[..., half:], v[..., :half]], axis=-1)

    def rot_t(v):
        return np.concatenate([v[..., half:], -v[..., :half]], axis=-1)

    out = x.data * cos + rot(x.data) * sin

    def bw(g):
        _accum(x, g * cos + rot_t(g * sin))

    return _make(out, (x,), bw, "rotary")


# ---------------------------------------------------------------- losses and reductions


def cross_entropy_per_token(logits: Tensor, targets) -> Tensor:
    """Unreduced negative log-likelihood of ``targets`` under ``logits``.

    ``logits`` is (..., V) and ``targets`` is an integer array of shape (...).
    """
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    out = lse - picked

    def bw(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        _accum(logits, p * g[..., None])

    return _make(out, (logits,), bw, "cross_entropy")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        _accum(x, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _make(np.asarray(x.data.sum()), (x,), bw, "sum")


def weighted_sum(x: Tensor, w) -> Tensor:
    """Scalar ``sum(x * w)`` for a constant weight array of the same shape."""
    w = np.asarray(w, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weight shape {w.shape} != {x.shape}")

    def bw(g):
        _accum(x, g * w)

    return _make(np.asarray((x.data * w).sum()), (x,), bw, "weighted_sum")


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.99,
              weight_decay: float = 1e-5, eps: float = 1e-8):
    """One bias-corrected Adam update with decoupled weight decay.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    step = state.step + 1
    new_params, m_out, v_out = {}, {}, {}
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        if m.shape != p.shape:
            raise ShapeError(f"adam state for {name} has shape {m.shape}, param {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / c1
        vhat = v / c2
        new_params[name] = p - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)
        m_out[name] = m
        v_out[name] = v
    return new_params, AdamState(step, m_out, v_out)


# ---------------------------------------------------------------- gradient checking


def numerical_grad(f: Callable[[], float], arrays: Iterable[np.ndarray], h: float = 1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array, in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0
