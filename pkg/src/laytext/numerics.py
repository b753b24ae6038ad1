"""Float64 tensors with a reverse-mode tape, gradient checking, and Adam.

Each op computes its forward value with numpy and, when any input requires a
gradient, records a closure mapping the output gradient to input gradients.
``Tensor.backward`` replays those closures in reverse topological order.

Only what a small decoder-only transformer needs is provided; several
transformer pieces (RMS norm, softmax, rotary embedding, cross entropy) are
fused ops with hand-written backward passes.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EmptyLossError, NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array plus optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None):
        return tsum(self, axis)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._prev, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return _make(x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis), (a,), fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b``; cond is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    zero = np.zeros((), dtype=np.float64)
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, zero), a.shape),
            _unbroadcast(np.where(cond, zero, g), b.shape),
        ),
    )


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``index`` of ``a`` flattened to 2-D (n, last_dim)."""
    d = a.shape[-1]
    flat_shape = (int(np.prod(a.shape[:-1])), d)
    index = np.asarray(index, dtype=np.int64)

    def fn(g):
        full = np.zeros(flat_shape)
        np.add.at(full, index, g)
        return (full.reshape(a.shape),)

    return _make(a.data.reshape(flat_shape)[index], (a,), fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab, d = table.shape

    def fn(g):
        gt = np.zeros((vocab, d))
        np.add.at(gt, ids.ravel(), g.reshape(-1, d))
        return (gt,)

    return _make(table.data[ids], (table,), fn)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (``a`` may carry batch dims)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd.T
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gbias

    return _make(out.reshape(*lead, wd.shape[0]), parents, fn)


# ---------------------------------------------------------------------------
# fused transformer pieces
# ---------------------------------------------------------------------------


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xn = xd * r

    def fn(g):
        gw = (g * xn).reshape(-1, xd.shape[-1]).sum(axis=0) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxn = g * wd
            gx = r * (gxn - xn * np.mean(gxn * xn, axis=-1, keepdims=True))
        return gx, gw

    return _make(xn * wd, (x, weight), fn)


def softmax(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``allowed`` is false get 0."""
    xd = x.data
    if allowed is not None:
        xd = np.where(allowed, xd, -np.inf)
    m = np.max(xd, axis=-1, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=-1, keepdims=True)),))


def rope_tables(positions: np.ndarray, head_dim: int, base: float = 10000.0):
    """cos/sin tables of shape (len(positions), head_dim // 2)."""
    if head_dim % 2:
        raise ContractError(f"rotary embedding needs an even head dimension, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    return np.cos(ang), np.sin(ang)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent pairs (2j, 2j+1) of the last axis by the tabulated angles."""
    xd = x.data
    x0, x1 = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def fn(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return _make(out, (x,), fn)


def masked_cross_entropy(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean negative log-likelihood over positions whose mask is 1.

    ``logits`` is (..., V); ``targets`` and ``loss_mask`` match its leading
    shape. Rows with mask 0 never enter the computation.
    """
    v = logits.shape[-1]
    lead = logits.shape[:-1]
    targets = np.asarray(targets, dtype=np.int64)
    loss_mask = np.asarray(loss_mask)
    if targets.shape != lead or loss_mask.shape != lead:
        raise DimensionError(
            f"targets {targets.shape} / mask {loss_mask.shape} do not match logits {logits.shape}"
        )
    rows = np.flatnonzero(loss_mask.reshape(-1))
    if rows.size == 0:
        raise EmptyLossError("loss mask selects no positions")
    tgt = targets.reshape(-1)[rows]
    if np.any(tgt < 0) or np.any(tgt >= v):
        raise ContractError(f"target id out of range for vocabulary of {v}")
    flat = logits.data.reshape(-1, v)
    sel = flat[rows]
    m = sel.max(axis=1, keepdims=True)
    shifted = sel - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(rows.size), tgt]
    n = rows.size

    def fn(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), tgt] -= 1.0
        full = np.zeros_like(flat)
        full[rows] = p * (float(g) / n)
        return (full.reshape(logits.shape),)

    return _make(np.array(nll.sum() / n), (logits,), fn)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    per_tensor: bool = False,
):
    """Largest relative error between tape gradients and central differences.

    ``f(params)`` must be deterministic. Entries are perturbed in place and
    restored exactly. With ``per_tensor`` a list of per-tensor maxima is
    returned instead of the overall maximum.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("function value is not finite")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]

    def value() -> float:
        with no_grad():
            val = float(f(params).data)
        if not math.isfinite(val):
            raise NumericError("function value is not finite under perturbation")
        return val

    worst = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        af = a.reshape(-1)
        tensor_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            err = abs(af[i] - num) / max(abs(af[i]), abs(num), 1e-8)
            tensor_worst = max(tensor_worst, err)
        worst.append(tensor_worst)
    if per_tensor:
        return worst
    return max(worst, default=0.0)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """Adam moments keyed by parameter name plus the completed-step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_grad_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(grads.values())
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, Tensor], OptimState]:
    """One bias-corrected Adam update with decoupled weight decay.

    Only names present in ``grads`` are updated. Parameter arrays are
    replaced, never written in place, so earlier snapshots stay valid.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = p.data - lr * weight_decay * p.data - lr * update
        state.m[name] = m
        state.v[name] = v
    state.step = t
    return params, state
