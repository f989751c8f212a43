"""Dense float64 matrix math with reverse-mode gradients.

Every operation records its parents and a backward closure on the implicit
tape (the op graph). `Tensor.backward()` visits nodes in reverse creation
order — a reverse topological order, since an op's output is always created
after its inputs — and accumulates gradients once per node, single-threaded,
so training is bit-reproducible.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

CHECK_FINITE = True

_uid_counter = itertools.count()


class Tensor:
    """A value node in the op graph. Ops never mutate their inputs."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_uid")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        if CHECK_FINITE and not np.all(np.isfinite(self.value)):
            raise FloatingPointError("non-finite values in tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self._uid = next(_uid_counter)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def _accum(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        """Accumulate gradients of this (scalar) node into the graph's leaves."""
        if self.value.shape != ():
            raise ValueError("backward() requires a scalar output")
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            n = stack.pop()
            if id(n) in seen:
                continue
            seen.add(id(n))
            nodes.append(n)
            stack.extend(n._parents)
        nodes.sort(key=lambda n: -n._uid)
        self.grad = np.ones((), dtype=np.float64)
        for n in nodes:
            if n._backward is not None and n.grad is not None:
                n._backward(n.grad)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def param(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def const(value) -> Tensor:
    return Tensor(value)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _out(value, parents, backward) -> Tensor:
    track = any(p.requires_grad for p in parents)
    t = Tensor(value, requires_grad=track, _parents=tuple(parents) if track else (),
               _backward=backward if track else None)
    return t


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a (1, C) row broadcast against (M, C) a."""
    val = a.value + b.value

    def backward(g):
        if a.requires_grad:
            ga = g if g.shape == a.value.shape else np.sum(g, axis=0, keepdims=True)
            a._accum(ga)
        if b.requires_grad:
            gb = g if g.shape == b.value.shape else np.sum(g, axis=0, keepdims=True)
            b._accum(gb)

    return _out(val, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.value.shape != b.value.shape:
        raise ValueError(f"shape mismatch {a.value.shape} * {b.value.shape}")
    val = a.value * b.value

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.value)
        if b.requires_grad:
            b._accum(g * a.value)

    return _out(val, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    val = a.value * s

    def backward(g):
        a._accum(g * s)

    return _out(val, (a,), backward)


def scale_columns(a: Tensor, v: np.ndarray) -> Tensor:
    """Scale column j of a by the constant v[j] (no gradient through v)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != a.value.shape[1]:
        raise ValueError(f"column scale of length {v.shape} against {a.value.shape}")
    val = a.value * v[None, :]

    def backward(g):
        a._accum(g * v[None, :])

    return _out(val, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.value.shape} @ {b.value.shape}")
    val = a.value @ b.value

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.value.T)
        if b.requires_grad:
            b._accum(a.value.T @ g)

    return _out(val, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(g.T)

    return _out(a.value.T, (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0

    def backward(g):
        a._accum(g * mask)

    return _out(np.where(mask, a.value, 0.0), (a,), backward)


def row_softmax(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        a._accum(y * (g - dot))

    return _out(y, (a,), backward)


def scale_rows_to_max(a: Tensor, t: float) -> Tensor:
    """Rescale each row so its maximum equals t.

    Rows whose maximum is <= 0 pass through unchanged. The scale factor
    t / max(row) is a function of the row max, so its gradient flows into
    the (first) argmax entry.
    """
    if t <= 0:
        raise ValueError(f"threshold must be positive, got {t}")
    m = a.value.max(axis=1, keepdims=True)
    argmax = a.value.argmax(axis=1)
    active = m[:, 0] > 0
    factor = np.where(active[:, None], t / np.where(m > 0, m, 1.0), 1.0)
    y = a.value * factor

    def backward(g):
        ga = g * factor
        # d(t/m)/dm = -t/m^2 lands on the row-max entry
        row_dot = np.sum(g * a.value, axis=1)
        rows = np.arange(a.value.shape[0])
        corr = np.where(active, -row_dot * t / np.where(m[:, 0] > 0, m[:, 0] ** 2, 1.0), 0.0)
        ga[rows, argmax] += corr
        a._accum(ga)

    return _out(y, (a,), backward)


def clamp_rows(a: Tensor, t: float) -> Tensor:
    """Elementwise min(value, t); clamped entries get zero gradient."""
    if t <= 0:
        raise ValueError(f"threshold must be positive, got {t}")
    passthrough = a.value <= t

    def backward(g):
        a._accum(g * passthrough)

    return _out(np.where(passthrough, a.value, t), (a,), backward)


def weighted_cross_entropy(logits: Tensor, targets, weights) -> Tensor:
    """Sum over rows of weight * (-log softmax(logits)[target]).

    `targets` are class indices (one per row), `weights` nonnegative reals.
    Scalars are accepted for single-row logits.
    """
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    weights = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    z = np.atleast_2d(logits.value)
    m, c = z.shape
    if targets.shape != (m,) or weights.shape != (m,):
        raise ValueError(f"targets/weights must have length {m}")
    if np.any(targets < 0) or np.any(targets >= c):
        raise IndexError(f"target index outside [0, {c})")
    if np.any(weights < 0):
        raise ValueError("negative cross-entropy weight")
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    e = np.exp(zs)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    rows = np.arange(m)
    # log-sum-exp form: never takes log of an underflowed probability
    losses = (zmax[:, 0] + np.log(denom[:, 0])) - z[rows, targets]
    val = np.sum(weights * losses)

    def backward(g):
        d = p * weights[:, None]
        d[rows, targets] -= weights
        d = d * g
        logits._accum(d.reshape(logits.value.shape))

    return _out(val, (logits,), backward)


def smooth_l1(pred: Tensor, target, row_weights=None) -> Tensor:
    """Huber loss summed over entries: 0.5 d^2 for |d| < 1, else |d| - 0.5.

    `row_weights` (optional, one per row) selects/weights rows; rows with
    weight 0 contribute nothing to value or gradient.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.value.shape:
        raise ValueError(f"shape mismatch {pred.value.shape} vs {target.shape}")
    d = pred.value - target
    small = np.abs(d) < 1.0
    per = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    if row_weights is None:
        w = np.ones(pred.value.shape[0] if pred.value.ndim > 1 else 1)
    else:
        w = np.asarray(row_weights, dtype=np.float64)
    if pred.value.ndim > 1:
        val = np.sum(w[:, None] * per)
    else:
        val = np.sum(w * per)

    def backward(g):
        dd = np.where(small, d, np.sign(d))
        if pred.value.ndim > 1:
            pred._accum(g * w[:, None] * dd)
        else:
            pred._accum(g * w * dd)

    return _out(val, (pred,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(np.full_like(a.value, g))

    return _out(a.value.sum(), (a,), backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of two matrices with equal row counts."""
    if a.value.shape[0] != b.value.shape[0]:
        raise ValueError(f"row mismatch {a.value.shape} vs {b.value.shape}")
    val = np.concatenate([a.value, b.value], axis=1)
    split = a.value.shape[1]

    def backward(g):
        if a.requires_grad:
            a._accum(g[:, :split])
        if b.requires_grad:
            b._accum(g[:, split:])

    return _out(val, (a, b), backward)


def gather_blocks(x: Tensor, block_index, block_size: int) -> Tensor:
    """Per-row block selection: out[i, k] = x[i, block_index[i] * block_size + k].

    Used for class-specific regression outputs, where row i's head emits one
    block of `block_size` values per class and only the assigned class's
    block is read.
    """
    block_index = np.asarray(block_index, dtype=np.int64)
    m, c = x.value.shape
    if block_index.shape != (m,):
        raise ValueError(f"block_index must have length {m}")
    n_blocks = c // block_size
    if c % block_size != 0 or np.any(block_index < 0) or np.any(block_index >= n_blocks):
        raise IndexError(f"block index outside [0, {n_blocks}) for width {c}")
    cols = block_index[:, None] * block_size + np.arange(block_size)[None, :]
    rows = np.arange(m)[:, None]
    val = x.value[rows, cols]

    def backward(g):
        gx = np.zeros_like(x.value)
        gx[rows, cols] = g
        x._accum(gx)

    return _out(val, (x,), backward)


def uniform_init(rng: np.random.Generator, rows: int, cols: int, fan_in: int | None = None) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]; fan_in defaults to rows."""
    bound = 1.0 / np.sqrt(fan_in if fan_in is not None else rows)
    return rng.uniform(-bound, bound, size=(rows, cols))


def finite_diff_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-4
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must rebuild its graph from the current parameter values on every
    call and return a scalar Tensor. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    zero_grads(params)
    out = f()
    out.backward()
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + epsilon
            f_plus = float(f().value)
            p.value[idx] = orig - epsilon
            f_minus = float(f().value)
            p.value[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = ga[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    zero_grads(params)
    return worst
