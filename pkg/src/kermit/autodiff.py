"""A small reverse-mode tensor engine over float64 numpy arrays.

Just enough surface for the scorer: broadcast arithmetic, (batched)
matmul, gathers with scatter-add adjoints, fused layer norm, erf-based
gelu, stable softmax / log-softmax, and sum. Graphs are built eagerly;
``backward`` walks a topological order once and accumulates into
``.grad``. Everything stays in float64, so gradients match central
differences to near machine precision.
"""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

Array = np.ndarray


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_bw", "_grad_owned")

    def __init__(
        self,
        data: Array | float,
        parents: tuple["Tensor", ...] = (),
        bw: Callable[[Array], None] | None = None,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self._parents = parents
        self._bw = bw
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _acc(self, g: Array) -> None:
        # First contribution is kept by reference (callers hand over
        # correctly-shaped arrays they do not reuse); a second one forces
        # an out-of-place add so aliased buffers are never mutated.
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g: Array) -> None:
        a._acc(_unbroadcast(g, a.shape))
        b._acc(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), bw)


def add_const(a: Tensor, c: Array | float) -> Tensor:
    def bw(g: Array) -> None:
        a._acc(_unbroadcast(g, a.shape))

    return Tensor(a.data + c, (a,), bw)


def mul_const(a: Tensor, c: Array | float) -> Tensor:
    def bw(g: Array) -> None:
        a._acc(_unbroadcast(g * c, a.shape))

    return Tensor(a.data * c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules on leading axes."""

    def bw(g: Array) -> None:
        a._acc(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._acc(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor(a.data @ b.data, (a, b), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g: Array) -> None:
        a._acc(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bw(g: Array) -> None:
        a._acc(g.transpose(inverse))

    return Tensor(a.data.transpose(axes), (a,), bw)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p._acc(g[tuple(idx)])

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def _owned_grad(t: Tensor) -> Array:
    """Grad buffer that is safe to mutate in place."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    elif not t._grad_owned:
        t.grad = t.grad.copy()
    t._grad_owned = True
    return t.grad


def embedding(table: Tensor, ids: Array) -> Tensor:
    """Row gather ``table[ids]``; adjoint scatter-adds rows."""

    def bw(g: Array) -> None:
        np.add.at(_owned_grad(table), ids, g)

    return Tensor(table.data[ids], (table,), bw)


def gather_time(h: Tensor, idx: Array) -> Tensor:
    """Pick per-batch time steps: ``h[b, idx[b, s]]`` for h of shape (B, T, D)."""
    rows = np.arange(h.shape[0])[:, None]

    def bw(g: Array) -> None:
        np.add.at(_owned_grad(h), (rows, idx), g)

    return Tensor(h.data[rows, idx], (h,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bw(g: Array) -> None:
        gain._acc(_unbroadcast(g * xhat, gain.shape))
        bias._acc(_unbroadcast(g, bias.shape))
        gx = g * gain.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        x._acc(inv * (gx - m1 - xhat * m2))

    return Tensor(xhat * gain.data + bias.data, (x, gain, bias), bw)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact erf form; smooth, so finite differences stay clean."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bw(g: Array) -> None:
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        x._acc(g * (phi + x.data * pdf))

    return Tensor(x.data * phi, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g: Array) -> None:
        x._acc(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return Tensor(s, (x,), bw)


def scaled_masked_softmax(x: Tensor, scale: float, mask: Array) -> Tensor:
    """``softmax(x * scale + mask)`` over the last axis with a constant
    additive mask; one node instead of three for the attention core."""
    z = x.data * scale + mask
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g: Array) -> None:
        x._acc(s * (g - (g * s).sum(axis=-1, keepdims=True)) * scale)

    return Tensor(s, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g: Array) -> None:
        x._acc(g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    return Tensor(ls, (x,), bw)


def tsum(x: Tensor) -> Tensor:
    def bw(g: Array) -> None:
        x._acc(np.broadcast_to(g, x.shape).copy())

    return Tensor(x.data.sum(), (x,), bw)


def weighted_sum(x: Tensor, w: Array) -> Tensor:
    """Scalar ``sum(x * w)`` for a constant weight array."""

    def bw(g: Array) -> None:
        x._acc(g * w)

    return Tensor((x.data * w).sum(), (x,), bw)


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar ``root`` into every ancestor."""
    if root.data.shape != ():
        raise ValueError("backward expects a scalar root")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._bw is not None and node.grad is not None:
            node._bw(node.grad)


def finite_difference(
    f: Callable[[], float],
    arrays: Iterable[tuple[Array, tuple[int, ...]]],
    h: float = 1e-5,
) -> list[float]:
    """Central differences of ``f`` w.r.t. the given (array, index) coordinates."""
    out = []
    for arr, idx in arrays:
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        out.append((fp - fm) / (2.0 * h))
    return out
