"""A small tape-based reverse-mode autodiff kernel over 2-D float64 arrays.

Every value is a :class:`Tensor2` holding a 2-D array. Leaves created with
:meth:`Tape.param` are differentiable; anything else is a constant. An op
whose inputs include a differentiable tensor appends its output to that
tensor's tape, so the tape's node list is always in topological order and
:func:`backward` just walks it in reverse.

Example::

    tape = Tape()
    w = tape.param("w", np.ones((3, 1)))
    loss = ad.sum(ad.matmul(x, w))
    grads = ad.backward(tape, loss)     # {"w": ...}
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor2",
    "Tape",
    "backward",
    "grad_check",
    "const",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "sigmoid",
    "clip",
    "rowsoftmax",
    "logsumexp",
    "transpose",
    "concat_cols",
    "split_cols",
    "cols",
    "take_rows",
    "mask_rows",
    "sum",
    "mean",
    "pairwise_sqdist",
]


class Tensor2:
    __slots__ = ("value", "tape", "name", "parents", "backward_fn")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = value
        self.tape = tape
        self.name = name
        self.parents: tuple = ()
        self.backward_fn = None

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ValueError(f"item() needs a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor2(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor2] = []
        self.params: dict[str, Tensor2] = {}

    def param(self, name: str, value) -> Tensor2:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor2(_as2d(value), self, name)
        self.params[name] = t
        self.nodes.append(t)
        return t

    def __len__(self):
        return len(self.nodes)


def _as2d(value) -> np.ndarray:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ValueError(f"Tensor2 holds 2-D values, got ndim={a.ndim}")
    return a


def const(value) -> Tensor2:
    return value if isinstance(value, Tensor2) else Tensor2(_as2d(value))


def _node(value: np.ndarray, parents: Sequence[Tensor2], backward_fn) -> Tensor2:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ValueError("inputs belong to different tapes")
            tape = p.tape
    out = Tensor2(value, tape)
    if tape is not None:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --- primitives -------------------------------------------------------------


def matmul(a, b) -> Tensor2:
    a, b = const(a), const(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Tensor2:
    a, b = const(a), const(b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor2:
    a, b = const(a), const(b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor2:
    """Elementwise product (with row/column broadcasting)."""
    a, b = const(a), const(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _node(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b) -> Tensor2:
    a, b = const(a), const(b)
    _check_broadcast(a.value, b.value, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _node(
        out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    )


def scale(a, c: float) -> Tensor2:
    a = const(a)
    c = float(c)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor2:
    return scale(a, -1.0)


def exp(a) -> Tensor2:
    a = const(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor2:
    a = const(a)
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor2:
    """Square root; the derivative at 0 is taken as 0 (subgradient)."""
    a = const(a)
    out = np.sqrt(a.value)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _node(out, (a,), bw)


def relu(a) -> Tensor2:
    a = const(a)
    pos = a.value > 0
    # np.maximum propagates NaN, so a poisoned input still surfaces in the loss
    return _node(np.maximum(a.value, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor2:
    a = const(a)
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Tensor2:
    a = const(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def rowsoftmax(a) -> Tensor2:
    a = const(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _node(y, (a,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def logsumexp(a, axis: int) -> Tensor2:
    """Stable log-sum-exp along ``axis`` (1: per row -> (r,1); 0: per column -> (1,c))."""
    a = const(a)
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    return _node(out, (a,), lambda g: (g * (e / s),))


def transpose(a) -> Tensor2:
    a = const(a)
    return _node(a.value.T.copy(), (a,), lambda g: (g.T,))


def cols(a, start: int, stop: int) -> Tensor2:
    a = const(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _node(a.value[:, start:stop].copy(), (a,), bw)


def split_cols(a, n: int) -> list[Tensor2]:
    """Split into ``n`` equal column blocks."""
    a = const(a)
    width, rem = divmod(a.shape[1], n)
    if rem:
        raise ValueError(f"split_cols: {a.shape[1]} columns do not split into {n} blocks")
    return [cols(a, k * width, (k + 1) * width) for k in range(n)]


def concat_cols(parts: Sequence) -> Tensor2:
    parts = [const(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ValueError(f"concat_cols: row counts differ {sorted(rows)}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])
    return _node(
        np.concatenate([p.value for p in parts], axis=1),
        parts,
        lambda g: tuple(g[:, edges[k] : edges[k + 1]] for k in range(len(parts))),
    )


def take_rows(a, idx) -> Tensor2:
    a = const(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.value[idx], (a,), bw)


def mask_rows(a, mask) -> Tensor2:
    """Zero out rows where ``mask`` is false."""
    a = const(a)
    m = np.asarray(mask, dtype=bool).reshape(-1, 1)
    if m.shape[0] != a.shape[0]:
        raise ValueError(f"mask_rows: mask length {m.shape[0]} != rows {a.shape[0]}")
    return _node(np.where(m, a.value, 0.0), (a,), lambda g: (np.where(m, g, 0.0),))


def sum(a, axis: int | None = None) -> Tensor2:  # noqa: A001
    a = const(a)
    shape = a.shape
    if axis is None:
        return _node(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))
    return _node(a.value.sum(axis=axis, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor2:
    a = const(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def pairwise_sqdist(x, y) -> Tensor2:
    """``out[i, j] = ||x_i - y_j||^2`` computed from explicit differences."""
    x, y = const(x), const(y)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"pairwise_sqdist: dims {x.shape[1]} and {y.shape[1]} differ")
    diff = x.value[:, None, :] - y.value[None, :, :]

    def bw(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return _node(np.einsum("ijk,ijk->ij", diff, diff), (x, y), bw)


# --- reverse pass -----------------------------------------------------------


def backward(tape: Tape, loss: Tensor2) -> dict[str, np.ndarray]:
    """Gradients of a 1x1 ``loss`` for every parameter on ``tape``.

    Parameters that do not reach the loss get zero gradients. The tape is
    not modified, so the pass can be replayed.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.tape is tape:
        grads[id(loss)] = np.ones((1, 1))
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None) if node.backward_fn is not None else None
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if parent.tape is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64)
    elif loss.tape is not None:
        raise ValueError("loss was recorded on a different tape")
    return {
        name: grads.get(id(t), np.zeros(t.shape)).reshape(t.shape) for name, t in tape.params.items()
    }


def grad_check(
    f: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    h: float = 1e-6,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error of ``analytic`` against central differences of ``f``.

    ``f`` maps a dict of arrays to a float and is evaluated at ``params``
    with one entry shifted by ``+-h`` at a time. The error of one entry is
    ``|a - fd| / max(1, |a|, |fd|)``.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    worst = 0.0
    for name in names if names is not None else work:
        arr = work[name]
        flat = arr.reshape(-1)
        ag = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = f(work)
            flat[k] = orig - h
            down = f(work)
            flat[k] = orig
            fd = (up - down) / (2.0 * h)
            err = abs(ag[k] - fd) / max(1.0, abs(ag[k]), abs(fd))
            worst = max(worst, err)
    return worst
