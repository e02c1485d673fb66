"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records every operation in execution order; ``backward`` walks the
record once in reverse, accumulating vector-Jacobian products per node.  Only
the operations required by the attention captioner, the co-attention
discriminator and their training losses are provided -- no convolutions, no
GPU, no mixed precision.  Accumulation order is fixed by tape order, so runs
are bit-reproducible.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the operation."""


class ParameterError(ValueError):
    """Invalid operation parameter (e.g. non-positive temperature)."""


class TapeError(RuntimeError):
    """Tape misuse: non-scalar backward root, double backward, tape mixing."""


class Node:
    __slots__ = ("value", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp  # callable(out_grad) -> tuple of parent grads


class Tensor:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def grad(self):
        g = self.tape.gradients[self.index]
        if g is None and self.tape._consumed:
            # node never reached from the root: derivative is zero
            return np.zeros_like(self.data)
        return g

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # operator sugar; full op set lives at module level
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.index})"


class Tape:
    """Ordered operation record plus per-node gradient accumulators.

    Single-threaded per tape; independent tapes may be used concurrently.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: list = []
        self._consumed = False

    def tensor(self, value) -> Tensor:
        """Record a leaf holding ``value`` (copied, cast to float64)."""
        arr = np.array(value, dtype=np.float64)
        return self._record(arr, (), None)

    def _record(self, value, parents, vjp) -> Tensor:
        self.nodes.append(Node(value, parents, vjp))
        self.gradients.append(None)
        return Tensor(self, len(self.nodes) - 1)

    def reset_grads(self):
        """Clear accumulators so backward may run again."""
        self.gradients = [None] * len(self.nodes)
        self._consumed = False


def _wrap(tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise TapeError("operands live on different tapes")
        return x
    return tape.tensor(x)


def _tape_of(*args):
    for a in args:
        if isinstance(a, Tensor):
            return a.tape
    raise TapeError("at least one operand must be a Tensor")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# core operations
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    av, bv = a.data, b.data
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {av.shape} @ {bv.shape}")
    out = av @ bv

    def vjp(g):
        return g @ bv.T, av.T @ g

    return tape._record(out, (a.index, b.index), vjp)


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    av, bv = a.data, b.data
    out = av + bv

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return tape._record(out, (a.index, b.index), vjp)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    av, bv = a.data, b.data
    out = av - bv

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return tape._record(out, (a.index, b.index), vjp)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    av, bv = a.data, b.data
    out = av * bv

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._record(out, (a.index, b.index), vjp)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a plain python scalar (not differentiated in ``s``)."""
    s = float(s)
    out = x.data * s

    def vjp(g):
        return (g * s,)

    return x.tape._record(out, (x.index,), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return x.tape._record(out, (x.index,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    v = x.data
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                   np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return x.tape._record(out, (x.index,), vjp)


def log(x: Tensor) -> Tensor:
    v = x.data
    if not np.all(v > 0):
        raise DomainError("log requires strictly positive input")
    out = np.log(v)

    def vjp(g):
        return (g / v,)

    return x.tape._record(out, (x.index,), vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return x.tape._record(out, (x.index,), vjp)


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature softmax over the last axis, max-subtracted for stability."""
    temperature = float(temperature)
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    v = x.data / temperature
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot) / temperature,)

    return x.tape._record(out, (x.index,), vjp)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    v = x.data
    _check_axis(v, axis)
    out = np.asarray(v.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, v.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), v.shape).copy(),)

    return x.tape._record(out, (x.index,), vjp)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    v = x.data
    _check_axis(v, axis)
    n = v.size if axis is None else v.shape[axis]
    out = np.asarray(v.mean(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, v.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, v.shape).copy(),)

    return x.tape._record(out, (x.index,), vjp)


def reduce_max(x: Tensor, axis=None) -> Tensor:
    """Max reduction; gradient routes to the argmax, ties broken toward the
    lowest index (np.argmax first-occurrence behaviour)."""
    v = x.data
    _check_axis(v, axis)
    out = np.asarray(v.max(axis=axis))
    if axis is None:
        flat_idx = int(np.argmax(v))

        def vjp(g):
            gx = np.zeros_like(v)
            gx.reshape(-1)[flat_idx] = np.asarray(g).reshape(-1)[0]
            return (gx,)
    else:
        arg = np.argmax(v, axis=axis)

        def vjp(g):
            gx = np.zeros_like(v)
            np.put_along_axis(gx, np.expand_dims(arg, axis),
                              np.expand_dims(np.asarray(g), axis), axis=axis)
            return (gx,)

    return x.tape._record(out, (x.index,), vjp)


def _check_axis(v, axis):
    if axis is not None and not (-v.ndim <= axis < v.ndim):
        raise ShapeError(f"axis {axis} invalid for shape {v.shape}")


# ---------------------------------------------------------------------------
# structural plumbing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    v = x.data
    out = v.reshape(shape)

    def vjp(g):
        return (g.reshape(v.shape),)

    return x.tape._record(out, (x.index,), vjp)


def transpose(x: Tensor) -> Tensor:
    out = x.data.T.copy()

    def vjp(g):
        return (g.T.copy(),)

    return x.tape._record(out, (x.index,), vjp)


def concat(tensors, axis=0) -> Tensor:
    tape = _tape_of(*tensors)
    tensors = [_wrap(tape, t) for t in tensors]
    vals = [t.data for t in tensors]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(vals)))

    return tape._record(out, tuple(t.index for t in tensors), vjp)


def get_row(x: Tensor, i: int) -> Tensor:
    """Row i of a rank-2 tensor as a 1 x n tensor (embedding lookup)."""
    v = x.data
    if v.ndim != 2 or not (0 <= i < v.shape[0]):
        raise ShapeError(f"row {i} invalid for shape {v.shape}")
    out = v[i : i + 1].copy()

    def vjp(g):
        gx = np.zeros_like(v)
        gx[i] = g[0]
        return (gx,)

    return x.tape._record(out, (x.index,), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along ``axis``."""
    v = x.data
    _check_axis(v, axis)
    idx = [slice(None)] * v.ndim
    idx[axis] = slice(start, start + length)
    out = v[tuple(idx)].copy()

    def vjp(g):
        gx = np.zeros_like(v)
        gx[tuple(idx)] = g
        return (gx,)

    return x.tape._record(out, (x.index,), vjp)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes where unclipped, zero where clipped."""
    v = x.data
    out = np.clip(v, lo, hi)
    mask = ((v > lo) & (v < hi)).astype(np.float64)

    def vjp(g):
        return (g * mask,)

    return x.tape._record(out, (x.index,), vjp)


def st_onehot(x: Tensor) -> Tensor:
    """One-hot of argmax over the last axis; backward is the identity
    (straight-through), ties broken toward the lowest index."""
    v = x.data
    arg = np.argmax(v, axis=-1)
    out = np.zeros_like(v)
    np.put_along_axis(out, np.expand_dims(arg, -1), 1.0, axis=-1)

    def vjp(g):
        return (g.copy(),)

    return x.tape._record(out, (x.index,), vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(tape: Tape, root: Tensor):
    """Accumulate d(root)/d(node) for every node at or before ``root``.

    Root must be scalar (size 1).  A second backward on the same tape without
    ``reset_grads`` is an error: accumulators would double-count.
    """
    if root.tape is not tape:
        raise TapeError("root does not belong to this tape")
    if root.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.data.shape}")
    if tape._consumed:
        raise TapeError("backward already ran on this tape; call reset_grads first")
    tape._consumed = True

    grads = tape.gradients
    grads[root.index] = np.ones_like(root.data)
    for i in range(root.index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            # accumulation always builds a fresh array, so aliasing pg is safe
            grads[p] = pg if grads[p] is None else grads[p] + pg
