"""Reverse-mode differentiation on numpy arrays.

A :class:`Tape` records primitive operations in execution order, so parents
always precede the values computed from them. :func:`backward` replays that
record once in reverse, accumulating adjoints into ``Variable.grad``. All
values are float64; serialized artifacts alone use single precision.

Variables created without a tape act as constants: they flow forward but
receive no gradient. :func:`stop_gradient` turns any value into such a
constant, which is how non-differentiable choices (e.g. a discrete argmax
feeding a kernel center) are kept out of the backward pass.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Variable",
    "backward",
    "stop_gradient",
    "lift",
    "value_of",
    "add", "sub", "mul", "div", "neg",
    "exp", "sqrt", "square", "relu", "absolute", "maximum",
    "summation", "matmul", "reshape", "transpose",
    "gather", "getitem", "pad_zeros", "stack",
]


class Variable:
    """An array value, its gradient buffer, and the tape it was recorded on."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape: "Tape | None" = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        kind = "const" if self.tape is None else "var"
        return f"Variable({kind}, shape={self.value.shape})"

    # arithmetic sugar; the module-level functions do the real work
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations for one differentiation pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._vars: list[Variable] = []

    def variable(self, value) -> Variable:
        """Create a tracked leaf; its .grad is populated by backward()."""
        v = Variable(value, self)
        self._vars.append(v)
        return v

    def _record(self, out: Variable, parents, backward_fn) -> None:
        self._nodes.append(_Node(out, parents, backward_fn))
        self._vars.append(out)

    def __len__(self):
        return len(self._nodes)


def value_of(x) -> np.ndarray:
    """Raw ndarray behind a Variable, or the input coerced to float64."""
    if isinstance(x, Variable):
        return x.value
    return np.asarray(x, dtype=np.float64)


def lift(x) -> Variable:
    """Wrap plain values as constant Variables; pass Variables through."""
    return x if isinstance(x, Variable) else Variable(x)


def stop_gradient(x) -> Variable:
    """Detach a value: it keeps flowing forward, gradient through it is zero."""
    return Variable(value_of(x).copy())


def _tape_of(*parents) -> Tape | None:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif tape is not p.tape:
                raise ValueError("operands were recorded on different tapes")
    return tape


def _make(value, parents, backward_fn) -> Variable:
    tape = _tape_of(*parents)
    out = Variable(value, tape)
    if tape is not None:
        tape._record(out, parents, backward_fn)
    return out


def backward(loss: Variable) -> None:
    """Accumulate d(loss)/d(v) into v.grad for every Variable on loss's tape.

    Gradient buffers are reset on every invocation, so repeated calls over
    the same tape are deterministic and independent. Adjoints allocate
    lazily: a variable's first contribution may alias the producing array,
    and the second switches to an owned buffer before any in-place update,
    so aliases are never mutated.
    """
    if not isinstance(loss, Variable) or loss.tape is None:
        raise ValueError("backward requires a value recorded on an active tape")
    if loss.value.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    tape = loss.tape
    for v in tape._vars:
        v.grad = None
    loss.grad = np.ones_like(loss.value)
    owned = {id(loss)}
    for node in reversed(tape._nodes):
        adj = node.out.grad
        if adj is None:
            continue
        contribs = node.backward_fn(adj)
        for parent, contrib in zip(node.parents, contribs):
            if contrib is None or parent.tape is None:
                continue
            if parent.grad is None:
                parent.grad = contrib
            elif id(parent) in owned:
                parent.grad += contrib
            else:
                parent.grad = parent.grad + contrib
                owned.add(id(parent))
    for v in tape._vars:
        if v.grad is None:
            v.grad = np.zeros_like(v.value)


def _unbroadcast(adj: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint back down to the shape it was broadcast from."""
    if adj.shape == shape:
        return adj
    extra = adj.ndim - len(shape)
    if extra > 0:
        adj = adj.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and adj.shape[i] != 1)
    if keep:
        adj = adj.sum(axis=keep, keepdims=True)
    return adj.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Variable:
    a, b = lift(a), lift(b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda adj: (_unbroadcast(adj, a.value.shape), _unbroadcast(adj, b.value.shape)),
    )


def sub(a, b) -> Variable:
    a, b = lift(a), lift(b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda adj: (_unbroadcast(adj, a.value.shape), _unbroadcast(-adj, b.value.shape)),
    )


def mul(a, b) -> Variable:
    a, b = lift(a), lift(b)
    return _make(
        a.value * b.value,
        (a, b),
        lambda adj: (
            _unbroadcast(adj * b.value, a.value.shape),
            _unbroadcast(adj * a.value, b.value.shape),
        ),
    )


def div(a, b) -> Variable:
    a, b = lift(a), lift(b)
    return _make(
        a.value / b.value,
        (a, b),
        lambda adj: (
            _unbroadcast(adj / b.value, a.value.shape),
            _unbroadcast(-adj * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def neg(a) -> Variable:
    a = lift(a)
    return _make(-a.value, (a,), lambda adj: (-adj,))


def exp(a) -> Variable:
    a = lift(a)
    out_value = np.exp(a.value)
    return _make(out_value, (a,), lambda adj: (adj * out_value,))


def sqrt(a) -> Variable:
    a = lift(a)
    out_value = np.sqrt(a.value)
    return _make(out_value, (a,), lambda adj: (adj * 0.5 / out_value,))


def square(a) -> Variable:
    a = lift(a)
    return _make(a.value * a.value, (a,), lambda adj: (adj * 2.0 * a.value,))


def relu(a) -> Variable:
    # subgradient 1 at exactly 0: a residual branch initialized to the
    # identity (pre-rectifier values all zero) must still receive gradient
    a = lift(a)
    return _make(np.maximum(a.value, 0.0), (a,), lambda adj: (adj * (a.value >= 0.0),))


def absolute(a) -> Variable:
    # subgradient at 0 is 0 (sign(0) = 0)
    a = lift(a)
    return _make(np.abs(a.value), (a,), lambda adj: (adj * np.sign(a.value),))


def maximum(a, b) -> Variable:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = lift(a), lift(b)
    take_a = a.value >= b.value
    return _make(
        np.maximum(a.value, b.value),
        (a, b),
        lambda adj: (
            _unbroadcast(adj * take_a, a.value.shape),
            _unbroadcast(adj * ~take_a, b.value.shape),
        ),
    )


# ---------------------------------------------------------------------------
# reductions and linear algebra


def summation(a, axis=None, keepdims: bool = False) -> Variable:
    a = lift(a)
    out_value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward_fn(adj):
        if axis is None:
            return (np.broadcast_to(adj, a.value.shape).copy(),)
        g = adj
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.value.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return _make(out_value, (a,), backward_fn)


def matmul(a, b) -> Variable:
    a, b = lift(a), lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return _make(
        a.value @ b.value,
        (a, b),
        lambda adj: (adj @ b.value.T, a.value.T @ adj),
    )


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Variable:
    a = lift(a)
    return _make(a.value.reshape(shape), (a,), lambda adj: (adj.reshape(a.value.shape),))


def transpose(a, axes) -> Variable:
    a = lift(a)
    inverse = tuple(np.argsort(axes))
    return _make(a.value.transpose(axes), (a,), lambda adj: (adj.transpose(inverse),))


def gather(a, indices) -> Variable:
    """Advanced indexing with constant integer index arrays.

    The backward pass scatter-adds the adjoint, so repeated indices
    accumulate correctly.
    """
    a = lift(a)

    def backward_fn(adj):
        g = np.zeros_like(a.value)
        np.add.at(g, indices, adj)
        return (g,)

    return _make(a.value[indices], (a,), backward_fn)


def getitem(a, key) -> Variable:
    """Basic slicing; the backward pass writes the adjoint into the slice."""
    a = lift(a)

    def backward_fn(adj):
        g = np.zeros_like(a.value)
        g[key] = adj
        return (g,)

    return _make(a.value[key], (a,), backward_fn)


def pad_zeros(a, pad_width) -> Variable:
    a = lift(a)
    unpad = tuple(slice(lo, lo + n) for (lo, _hi), n in zip(pad_width, a.value.shape))
    return _make(np.pad(a.value, pad_width), (a,), lambda adj: (adj[unpad],))


def stack(parts, axis: int = -1) -> Variable:
    parts = [lift(p) for p in parts]
    out_value = np.stack([p.value for p in parts], axis=axis)

    def backward_fn(adj):
        slabs = np.moveaxis(adj, axis, 0)
        return tuple(slabs[i] for i in range(len(parts)))

    return _make(out_value, tuple(parts), backward_fn)
