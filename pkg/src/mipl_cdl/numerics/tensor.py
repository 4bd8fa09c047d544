"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to parent gradients.  Calling
:meth:`Tensor.backward` on a scalar walks that record in reverse
topological order and accumulates into :class:`Parameter` leaves.

Bags of different sizes are handled with segment operations
(``segment_sum``, ``segment_softmax``) over a flat instance axis instead of
padding.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from mipl_cdl.errors import ConfigurationError, NumericalError, UsageError

LOG_FLOOR = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by '{op}'", op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the record needed to differentiate through it."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "_consumed")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self._consumed = False

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward_fn, op):
        _check_finite(data, op)
        if not _grad_enabled or not any(p.tracks_grad for p in parents):
            return Tensor(data, op=op)
        return Tensor(data, parents, backward_fn, op)

    @property
    def tracks_grad(self) -> bool:
        return bool(self.parents)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- backward -------------------------------------------------------------
    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(param) into every reachable Parameter."""
        if not self.tracks_grad:
            raise UsageError("backward() called on a tensor with no recorded forward computation")
        if self._consumed:
            raise UsageError("backward() already replayed on this record; run a new forward pass")
        if seed is None:
            if self.data.size != 1:
                raise UsageError("seed gradient required for non-scalar output")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.data.shape:
            raise ConfigurationError(f"seed gradient shape {seed.shape} != output shape {self.data.shape}")

        order = _topological_order(self)
        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad += g
                continue
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not (parent.tracks_grad or isinstance(parent, Parameter)):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._consumed = True


class Parameter(Tensor):
    """A trainable leaf: value, gradient accumulator and momentum buffer."""

    __slots__ = ("name", "velocity")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True), op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)

    @property
    def tracks_grad(self) -> bool:
        return True

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# -- elementwise binary ops --------------------------------------------------

def _binary(a, b, op: str, fwd: Callable, grad_a: Callable, grad_b: Callable) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ConfigurationError(f"dimension mismatch in '{op}': {a.shape} vs {b.shape}") from exc

    def backward(g):
        return (_unbroadcast(grad_a(g, a.data, b.data, out), a.shape),
                _unbroadcast(grad_b(g, a.data, b.data, out), b.shape))

    return Tensor._make(out, (a, b), backward, op)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(
        a, b, "div", np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * o / y,
    )


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant real exponent; exponent 0 yields constant ones."""
    a = tensor(a)
    exponent = float(exponent)
    if exponent == 0.0:
        return Tensor(np.ones_like(a.data), op="pow")
    out = np.power(a.data, exponent)

    def backward(g):
        if exponent == 1.0:
            return (g,)
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return Tensor._make(out, (a,), backward, "pow")


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"dimension mismatch in 'matmul': {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` (matrix-vector product with bias)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- elementwise unary ops ---------------------------------------------------

def _unary(a, op: str, fwd: Callable, dfn: Callable) -> Tensor:
    a = tensor(a)
    out = fwd(a.data)

    def backward(g):
        return (g * dfn(a.data, out),)

    return Tensor._make(out, (a,), backward, op)


def tanh(a) -> Tensor:
    return _unary(a, "tanh", np.tanh, lambda x, o: 1.0 - o * o)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    return _unary(a, "sigmoid", _sigmoid, lambda x, o: o * (1.0 - o))


def relu(a) -> Tensor:
    return _unary(a, "relu", lambda x: np.maximum(x, 0.0), lambda x, o: (x > 0).astype(np.float64))


def exp(a) -> Tensor:
    return _unary(a, "exp", np.exp, lambda x, o: o)


def sqrt(a) -> Tensor:
    return _unary(a, "sqrt", np.sqrt, lambda x, o: 0.5 / o)


def log(a, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument clamped below at ``floor``."""
    a = tensor(a)
    clipped = np.maximum(a.data, floor)
    out = np.log(clipped)

    def backward(g):
        return (np.where(a.data >= floor, g / clipped, 0.0),)

    return Tensor._make(out, (a,), backward, "log")


# -- reductions / indexing ---------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def weighted_sum(weights, values) -> Tensor:
    """``sum_j weights[j] * values[j]`` over the leading axis."""
    weights, values = tensor(weights), tensor(values)
    if weights.shape[0] != values.shape[0]:
        raise ConfigurationError(f"weighted_sum length mismatch: {weights.shape[0]} vs {values.shape[0]}")
    if values.ndim == 2:
        return matmul(_reshape(weights, (1, -1)), values)[0]
    return tsum(mul(weights, values))


def _reshape(a, shape) -> Tensor:
    a = tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._make(out, (a,), backward, "reshape")


reshape = _reshape


def index_select(a, index) -> Tensor:
    """Differentiable ``a[index]`` for any numpy index (gather)."""
    a = tensor(a)
    out = np.array(a.data[index], dtype=np.float64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(out, (a,), backward, "index")


def take_rows(a, rows: np.ndarray) -> Tensor:
    """Gather along axis 0; used to broadcast per-bag values to instances."""
    return index_select(a, np.asarray(rows, dtype=np.intp))


def pick(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Select ``a[rows[i], cols[i]]``; the selector gradient flows to the chosen slot."""
    return index_select(a, (np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp)))


def segment_sum(a, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id."""
    a = tensor(a)
    segments = np.asarray(segments, dtype=np.intp)
    if segments.shape[0] != a.shape[0]:
        raise ConfigurationError(f"segment ids length {segments.shape[0]} != rows {a.shape[0]}")
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, segments, a.data)

    def backward(g):
        return (g[segments],)

    return Tensor._make(out, (a,), backward, "segment_sum")


# -- softmax family --------------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    if a.data.size == 0 or a.shape[axis] < 1:
        raise ConfigurationError("softmax needs at least one element")
    out = _softmax_np(a.data, axis)

    def backward(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._make(out, (a,), backward, "softmax")


def segment_softmax(a, segments: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of a 1-D score vector computed independently within each segment."""
    a = tensor(a)
    segments = np.asarray(segments, dtype=np.intp)
    if a.ndim != 1 or segments.shape[0] != a.shape[0]:
        raise ConfigurationError("segment_softmax expects a 1-D input aligned with segment ids")
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segments, a.data)
    e = np.exp(a.data - seg_max[segments])
    denom = np.zeros(num_segments)
    np.add.at(denom, segments, e)
    out = e / denom[segments]

    def backward(g):
        inner = np.zeros(num_segments)
        np.add.at(inner, segments, g * out)
        return (out * (g - inner[segments]),)

    return Tensor._make(out, (a,), backward, "segment_softmax")


# -- non-differentiable selectors --------------------------------------------

def argmax(values, axis: int = -1, mask=None) -> np.ndarray:
    """Index of the maximum with lowest-index tie-breaking; masked-out slots are skipped."""
    data = _as_array(values)
    if mask is not None:
        data = np.where(mask, data, -np.inf)
    return np.argmax(data, axis=axis)


def max_value(values, axis: int = -1, mask=None) -> Tensor:
    """Row-wise maximum of a 2-D tensor, differentiable through the selected slot."""
    values = tensor(values)
    cols = argmax(values, axis=axis, mask=mask)
    rows = np.arange(values.shape[0])
    return pick(values, rows, cols)
