"""Dense float tensors with tape-based reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array (float32 or float64). Every differentiable
operation records its inputs and a backward closure on the result; calling
`backward()` on a scalar loss builds the tape (a topological ordering of the
recorded nodes), then visits each node exactly once in reverse, accumulating
gradients into `.grad` of every tensor that requires them.

Only the primitives the model family needs are provided: broadcasting
elementwise arithmetic, (batched) matmul, reshapes/transposes, gathers and
scatter-adds, reductions, the activation set, row softmax / log-softmax, and
layer norm. No general broadcasting rules beyond numpy's, no views, no in-place
autodiff ops.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf as _erf

from .errors import ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional dense float array, optionally part of the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents, backward_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # -- backward -------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar. Populates `.grad` on reachable tensors."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        tape = []
        visited = set()
        stack = [(self, False)]
        while stack:  # iterative DFS; model graphs exceed the recursion limit
            node, expanded = stack.pop()
            if expanded:
                tape.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def transpose_last2(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def gather_rows(self, idx):
        return gather_rows(self, idx)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _sum_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's original shape."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype) if not isinstance(b, Tensor) else b
    data = a.data + b.data

    def backward(g):
        _accum(a, _sum_to_shape(g, a.data.shape))
        _accum(b, _sum_to_shape(g, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype) if not isinstance(b, Tensor) else b
    data = a.data * b.data

    def backward(g):
        _accum(a, _sum_to_shape(g * b.data, a.data.shape))
        _accum(b, _sum_to_shape(g * a.data, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype) if not isinstance(b, Tensor) else b
    data = a.data / b.data

    def backward(g):
        _accum(a, _sum_to_shape(g / b.data, a.data.shape))
        _accum(b, _sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return Tensor._result(-a.data, (a,), backward)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data ** exponent

    def backward(g):
        _accum(a, g * exponent * a.data ** (exponent - 1))

    return Tensor._result(data, (a,), backward)


def _small_exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Accumulate rank-1 terms in index order so tiny f64 products are
    # reproducible against naive reference evaluation (BLAS kernels are not).
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires tensors with at least 2 dims")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    if (
        a.ndim == 2
        and b.ndim == 2
        and a.dtype == np.float64
        and b.dtype == np.float64
        and max(a.data.shape + b.data.shape) <= 8
    ):
        data = _small_exact_matmul(a.data, b.data)
    else:
        data = a.data @ b.data

    def backward(g):
        _accum(a, _sum_to_shape(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _accum(b, _sum_to_shape(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return Tensor._result(data, (a, b), backward)


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old_shape = a.data.shape
    data = np.reshape(a.data, shape)

    def backward(g):
        _accum(a, g.reshape(old_shape))

    return Tensor._result(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return Tensor._result(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return Tensor._result(data, tuple(tensors), backward)


# -- gathers / scatters -------------------------------------------------------

def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows (axis 0) by an integer index array of any shape."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return Tensor._result(data, (a,), backward)


def scatter_rows(values: Tensor, idx, num_rows: int) -> Tensor:
    """Scatter-add `values` (q, ...) into a zero tensor of `num_rows` rows."""
    values = _as_tensor(values)
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.shape[0] != values.data.shape[0]:
        raise ShapeError("scatter_rows needs one target row index per value row")
    data = np.zeros((num_rows,) + values.data.shape[1:], dtype=values.dtype)
    np.add.at(data, idx, values.data)

    def backward(g):
        _accum(values, g[idx])

    return Tensor._result(data, (values,), backward)


def take_along_last(a: Tensor, idx) -> Tensor:
    """Gather along the last axis, numpy take_along_axis semantics."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    data = np.take_along_axis(a.data, idx, axis=-1)

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            flat_g = a.grad.reshape(-1, a.data.shape[-1])
            rows = np.arange(flat_g.shape[0])[:, None]
            np.add.at(flat_g, (rows, idx.reshape(flat_g.shape[0], -1)), g.reshape(flat_g.shape[0], -1))

    return Tensor._result(data, (a,), backward)


def scatter_along_last(values: Tensor, idx, width: int) -> Tensor:
    """Place `values` at column positions `idx` in a zero tensor of last dim `width`."""
    values = _as_tensor(values)
    idx = np.asarray(idx)
    if idx.shape != values.data.shape:
        raise ShapeError("scatter_along_last needs one column index per value")
    out_shape = values.data.shape[:-1] + (width,)
    data = np.zeros(out_shape, dtype=values.dtype)
    flat = data.reshape(-1, width)
    rows = np.arange(flat.shape[0])[:, None]
    np.add.at(flat, (rows, idx.reshape(flat.shape[0], -1)), values.data.reshape(flat.shape[0], -1))

    def backward(g):
        _accum(values, np.take_along_axis(g, idx, axis=-1))

    return Tensor._result(data, (values,), backward)


# -- reductions ---------------------------------------------------------------

def _unreduce(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        _accum(a, _unreduce(g, a.data.shape, axis, keepdims))

    return Tensor._result(np.asarray(data), (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)

    def backward(g):
        _accum(a, _unreduce(g / count, a.data.shape, axis, keepdims))

    return Tensor._result(np.asarray(data), (a,), backward)


# -- elementwise functions ----------------------------------------------------

def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return Tensor._result(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return Tensor._result(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / data)

    return Tensor._result(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = _sigmoid_stable(a.data)

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return Tensor._result(data, (a,), backward)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    s = _sigmoid_stable(a.data)
    data = a.data * s

    def backward(g):
        _accum(a, g * (s + a.data * s * (1.0 - s)))

    return Tensor._result(data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) in the overflow-safe form max(x, 0) + log1p(exp(-|x|))."""
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward(g):
        _accum(a, g * _sigmoid_stable(a.data))

    return Tensor._result(data, (a,), backward)


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal CDF, erf-based; gradient is the exact normal pdf."""
    a = _as_tensor(a)
    data = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    data = data.astype(a.dtype, copy=False)

    def backward(g):
        _accum(a, g * np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI)

    return Tensor._result(data, (a,), backward)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    a = _as_tensor(a)
    mask = a.data >= lo
    data = np.where(mask, a.data, np.asarray(lo, dtype=a.dtype))

    def backward(g):
        _accum(a, g * mask)

    return Tensor._result(data, (a,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: scale survivors by 1/(1-p) at train time, identity at eval."""
    if not train or p <= 0.0:
        return a
    a = _as_tensor(a)
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, Tensor(keep))


# -- normalization / softmax --------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise (last axis) softmax, stabilized by max subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(a, data * (g - (g * data).sum(axis=-1, keepdims=True)))

    return Tensor._result(data, (a,), backward)


def log_softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        _accum(a, g - np.exp(data) * g.sum(axis=-1, keepdims=True))

    return Tensor._result(data, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dim to zero mean / unit variance, then scale and shift."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def backward(g):
        m = x.data.shape[-1]
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, m).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, m).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * term)

    return Tensor._result(data, (x, gamma, beta), backward)


# -- training-loop helpers ----------------------------------------------------

def collect_grads(loss: Tensor, params) -> None:
    """Backward from `loss`, then zero-fill grads of params the loss never reached."""
    loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
