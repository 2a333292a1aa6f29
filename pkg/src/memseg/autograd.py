"""Dense float64 tensors with reverse-mode differentiation.

The computation graph lives on the tensors themselves: every op output
keeps references to its parent tensors plus a closure that maps the
output gradient back to parent gradients. ``backward`` walks the graph
once in reverse topological order and returns a gradient table for the
tracked leaves. Node ids increase with creation order, so every node's
inputs precede it; that ordering doubles as the topological order.

Tensors are immutable after creation (the optimizer is the one sanctioned
exception and requires exclusive access). Graphs built on different
threads share no mutable state.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import CheckInvalidError, ContractError, DomainError, ShapeError

_ids = itertools.count()
_tls = threading.local()


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the enclosed forward passes."""
    prev = _grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


class Tensor:
    """A dense float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, recording the edge only when a tracked input feeds it."""
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast during the forward."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    data = a.data / b.data

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(data, (a, b), backward_fn)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log of a non-positive value")
    data = np.log(x.data)

    def backward_fn(g):
        return (g / x.data,)

    return _record(data, (x,), backward_fn)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def backward_fn(g):
        return (g * data,)

    return _record(data, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0.0
    trace = getattr(_tls, "sign_trace", None)
    if trace is not None:
        trace.append(pos)
    # maximum, not where(pos, ...): NaN must propagate, not flush to zero,
    # or diverged training would sail past the non-finite loss guard
    data = np.maximum(x.data, 0.0)

    def backward_fn(g):
        return (g * pos,)

    return _record(data, (x,), backward_fn)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward_fn(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * local,)

    return _record(data, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = _sigmoid_stable(x.data)

    def backward_fn(g):
        return (g * data * (1.0 - data),)

    return _record(data, (x,), backward_fn)


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-element binary cross-entropy in the numerically stable logit form.

    loss = max(z, 0) - z*t + log(1 + exp(-|z|)); gradient is sigmoid(z) - t.
    Fused so extreme logits neither overflow nor produce a kinked graph.
    """
    logits = as_tensor(logits)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"target shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    data = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward_fn(g):
        return (g * (_sigmoid_stable(z) - t),)

    return _record(data, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    data = np.reshape(x.data, shape)

    def backward_fn(g):
        return (np.reshape(g, x.shape),)

    return _record(data, (x,), backward_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _record(data, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(data, tuple(tensors), backward_fn)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).copy(),)

    return _record(data, (x,), backward_fn)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the two trailing axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(data, (a, b), backward_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction for stability."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        dot = np.sum(g * data, axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _record(data, (x,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    mean = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    if np.any(var + eps <= 0.0):
        raise DomainError("layer_norm variance + eps must be positive")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gamma.data + beta.data

    def backward_fn(g):
        gg = g * gamma.data
        gx = inv * (gg - np.mean(gg, axis=-1, keepdims=True)
                    - xhat * np.mean(gg * xhat, axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        dgamma = np.sum(g * xhat, axis=lead)
        dbeta = np.sum(g, axis=lead)
        return gx, dgamma, dbeta

    return _record(data, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# convolution / resampling
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(C, Hp, Wp) -> (C*k*k, oh*ow) column matrix."""
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, k, k, oh, ow),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(c * k * k, oh * ow)


def _col2im(dcols: np.ndarray, c: int, k: int, stride: int, hp: int, wp: int,
            oh: int, ow: int) -> np.ndarray:
    dxp = np.zeros((c, hp, wp))
    blocks = dcols.reshape(c, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            dxp[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += blocks[:, ki, kj]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (C_in, H, W) with (C_out, C_in, k, k)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (O,C,k,k), got {x.shape} and {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {kernel.shape}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if k < 1 or stride < 1:
        raise ContractError("conv2d needs k >= 1 and stride >= 1")
    h, w = x.shape[1:]
    oh = _conv_out_size(h, k, stride, padding)
    ow = _conv_out_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output empty for input {x.shape}, kernel {kernel.shape}, "
                         f"stride {stride}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, oh, ow)
    wmat = kernel.data.reshape(c_out, c_in * k * k)
    data = (wmat @ cols).reshape(c_out, oh, ow)
    hp, wp = xp.shape[1:]

    def backward_fn(g):
        gmat = g.reshape(c_out, oh * ow)
        dkernel = (gmat @ cols.T).reshape(kernel.shape)
        dcols = wmat.T @ gmat
        dxp = _col2im(dcols, c_in, k, stride, hp, wp, oh, ow)
        dx = dxp[:, padding:hp - padding, padding:wp - padding] if padding else dxp
        return dx, dkernel

    return _record(data, (x, kernel), backward_fn)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution of (C_in, H, W) with (C_in, C_out, k, k)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects (C,H,W) and (C,O,k,k), got {x.shape} and {kernel.shape}")
    c_in, c_out, k, k2 = kernel.shape
    if k != k2 or x.shape[0] != c_in:
        raise ShapeError(f"conv_transpose2d shape mismatch: input {x.shape} vs kernel {kernel.shape}")
    h, w = x.shape[1:]
    oh = (h - 1) * stride + k
    ow = (w - 1) * stride + k
    xmat = x.data.reshape(c_in, h * w)
    wmat = kernel.data.reshape(c_in, c_out * k * k)
    spread = (wmat.T @ xmat).reshape(c_out, k, k, h, w)
    data = np.zeros((c_out, oh, ow))
    for ki in range(k):
        for kj in range(k):
            data[:, ki:ki + stride * h:stride, kj:kj + stride * w:stride] += spread[:, ki, kj]

    def backward_fn(g):
        gcols = np.empty((c_out, k, k, h, w))
        for ki in range(k):
            for kj in range(k):
                gcols[:, ki, kj] = g[:, ki:ki + stride * h:stride, kj:kj + stride * w:stride]
        gmat = gcols.reshape(c_out * k * k, h * w)
        dx = (wmat @ gmat).reshape(x.shape)
        dkernel = (xmat @ gmat.T).reshape(kernel.shape)
        return dx, dkernel

    return _record(data, (x, kernel), backward_fn)


@lru_cache(maxsize=None)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) bilinear interpolation matrix, endpoints aligned."""
    m = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of (C, H, W) to (C, out_h, out_w)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize expects (C,H,W), got {x.shape}")
    ry = _resize_matrix(x.shape[1], out_h)
    rx = _resize_matrix(x.shape[2], out_w)
    data = ry @ x.data @ rx.T

    def backward_fn(g):
        return (ry.T @ g @ rx,)

    return _record(data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar w.r.t. every tracked leaf that feeds it.

    Returns a fresh gradient table mapping leaf tensor -> gradient array of
    the leaf's shape. Leaves that do not require grad, and interior nodes,
    are absent. Accumulation uses sum semantics.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward requires a scalar loss tensor")
    if not loss.requires_grad:
        raise ContractError("loss is not reachable from any tracked tensor")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    table: dict[Tensor, np.ndarray] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward_fn is None:
            if node.requires_grad:
                table[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(parent.node_id)
            grads[parent.node_id] = pg if acc is None else acc + pg
    return table


def finite_difference_gradcheck(
    fn: Callable[..., Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    return_stats: bool = False,
):
    """Compare analytic gradients of a scalar function against central differences.

    ``fn(*params)`` must be deterministic and return a scalar Tensor. The
    relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8); the
    maximum over all checked coordinates is returned.

    Coordinates whose probe evaluations land on opposite sides of a ReLU
    kink (or within eps of one) are excluded from the check: the central
    difference is not a derivative estimate across a kink.
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    if not all(p.requires_grad for p in params):
        raise ContractError("every checked parameter must require grad")

    with no_grad():
        base0 = fn(*params).data.copy()
        base1 = fn(*params).data.copy()
    if base0.tobytes() != base1.tobytes():
        raise CheckInvalidError("fn returned different values for identical inputs")

    loss = fn(*params)
    table = backward(loss)

    def probe() -> tuple[float, list[np.ndarray]]:
        _tls.sign_trace = []
        try:
            with no_grad():
                value = float(fn(*params).data)
            return value, _tls.sign_trace
        finally:
            _tls.sign_trace = None

    max_rel = 0.0
    checked = 0
    skipped = 0
    for p in params:
        analytic = table.get(p)
        if analytic is None:
            analytic = np.zeros(p.shape)
        aflat = np.asarray(analytic).reshape(-1)
        for i, idx in enumerate(np.ndindex(p.shape)):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus, trace_plus = probe()
            p.data[idx] = orig - eps
            f_minus, trace_minus = probe()
            p.data[idx] = orig
            crossed = any(
                tp.shape != tm.shape or not np.array_equal(tp, tm)
                for tp, tm in zip(trace_plus, trace_minus)
            ) or len(trace_plus) != len(trace_minus)
            if crossed:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
            checked += 1
    if return_stats:
        return max_rel, {"checked": checked, "skipped": skipped}
    return max_rel
