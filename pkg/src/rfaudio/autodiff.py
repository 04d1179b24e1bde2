"""Reverse-mode autodiff on numpy arrays via a dynamic tape.

Small by design: dense tensors, the op set a conditional flow transformer
needs, and a finite-difference harness that anchors the gradient acceptance
tests. Compute dtype follows the array dtype (float32 for training, float64
for validation); python-scalar operands never promote.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "set_debug",
    "matmul",
    "reshape",
    "transpose",
    "swap_last2",
    "concatenate",
    "stack",
    "tsum",
    "tmean",
    "softmax",
    "layer_norm",
    "gelu",
    "silu",
    "embedding",
    "depthwise_conv1d",
    "scaled_dot_product_attention",
    "gradcheck",
]


class NonFiniteError(FloatingPointError):
    """A non-finite value appeared in an op output (debug mode) or gradient."""


_GRAD_ENABLED = [True]
_DEBUG = [False]


class no_grad:
    """Context manager: ops inside do not record the tape."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


def set_debug(enabled: bool) -> None:
    """When enabled, every op output is checked for non-finite values."""
    _DEBUG[0] = bool(enabled)


def _check(name: str, data: np.ndarray) -> None:
    if _DEBUG[0] and data.size and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output of {name}")


class Tensor:
    """A dense array with an optional gradient slot and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- autograd ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order: list[Tensor] = []
        seen: set[int] = set()
        work = [(self, False)]
        while work:
            node, expanded = work.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            work.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    work.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            if _DEBUG[0] and not np.all(np.isfinite(node.grad)):
                raise NonFiniteError("non-finite gradient during backward")
            node._backward(node.grad)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(name: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    _check(name, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    record = _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents)
    out.requires_grad = record
    out._parents = tuple(parents) if record else ()
    out._backward = backward if record else None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._parents):
        return
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    scalar = not isinstance(b, Tensor)
    bd = float(b) if scalar else b.data
    data = a.data + bd
    parents = (a,) if scalar else (a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        if not scalar:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make("add", data, parents, backward)


def mul(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    scalar = not isinstance(b, Tensor)
    bd = float(b) if scalar else b.data
    data = a.data * bd
    parents = (a,) if scalar else (a, b)

    def backward(g):
        _accum(a, _unbroadcast(g * bd, a.data.shape))
        if not scalar:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make("mul", data, parents, backward)


def div(a: Tensor, b: Tensor):
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make("div", data, (a, b), backward)


def power(a: Tensor, p):
    p = float(p)
    data = a.data**p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make("pow", data, (a,), backward)


def matmul(a: Tensor, b: Tensor):
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make("matmul", data, (a, b), backward)


def reshape(a: Tensor, shape):
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make("reshape", data, (a,), backward)


def transpose(a: Tensor, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make("transpose", data, (a,), backward)


def swap_last2(a: Tensor):
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def concatenate(tensors: Sequence[Tensor], axis: int = 0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make("concatenate", data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0):
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concatenate(expanded, axis=axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make("sum", data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False):
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


def softmax(a: Tensor):
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accum(a, data * (g - dot))

    return _make("softmax", data, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    data = y * gain.data + bias.data

    def backward(g):
        _accum(bias, _unbroadcast(g, bias.data.shape))
        _accum(gain, _unbroadcast(g * y, gain.data.shape))
        gy = g * gain.data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * y).mean(axis=-1, keepdims=True)
        _accum(a, inv * (gy - m1 - y * m2))

    return _make("layer_norm", data, (a, gain, bias), backward)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor):
    """Exact gelu: x * Phi(x) with the Gaussian CDF."""
    phi_cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    data = (a.data * phi_cdf).astype(a.data.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        _accum(a, g * (phi_cdf + a.data * pdf))

    return _make("gelu", data, (a,), backward)


def silu(a: Tensor):
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward(g):
        _accum(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make("silu", data, (a,), backward)


def embedding(table: Tensor, indices):
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError("embedding index out of range")
    data = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _make("embedding", data, (table,), backward)


def depthwise_conv1d(a: Tensor, weight: Tensor):
    """Per-channel 1-D convolution with 'same' zero padding.

    a: [..., T, C], weight: [K, C]; out[..., t, c] = sum_k a[..., t+k-K//2, c] * w[k, c].
    """
    k, c = weight.data.shape
    if a.data.shape[-1] != c:
        raise ValueError(f"channel mismatch: input {a.data.shape[-1]} vs kernel {c}")
    t = a.data.shape[-2]
    pl, pr = (k - 1) // 2, k // 2
    pad_spec = [(0, 0)] * (a.data.ndim - 2) + [(pl, pr), (0, 0)]
    xp = np.pad(a.data, pad_spec)
    data = np.zeros_like(a.data)
    for j in range(k):
        data = data + xp[..., j : j + t, :] * weight.data[j]
    data = data.astype(a.data.dtype, copy=False)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        reduce_axes = tuple(range(g.ndim - 1))
        for j in range(k):
            gxp[..., j : j + t, :] += g * weight.data[j]
            gw[j] = (g * xp[..., j : j + t, :]).sum(axis=reduce_axes)
        _accum(a, gxp[..., pl : pl + t, :])
        _accum(weight, gw)

    return _make("depthwise_conv1d", data, (a, weight), backward)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask=None):
    """softmax(q k^T / sqrt(dh) + mask) v, composed from primitive ops.

    mask, when given, is an additive constant array broadcastable to the
    score shape (use large negatives to disable positions).
    """
    dh = q.shape[-1]
    scores = mul(matmul(q, swap_last2(k)), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = add(scores, Tensor(np.asarray(mask, dtype=scores.dtype)))
    return matmul(softmax(scores), v)


# ---------------------------------------------------------------------------
# finite-difference validation harness
# ---------------------------------------------------------------------------


def gradcheck(f, inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the live ``inputs`` to a scalar Tensor; gradients are checked
    for every coordinate of every requires_grad input. Use float64 inputs.
    """
    for t in inputs:
        t.zero_grad()
    out = f(inputs)
    if out.data.size != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("non-finite function value in gradcheck")
    out.backward()
    analytic = []
    for t in inputs:
        if t.requires_grad:
            if t.grad is None:
                analytic.append(np.zeros_like(t.data))
            else:
                if not np.all(np.isfinite(t.grad)):
                    raise NonFiniteError("non-finite analytic gradient in gradcheck")
                analytic.append(t.grad.copy())
        else:
            analytic.append(None)

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        if ana is None:
            continue
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = float(f(inputs).data)
            flat[i] = orig - eps
            with no_grad():
                f_minus = float(f(inputs).data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NonFiniteError("non-finite value while perturbing gradcheck input")
            num = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(aflat[i] - num) / max(abs(aflat[i]), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst
