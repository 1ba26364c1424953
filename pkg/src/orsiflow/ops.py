"""Differentiable operations on :class:`~orsiflow.tensor.Tensor`.

Image-like ops accept either ``(C, H, W)`` or batched ``(N, C, H, W)`` input.
All backward rules are exercised against central finite differences in
``tests/test_ops_grad.py`` and by ``orsiflow gradcheck``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import _kernels
from .errors import IndivisibleSplit, ShapeMismatch
from .tensor import Tensor, as_tensor, record

# Every differentiable op; gradcheck enumerates this registry.
DIFFERENTIABLE_OPS: list[str] = []


def _register(name):
    DIFFERENTIABLE_OPS.append(name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return record("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb
    return record("div", out, (a, b), bw)


for _n in ("add", "sub", "mul", "div"):
    _register(_n)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return record("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


for _n in ("exp", "log", "square"):
    _register(_n)


# -- activations -----------------------------------------------------------

def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    th = np.tanh(x.data)
    return record("tanh", th, (x,), lambda g: (g * (1.0 - th * th),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (v + 0.044715 * v ** 3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)
    return record("gelu", out, (x,), bw)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "gelu": gelu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


for _n in _ACTIVATIONS:
    _register(_n)


# -- reductions and shape ops ----------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)
    return record("sum", out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return record("mean", out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return record("transpose", out, (x,), lambda g: (g.transpose(inv),))


for _n in ("sum", "mean", "reshape", "transpose"):
    _register(_n)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax):
            raise ShapeMismatch(f"cannot concat {ref} with {x.shape} along axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return record("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=ax)))


def split(x: Tensor, parts: int, axis: int = 0) -> list:
    """Split into ``parts`` equal chunks along ``axis``."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if parts < 1 or n % parts:
        raise IndivisibleSplit(f"axis of length {n} does not split into {parts} parts")
    step = n // parts
    outs = []
    for p in range(parts):
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(p * step, (p + 1) * step)
        sl = tuple(sl)

        def bw(g, sl=sl):
            full = np.zeros(x.shape)
            full[sl] = g
            return (full,)
        outs.append(record("split", x.data[sl].copy(), (x,), bw))
    return outs


_register("concat")
_register("split")


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb
    return record("matmul", out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape (out, in); x may have any leading dims."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data.T
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[0],))
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return record("linear", out, inputs, bw)


_register("matmul")
_register("linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return record("softmax", s, (x,), bw)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def bw(g):
        gxhat = g * weight.data
        d = x.shape[-1]
        gx = inv / d * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        gw = _unbroadcast(g * xhat, weight.shape)
        gb = _unbroadcast(g, bias.shape)
        return gx, gw, gb
    return record("layer_norm", out, (x, weight, bias), bw)


_register("softmax")
_register("layer_norm")


# -- image ops ---------------------------------------------------------------

def _as4d(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if k < 1 or span < 0 or span % stride:
        raise ShapeMismatch(f"non-integral conv output: size={size} k={k} stride={stride} pad={pad}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``w`` of shape (C_out, C_in, k, k)."""
    x4, squeeze = _as4d(x)
    n, cin, h, wd = x4.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin or k != k2:
        raise ShapeMismatch(f"weight {w.shape} incompatible with input {x.shape}")
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd, k, stride, pad)
    xp = np.pad(x4.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x4.data
    cols = _kernels.im2col(xp, k, stride)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    inputs = (x4, w) if b is None else (x4, w, b)
    padded_shape = xp.shape

    def bw(g):
        g3 = g.reshape(n, cout, ho * wo)
        gx = None
        if x4.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            gxp = _kernels.col2im(gcols, padded_shape, k, stride)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))
    y = record("conv2d", out, inputs, bw)
    return reshape(y, y.shape[1:]) if squeeze else y


def pool_global(x: Tensor, mode: str = "avg") -> Tensor:
    """Per-channel mean or max over the two trailing spatial axes."""
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeMismatch(f"cannot pool tensor of shape {x.shape}")
    lead = x.shape[:-2]
    flat = x.data.reshape(lead + (-1,))
    hw = flat.shape[-1]
    if mode == "avg":
        out = flat.mean(axis=-1)
        return record("pool_avg", out, (x,),
                      lambda g: (np.broadcast_to((g / hw)[..., None], flat.shape).reshape(x.shape).copy(),))
    if mode == "max":
        idx = flat.argmax(axis=-1)  # first maximum in row-major order
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gf = np.zeros(flat.shape)
            np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
            return (gf.reshape(x.shape),)
        return record("pool_max", out, (x,), bw)
    raise ValueError(f"unknown pooling mode {mode!r}")


def resize_bilinear(x: Tensor, ho: int, wo: int) -> Tensor:
    """Bilinear resampling with half-pixel centres (align_corners=False)."""
    if ho < 1 or wo < 1:
        raise ShapeMismatch("target size must be positive")
    x4, squeeze = _as4d(x)
    h, wd = x4.shape[-2:]
    if (h, wd) == (ho, wo):
        return x
    out = _kernels.resize(x4.data, ho, wo)
    y = record("resize_bilinear", out, (x4,), lambda g: (_kernels.resize_adjoint(g, h, wd),))
    return reshape(y, y.shape[1:]) if squeeze else y


for _n in ("conv2d", "pool_avg", "pool_max", "resize_bilinear"):
    _register(_n)


# -- losses ------------------------------------------------------------------

def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements."""
    target = as_tensor(target)
    diff = pred.data - target.data
    n = diff.size
    out = np.array((diff * diff).sum() / n)

    def bw(g):
        gp = 2.0 * g * diff / n
        return gp, (-gp if target.requires_grad else None)
    return record("mse", out, (pred, target), bw)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against ``target`` in [0,1]."""
    target = as_tensor(target)
    z, y = logits.data, target.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = per.size
    out = np.array(per.sum() / n)

    def bw(g):
        return g * (_sigmoid(z) - y) / n, None
    return record("bce_with_logits", out, (logits, target), bw)


_register("mse")
_register("bce_with_logits")
