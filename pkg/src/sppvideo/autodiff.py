"""Minimal reverse-mode automatic differentiation over numpy buffers.

A Tensor wraps a float32 or float64 numpy array plus an optional gradient
buffer. Every operation that touches at least one gradient-requiring input
records its parents and a backward closure on the output, forming a dynamic
tape that `backward` walks in reverse topological order. Tensors whose
inputs are all constants record nothing, so constant subgraphs cost no
memory.

Non-finite values raise NumericError at the op that produced them; nothing
here propagates NaNs silently.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from .errors import ConfigurationError, NumericError, UsageError

_node_counter = itertools.count()

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """N-dimensional array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "nid", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.nid = next(_node_counter)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all real work happens in the module-level functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.data.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.data.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, c):
        return powc(self, c)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)


def _scalar_err():
    raise UsageError("item() requires a single-element tensor")


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.data.dtype)
    elif not isinstance(b, Tensor):
        b = _as_tensor(b, a.data.dtype)
    elif a.data.dtype != b.data.dtype:
        raise ConfigurationError(
            f"mixed tensor dtypes {a.data.dtype} and {b.data.dtype}"
        )
    return a, b


def _from_op(data: np.ndarray, parents, backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.nid = next(_node_counter)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _from_op(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _from_op(a.data * b.data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    with np.errstate(all="ignore"):
        out_data = a.data / b.data
    return _from_op(out_data, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,), "neg")


def absval(a: Tensor) -> Tensor:
    def bwd(g):
        return (g * np.sign(a.data),)

    return _from_op(np.abs(a.data), (a,), bwd, "abs")


def powc(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c * a.data ** (c - 1.0),)

    with np.errstate(all="ignore"):
        out_data = a.data**c
    return _from_op(out_data, (a,), bwd, "pow")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / out_data),)

    return _from_op(out_data, (a,), bwd, "sqrt")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _from_op(out_data, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    def bwd(g):
        return (g / a.data,)

    with np.errstate(all="ignore"):
        out_data = np.log(a.data)
    return _from_op(out_data, (a,), bwd, "log")


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out_data * (1.0 - out_data),)

    return _from_op(out_data, (a,), bwd, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out_data * out_data),)

    return _from_op(out_data, (a,), bwd, "tanh")


def relu(a: Tensor) -> Tensor:
    def bwd(g):
        return (g * (a.data > 0),)

    return _from_op(np.maximum(a.data, 0), (a,), bwd, "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _from_op(a.data * cdf, (a,), bwd, "gelu")


def sine(a: Tensor) -> Tensor:
    def bwd(g):
        return (g * np.cos(a.data),)

    return _from_op(np.sin(a.data), (a,), bwd, "sin")


def cosine(a: Tensor) -> Tensor:
    def bwd(g):
        return (g * -np.sin(a.data),)

    return _from_op(np.cos(a.data), (a,), bwd, "cos")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim > 2 or b.data.ndim > 2:
        raise ConfigurationError("matmul supports 1-D and 2-D operands only")
    out_data = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad  # 1-D dot

    return _from_op(out_data, (a, b), bwd, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _from_op(a.data.reshape(shape), (a,), bwd, "reshape")


def tslice(a: Tensor, key) -> Tensor:
    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[key] += g
        return (gx,)

    return _from_op(a.data[key].copy(), (a,), bwd, "slice")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat requires at least one tensor")
    dt = tensors[0].data.dtype
    if any(t.data.dtype != dt for t in tensors):
        raise ConfigurationError("concat requires uniform dtype")
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, sizes, axis=axis))

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    return concat([reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:]) for t in tensors], axis=axis)


def pad2d(a: Tensor, pads) -> Tensor:
    """Zero-pad the last two axes by (top, bottom, left, right)."""
    top, bottom, left, right = pads
    width = [(0, 0)] * (a.data.ndim - 2) + [(top, bottom), (left, right)]
    sl = (Ellipsis,
          slice(top, top + a.data.shape[-2]),
          slice(left, left + a.data.shape[-1]))

    def bwd(g):
        return (np.ascontiguousarray(g[sl]),)

    return _from_op(np.pad(a.data, width), (a,), bwd, "pad2d")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    n = a.data.size if axis is None else np.prod(
        [shape[i] for i in np.atleast_1d(axis)])
    scale = 1.0 / float(n)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g * scale, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg * scale, shape).copy(),)

    return _from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# convolution and resampling


def _col_view(xp: np.ndarray, kh: int, kw: int, stride: int):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    ), ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OCkk kernels (no bias)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ConfigurationError("conv2d expects 4-D input and kernel")
    n, c, h, wdt = x.data.shape
    o, c2, kh, kw = w.data.shape
    if c != c2:
        raise ConfigurationError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    if stride < 1:
        raise ConfigurationError("conv2d stride must be >= 1")
    if kh > h + 2 * padding or kw > wdt + 2 * padding:
        raise ConfigurationError("conv2d kernel larger than padded input")
    x, w = _pair(x, w)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    view, ho, wo = _col_view(xp, kh, kw, stride)
    cols = np.ascontiguousarray(view).reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(o, -1)
    out_data = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        go = g.reshape(n, o, ho * wo)
        gw = np.tensordot(go, cols, axes=([0, 2], [0, 2])).reshape(w.data.shape)
        gcols = np.matmul(wmat.T, go).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, i, j]
        gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        return np.ascontiguousarray(gx), gw

    return _from_op(out_data, (x, w), bwd, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Per-channel (depthwise) stride-1 convolution; kernel shape (C, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 3:
        raise ConfigurationError("depthwise_conv2d expects NCHW input and Ckk kernel")
    n, c, h, wdt = x.data.shape
    c2, kh, kw = w.data.shape
    if c != c2:
        raise ConfigurationError("depthwise_conv2d channel mismatch")
    x, w = _pair(x, w)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    view, ho, wo = _col_view(xp, kh, kw, 1)
    out_data = np.einsum("ncijhw,cij->nchw", view, w.data)
    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        gw = np.einsum("nchw,ncijhw->cij", g, view)
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += g * w.data[:, i, j][None, :, None, None]
        gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        return np.ascontiguousarray(gx), gw

    return _from_op(np.ascontiguousarray(out_data), (x, w), bwd, "depthwise_conv2d")


def pixel_shuffle_upsample(x: Tensor, s: int) -> Tensor:
    """Rearrange (N, C*s*s, H, W) into (N, C, H*s, W*s); lossless permutation."""
    if x.data.ndim != 4:
        raise ConfigurationError("pixel_shuffle_upsample expects a 4-D tensor")
    n, cs2, h, w = x.data.shape
    if s < 1 or cs2 % (s * s) != 0:
        raise ConfigurationError(
            f"channel count {cs2} not divisible by upsample factor squared {s * s}"
        )
    if s == 1:
        return reshape(x, x.data.shape)
    c = cs2 // (s * s)
    out_data = np.ascontiguousarray(
        x.data.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3)
    ).reshape(n, c, h * s, w * s)

    def bwd(g):
        gx = g.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4)
        return (np.ascontiguousarray(gx).reshape(n, cs2, h, w),)

    return _from_op(out_data, (x,), bwd, "pixel_shuffle_upsample")


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Inverse of pixel_shuffle_upsample: (N, C, H*s, W*s) -> (N, C*s*s, H, W)."""
    if x.data.ndim != 4:
        raise ConfigurationError("pixel_unshuffle expects a 4-D tensor")
    n, c, hs, ws = x.data.shape
    if s < 1 or hs % s != 0 or ws % s != 0:
        raise ConfigurationError("spatial extents not divisible by unshuffle factor")
    if s == 1:
        return reshape(x, x.data.shape)
    h, w = hs // s, ws // s
    out_data = np.ascontiguousarray(
        x.data.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4)
    ).reshape(n, c * s * s, h, w)

    def bwd(g):
        gx = g.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3)
        return (np.ascontiguousarray(gx).reshape(n, c, hs, ws),)

    return _from_op(out_data, (x,), bwd, "pixel_unshuffle")


def nearest_upsample(x: Tensor, s: int) -> Tensor:
    if x.data.ndim != 4:
        raise ConfigurationError("nearest_upsample expects a 4-D tensor")
    if s < 1:
        raise ConfigurationError("upsample factor must be >= 1")
    if s == 1:
        return reshape(x, x.data.shape)
    n, c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, s, axis=2), s, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, s, w, s).sum(axis=(3, 5)),)

    return _from_op(out_data, (x,), bwd, "nearest_upsample")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """k-by-k average pooling with stride k; a ragged edge is cropped off."""
    if x.data.ndim != 4:
        raise ConfigurationError("avg_pool2d expects a 4-D tensor")
    n, c, h, w = x.data.shape
    hc, wc = (h // k) * k, (w // k) * k
    if hc == 0 or wc == 0:
        raise ConfigurationError("avg_pool2d input smaller than pooling window")
    out_data = x.data[:, :, :hc, :wc].reshape(
        n, c, hc // k, k, wc // k, k).mean(axis=(3, 5))

    def bwd(g):
        gx = np.zeros_like(x.data)
        block = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k),
            (n, c, hc // k, k, wc // k, k),
        )
        gx[:, :, :hc, :wc] = block.reshape(n, c, hc, wc)
        return (gx,)

    return _from_op(out_data, (x,), bwd, "avg_pool2d")


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor,
                        eps: float = 1e-5) -> Tensor:
    """Normalize an NCHW tensor across its channel axis, then scale and shift."""
    if x.data.ndim != 4:
        raise ConfigurationError("layer_norm_channels expects a 4-D tensor")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ConfigurationError("layer_norm affine parameters must have shape (C,)")
    mu = tmean(x, axis=1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=1, keepdims=True)
    inv = powc(add(var, eps), -0.5)
    xhat = mul(xc, inv)
    return add(mul(xhat, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every gradient-requiring leaf.

    Repeated calls without zeroing accumulate. A detached (constant) scalar
    is a no-op.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError("backward requires a scalar loss")
    if not loss.requires_grad:
        return
    grads = {loss: np.ones_like(loss.data)}
    for t in reversed(_toposort(loss)):
        g = grads.pop(t, None)
        if g is None:
            continue
        if t._backward is None:
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad = t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(p)
            grads[p] = pg if acc is None else acc + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
