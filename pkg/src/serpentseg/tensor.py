"""Dense tensors with tape-based reverse-mode differentiation.

Every operation records a backward closure on the output node; ``backward()``
replays the tape in reverse topological order. Values are float32 on
production paths, but all ops preserve the incoming dtype so the gradient
checker can re-run a graph in float64.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes or
equal-rank shapes where one operand has size-1 axes (bias-add and per-channel
or per-position scaling). Anything else raises ``ContractViolation``.
"""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf


class ContractViolation(ValueError):
    """An operation was called with inputs that break its contract."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-d array plus optional gradient buffer and tape linkage.

    Feature maps are (N, C, H, W); token sequences are (N, L, C); losses are
    0-d. ``grad`` is filled by ``backward()`` and has the same shape as
    ``data``.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- tape plumbing ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def needs_grad(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise ContractViolation(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- constructors -------------------------------------------------------

    @staticmethod
    def from_array(arr, requires_grad: bool = False, dtype=np.float32) -> "Tensor":
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    # -- operator sugar ------------------------------------------------------

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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Create an op output, recording tape links only when grads can flow."""
    if not _GRAD_ENABLED:
        return Tensor(data)
    parents = tuple(p for p in parents if p.needs_grad)
    if not parents:
        return Tensor(data)
    out = Tensor(data)
    out._parents = parents
    out._backward = backward
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    # scalars mix freely; otherwise ranks must match and differing axes be 1
    if a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim != b.ndim or any(
        sa != sb and sa != 1 and sb != 1 for sa, sb in zip(a.shape, b.shape)
    ):
        raise ContractViolation(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` by summing broadcast axes."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    _check_broadcast(a.data, b.data, "add")
    data = a.data + b.data

    def bwd(g):
        if a.needs_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.needs_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _lift(b, a)
    else:
        a = _lift(a, b)
    _check_broadcast(a.data, b.data, "sub")
    data = a.data - b.data

    def bwd(g):
        if a.needs_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.needs_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    _check_broadcast(a.data, b.data, "mul")
    data = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        if a.needs_grad:
            a._accum(_unbroadcast(g * bd, ad.shape))
        if b.needs_grad:
            b._accum(_unbroadcast(g * ad, bd.shape))

    return _make(data, (a, b), bwd)


def div(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _lift(b, a)
    else:
        a = _lift(a, b)
    _check_broadcast(a.data, b.data, "div")
    data = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        if a.needs_grad:
            a._accum(_unbroadcast(g / bd, ad.shape))
        if b.needs_grad:
            b._accum(_unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _make(data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accum(-g)

    return _make(-a.data, (a,), bwd)


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            a._accum(np.broadcast_to(g, shape).astype(g.dtype, copy=True))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accum(np.broadcast_to(gg, shape).astype(g.dtype, copy=True))

    return _make(data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / float(count))


def max_along(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Max over one axis; gradient routes to the first occurrence of the max."""
    idx = np.argmax(a.data, axis=axis)  # first occurrence on ties
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, np.expand_dims(idx, axis), gg, axis=axis)
        a._accum(buf)

    return _make(data, (a,), bwd)


# -- shape surgery ------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    data = a.data.reshape(shape)

    def bwd(g):
        a._accum(g.reshape(old))

    return _make(data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def bwd(g):
        a._accum(g.transpose(inv))

    return _make(data, (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.needs_grad:
                t._accum(p)

    return _make(data, tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = a.data[sl].copy()

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        a._accum(buf)

    return _make(data, (a,), bwd)


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the two trailing spatial axes of an (N, C, H, W) tensor."""
    data = np.pad(a.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    def bwd(g):
        a._accum(g[:, :, pad:-pad, pad:-pad] if pad else g)

    return _make(data, (a,), bwd)


# -- pointwise nonlinearities -------------------------------------------------

def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)
    mask = a.data > 0

    def bwd(g):
        a._accum(g * mask)

    return _make(data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a._accum(g * data * (1.0 - data))

    return _make(data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g):
        a._accum(g * (1.0 - data * data))

    return _make(data, (a,), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        a._accum(g * (cdf + x * pdf).astype(x.dtype))

    return _make(data, (a,), bwd)


def pointwise_activation(a: Tensor, kind: str) -> Tensor:
    fns = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "gelu": gelu}
    if kind not in fns:
        raise ContractViolation(f"unknown activation kind {kind!r}")
    return fns[kind](a)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        a._accum(g * data)

    return _make(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        a._accum(g / a.data)

    return _make(data, (a,), bwd)


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accum(data * (g - dot))

    return _make(data, (a,), bwd)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    p = np.exp(data)

    def bwd(g):
        a._accum(g - p * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), bwd)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ContractViolation(f"matmul needs rank >= 2, got {ad.shape} @ {bd.shape}")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ContractViolation(f"matmul: incompatible shapes {ad.shape} @ {bd.shape}")
    data = ad @ bd

    def bwd(g):
        if a.needs_grad:
            a._accum(g @ bd.swapaxes(-1, -2))
        if b.needs_grad:
            b._accum(ad.swapaxes(-1, -2) @ g)

    return _make(data, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of (N, Cin) rows by a (Cout, Cin) weight."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ContractViolation(
            f"linear: input {xd.shape} incompatible with weight {wd.shape}"
        )
    data = xd @ wd.T
    if bias is not None:
        data = data + bias.data

    def bwd(g):
        if x.needs_grad:
            x._accum(g @ wd)
        if weight.needs_grad:
            weight._accum(g.T @ xd)
        if bias is not None and bias.needs_grad:
            bias._accum(g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, bwd)


# -- convolution and pooling ---------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Flatten every kernel window of a padded (N, C, Hp, Wp) map into a row."""
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, c, k, k), (s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False)
    return np.ascontiguousarray(view).reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution with zero padding and square odd kernels.

    im2col plus a single GEMM each way; the window rows are kept for the
    weight gradient.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ContractViolation(f"conv2d: need 4-d input/weight, got {xd.shape}, {wd.shape}")
    n, cin, h, w = xd.shape
    cout, cin_w, kh, kw = wd.shape
    if cin != cin_w:
        raise ContractViolation(
            f"conv2d: input channels {xd.shape} do not match weight {wd.shape}"
        )
    if kh != kw or kh % 2 == 0:
        raise ContractViolation(f"conv2d: kernel must be square and odd, got {wd.shape}")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractViolation(
            f"conv2d: kernel {wd.shape} does not fit input {xd.shape} with padding {padding}"
        )

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = wd.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    data = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if weight.needs_grad:
            weight._accum((g2.T @ cols).reshape(wd.shape))
        if x.needs_grad:
            if stride == 1:
                # input grad is the full correlation with the flipped kernel
                gp = np.pad(g, ((0, 0), (0, 0), (k - 1 - padding,) * 2,
                                (k - 1 - padding,) * 2))
                gcols = _im2col(gp, k, 1, h, w)
                wflip = np.ascontiguousarray(
                    wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(cin, cout * k * k)
                dx = (gcols @ wflip.T).reshape(n, h, w, cin)
                x._accum(np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))
            else:
                dcols = g2 @ wmat
                dc = np.ascontiguousarray(
                    dcols.reshape(n, ho, wo, cin, k, k).transpose(0, 3, 1, 2, 4, 5))
                gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dc[..., i, j]
                x._accum(gxp[:, :, padding:padding + h, padding:padding + w] if padding
                         else gxp)
        if bias is not None and bias.needs_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, bwd)


def depthwise_conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 convolution, padding 1. Weight shape (C, 3, 3)."""
    xd, wd = x.data, weight.data
    n, c, h, w = xd.shape
    if wd.shape != (c, 3, 3):
        raise ContractViolation(
            f"depthwise_conv3x3: weight {wd.shape} does not match input {xd.shape}"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    data = np.zeros_like(xd)
    for i in range(3):
        for j in range(3):
            data += xp[:, :, i:i + h, j:j + w] * wd[:, i, j].reshape(1, c, 1, 1)
    if bias is not None:
        data = data + bias.data.reshape(1, c, 1, 1)

    def bwd(g):
        if x.needs_grad:
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + h, j:j + w] += g * wd[:, i, j].reshape(1, c, 1, 1)
            x._accum(np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1]))
        if weight.needs_grad:
            gw = np.empty_like(wd)
            for i in range(3):
                for j in range(3):
                    gw[:, i, j] = (g * xp[:, :, i:i + h, j:j + w]).sum(axis=(0, 2, 3))
            weight._accum(gw)
        if bias is not None and bias.needs_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, bwd)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties go to the first position in row-major scan."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"max_pool2: H and W must be even, got {x.data.shape}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        buf = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        buf = buf.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accum(np.ascontiguousarray(buf).reshape(n, c, h, w))

    return _make(data, (x,), bwd)


def global_pool(x: Tensor, kind: str) -> Tensor:
    """Reduce (N, C, H, W) spatially to (N, C, 1, 1) by mean or max."""
    n, c, h, w = x.data.shape
    if h * w < 1:
        raise ContractViolation(f"global_pool: empty spatial extent {x.data.shape}")
    if kind == "avg":
        data = x.data.mean(axis=(2, 3), keepdims=True)

        def bwd(g):
            x._accum(np.broadcast_to(g / (h * w), x.data.shape).astype(g.dtype, copy=True))

        return _make(data, (x,), bwd)
    if kind == "max":
        flat = x.data.reshape(n, c, h * w)
        idx = np.argmax(flat, axis=-1)
        data = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1)

        def bwd(g):
            buf = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(buf, idx[..., None], g.reshape(n, c, 1), axis=-1)
            x._accum(buf.reshape(n, c, h, w))

        return _make(data, (x,), bwd)
    raise ContractViolation(f"global_pool: kind must be 'avg' or 'max', got {kind!r}")


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Half-pixel-center linear interpolation matrix (n_in*factor, n_in)."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(math.floor(src))
        if lo >= n_in - 1:
            lo = n_in - 1
            m[i, lo] = 1.0
        else:
            t = src - lo
            m[i, lo] = 1.0 - t
            m[i, lo + 1] = t
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling with half-pixel sample centers."""
    if factor < 2:
        raise ContractViolation(f"upsample_bilinear: factor must be >= 2, got {factor}")
    n, c, h, w = x.data.shape
    ry = _interp_matrix(h, factor, x.data.dtype)
    rx = _interp_matrix(w, factor, x.data.dtype)
    data = ry @ x.data @ rx.T

    def bwd(g):
        x._accum(ry.T @ g @ rx)

    return _make(data, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (n, l) row of (N, L, C) over C, then scale and shift."""
    xd = x.data
    if xd.ndim != 3 or gain.data.shape != (xd.shape[-1],) or shift.data.shape != (xd.shape[-1],):
        raise ContractViolation(
            f"layer_norm: input {xd.shape} with gain {gain.data.shape}, shift {shift.data.shape}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    data = xhat * gain.data + shift.data

    def bwd(g):
        if gain.needs_grad:
            gain._accum((g * xhat).sum(axis=(0, 1)))
        if shift.needs_grad:
            shift._accum(g.sum(axis=(0, 1)))
        if x.needs_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv * (gx - m1 - xhat * m2))

    return _make(data, (x, gain, shift), bwd)
