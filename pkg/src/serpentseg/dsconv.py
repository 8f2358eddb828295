"""Snake convolution with pyramid offset prediction.

The operator samples nine points per output pixel that form a continuous
chain through the center: per-step displacements are predicted by a pyramid
of convolutions (kernel sizes 3/5/7/9, each sized to the chain distance it
serves), squashed by tanh so every step stays inside (-1, 1), and prefix-
summed outward in both directions at once. The chain values are read with
bilinear interpolation (border-clamped) and contracted against a
(Cout, Cin, 9) weight.

Offset channel layout, for chain distance c in 1..4 with base = 4*(c-1):
    base+0: dx of the forward point t+c      base+1: dy of t+c
    base+2: dx of the backward point t-c     base+3: dy of t-c
Chain order everywhere is t-4 .. t+4, so the center sits at index 4.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .module import Conv2d, Module, Parameter, _uniform
from .tensor import ContractViolation, Tensor, _make, concat, reshape, tanh

PYRAMID_KERNELS = (3, 5, 7, 9)
CHAIN_LEN = 9
OFFSET_CHANNELS = 16  # 8 non-center points x 2 components

# atanh(0.95): initial steps of 0.95 px along the instance axis, so fresh
# instances start as near-straight rows/columns instead of collapsed points
INIT_STEP_BIAS = math.atanh(0.95)
# tanh(20) rounds to 1.0 even in float64: exact unit steps for frozen chains
STRAIGHT_BIAS = 20.0


@dataclass
class OffsetField:
    """Raw and tanh-squashed per-step displacements, (N, 16, H, W) each."""

    raw: Tensor
    squashed: Tensor


def iterate_chain(center: tuple[int, int], steps) -> list[tuple[float, float]]:
    """Chain coordinates for one pixel.

    ``center`` is (h, w); ``steps`` is the 16-vector of squashed offsets in
    the layout above. Returns nine (x, y) points ordered t-4 .. t+4; the
    center point is exactly (w, h).
    """
    h, w = center
    pts: list = [None] * CHAIN_LEN
    pts[4] = (float(w), float(h))
    fx = fy = bx = by = 0.0
    for c in range(1, 5):
        base = 4 * (c - 1)
        fx += float(steps[base + 0])
        fy += float(steps[base + 1])
        bx += float(steps[base + 2])
        by += float(steps[base + 3])
        pts[4 + c] = (w + fx, h + fy)
        pts[4 - c] = (w - bx, h - by)
    return pts


def _chain_axis(squashed: Tensor, component: int, n_pix: int, grid: np.ndarray) -> Tensor:
    """Prefix-sum one coordinate axis of the chain.

    ``component`` 0 builds x coordinates (dx channels), 1 builds y. ``grid``
    broadcasts the integer center coordinate over (N, H, W).
    """
    s = squashed.data
    n, _, h, w = s.shape
    fwd = s[:, component::4][:, 0:4]          # channels component, component+4, ...
    bwd = s[:, component + 2::4][:, 0:4]
    cum_f = np.cumsum(fwd, axis=1)
    cum_b = np.cumsum(bwd, axis=1)
    out = np.empty((n, CHAIN_LEN, h, w), dtype=s.dtype)
    out[:, 4] = grid
    out[:, 5:9] = grid[:, None] + cum_f
    out[:, 3::-1] = grid[:, None] - cum_b     # index 4-c pairs with cum step c

    def bwd_fn(g):
        gf = g[:, 5:9]
        gb = g[:, 3::-1]
        gs = np.zeros_like(squashed.data)
        gs[:, component::4][:, 0:4] = np.cumsum(gf[:, ::-1], axis=1)[:, ::-1]
        gs[:, component + 2::4][:, 0:4] = -np.cumsum(gb[:, ::-1], axis=1)[:, ::-1]
        squashed._accum(gs)

    return _make(out, (squashed,), bwd_fn)


def chain_coordinates(field: OffsetField) -> tuple[Tensor, Tensor]:
    """Dense chain coordinates (xs, ys), each (N, 9, H, W), order t-4..t+4."""
    s = field.squashed
    n, c, h, w = s.data.shape
    if c != OFFSET_CHANNELS:
        raise ContractViolation(f"offset field needs 16 channels, got shape {s.data.shape}")
    gx = np.broadcast_to(np.arange(w, dtype=s.data.dtype), (n, h, w))
    gy = np.broadcast_to(np.arange(h, dtype=s.data.dtype)[:, None], (n, h, w))
    return _chain_axis(s, 0, h * w, gx), _chain_axis(s, 1, h * w, gy)


def grid_sample_points(feature: Tensor, x: Tensor, y: Tensor) -> Tensor:
    """Bilinear reads of ``feature`` (N, C, H, W) at flat point lists (N, M).

    Coordinates are clamped to the border before weighting; the gradient with
    respect to a clamped coordinate is zero. Differentiable in the feature
    values and both coordinates.
    """
    fd, xd, yd = feature.data, x.data, y.data
    n, c, h, w = fd.shape
    if xd.shape != yd.shape or xd.shape[0] != n or xd.ndim != 2:
        raise ContractViolation(
            f"points {xd.shape}/{yd.shape} do not match feature {fd.shape}"
        )
    if not (np.isfinite(xd).all() and np.isfinite(yd).all()):
        raise ContractViolation("non-finite sampling coordinate")

    xc = np.clip(xd, 0.0, w - 1.0)
    yc = np.clip(yd, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(yc), 0, max(h - 2, 0)).astype(np.int64)
    tx = (xc - x0).astype(fd.dtype)
    ty = (yc - y0).astype(fd.dtype)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    flat = fd.reshape(n, c, h * w)
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1

    def gather(idx):
        return np.take_along_axis(flat, idx[:, None, :], axis=2)

    g00, g01, g10, g11 = gather(i00), gather(i01), gather(i10), gather(i11)
    txe = tx[:, None, :]
    tye = ty[:, None, :]
    top = g00 * (1.0 - txe) + g01 * txe
    bot = g10 * (1.0 - txe) + g11 * txe
    data = top * (1.0 - tye) + bot * tye

    def bwd(g):
        if feature.needs_grad:
            base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1)
            acc = np.zeros(n * c * h * w, dtype=np.float64)
            for idx, wgt in ((i00, (1 - txe) * (1 - tye)), (i01, txe * (1 - tye)),
                             (i10, (1 - txe) * tye), (i11, txe * tye)):
                full = (base + idx[:, None, :]).ravel()
                acc += np.bincount(full, weights=(g * wgt).ravel(),
                                   minlength=n * c * h * w)
            feature._accum(acc.reshape(n, c, h, w).astype(fd.dtype))
        if x.needs_grad or y.needs_grad:
            if x.needs_grad:
                dx = ((g01 - g00) * (1.0 - tye) + (g11 - g10) * tye) * g
                mask = ((xd >= 0.0) & (xd <= w - 1.0)).astype(fd.dtype)
                x._accum(dx.sum(axis=1) * mask)
            if y.needs_grad:
                dy = ((g10 - g00) * (1.0 - txe) + (g11 - g01) * txe) * g
                mask = ((yd >= 0.0) & (yd <= h - 1.0)).astype(fd.dtype)
                y._accum(dy.sum(axis=1) * mask)

    return _make(data, (feature, x, y), bwd)


def bilinear_sample(feature: Tensor, point: tuple[float, float]) -> Tensor:
    """Sample one (x, y) point from every channel; returns (N, Cin)."""
    px, py = point
    if not (math.isfinite(px) and math.isfinite(py)):
        raise ContractViolation(f"non-finite sampling coordinate {point}")
    n = feature.data.shape[0]
    dt = feature.data.dtype
    x = Tensor(np.full((n, 1), px, dtype=dt))
    y = Tensor(np.full((n, 1), py, dtype=dt))
    out = grid_sample_points(feature, x, y)
    return reshape(out, (n, feature.data.shape[1]))


def chain_contract(sampled: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Contract (N, Cin, 9, H, W) samples with a (Cout, Cin, 9) weight."""
    sd, wd = sampled.data, weight.data
    if sd.shape[1:3] != wd.shape[1:]:
        raise ContractViolation(f"samples {sd.shape} do not match weight {wd.shape}")
    out = np.tensordot(wd, sd, axes=([1, 2], [1, 2]))          # (Cout, N, H, W)
    data = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    data += bias.data.reshape(1, -1, 1, 1)

    def bwd(g):
        if sampled.needs_grad:
            ds = np.tensordot(g, wd, axes=([1], [0]))           # (N, H, W, Cin, 9)
            sampled._accum(np.ascontiguousarray(ds.transpose(0, 3, 4, 1, 2)))
        if weight.needs_grad:
            weight._accum(np.tensordot(g, sd, axes=([0, 2, 3], [0, 3, 4])))
        if bias.needs_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))

    return _make(data, (sampled, weight, bias), bwd)


class SnakeConv2d(Module):
    """Deformable chain convolution over 9 snake points per pixel.

    ``axis`` selects the initial chain orientation: fresh instances start as
    a straight 0.95-px-step row ("horizontal") or column ("vertical").
    ``frozen_offsets`` pins the chain to exact unit steps along the axis and
    detaches it from the tape (the fixed-geometry ablation variant).
    """

    def __init__(self, cin: int, cout: int, axis: str, rng: np.random.Generator,
                 frozen_offsets: bool = False):
        super().__init__()
        if axis not in ("horizontal", "vertical"):
            raise ContractViolation(f"axis must be horizontal|vertical, got {axis!r}")
        self.axis = axis
        self.cin = cin
        self.cout = cout
        self.frozen_offsets = frozen_offsets
        self._levels = []
        if not frozen_offsets:
            for k in PYRAMID_KERNELS:
                conv = Conv2d(cin, 4, k, padding=(k - 1) // 2, zero_init=True)
                if axis == "horizontal":
                    conv.bias.data[:] = np.array(
                        [INIT_STEP_BIAS, 0.0, INIT_STEP_BIAS, 0.0], np.float32)
                else:
                    conv.bias.data[:] = np.array(
                        [0.0, INIT_STEP_BIAS, 0.0, INIT_STEP_BIAS], np.float32)
                self.register_module(f"pyramid.{k}", conv)
                self._levels.append(conv)
        bound = 1.0 / math.sqrt(cin * CHAIN_LEN)
        self._chain_w = self.register_parameter(
            "chain.weight", Parameter(_uniform(rng, (cout, cin, CHAIN_LEN), bound)))
        self._chain_b = self.register_parameter(
            "chain.bias", Parameter(_uniform(rng, (cout,), bound)))

    def compute_pyramid_offsets(self, x: Tensor) -> OffsetField:
        """Predict per-step displacements; level with kernel 2c+1 serves chain distance c.

        Frozen instances carry no pyramid parameters: their offset field is the
        constant saturated straight-chain pattern.
        """
        n, _, h, w = x.data.shape
        dt = x.data.dtype
        if self.frozen_offsets:
            pattern = np.zeros(OFFSET_CHANNELS, dtype=dt)
            start = 0 if self.axis == "horizontal" else 1
            pattern[start::4][0:4] = STRAIGHT_BIAS
            pattern[start + 2::4][0:4] = STRAIGHT_BIAS
            raw = np.broadcast_to(pattern.reshape(1, -1, 1, 1), (n, OFFSET_CHANNELS, h, w))
            return OffsetField(raw=Tensor(raw), squashed=Tensor(np.tanh(raw)))
        raw = concat([lvl(x) for lvl in self._levels], axis=1)
        return OffsetField(raw=raw, squashed=tanh(raw))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.data.shape
        if c != self.cin:
            raise ContractViolation(
                f"input {x.data.shape} does not match configured {self.cin} channels"
            )
        field = self.compute_pyramid_offsets(x)
        xs, ys = chain_coordinates(field)
        m = CHAIN_LEN * h * w
        sampled = grid_sample_points(x, reshape(xs, (n, m)), reshape(ys, (n, m)))
        sampled = reshape(sampled, (n, self.cin, CHAIN_LEN, h, w))
        return chain_contract(sampled, self._chain_w, self._chain_b)
