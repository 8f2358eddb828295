"""Dual-branch encoders.

The snake branch stacks attention-fused blocks (two snake convolutions plus a
standard convolution in parallel) with 2x2 max pooling in between, producing
features at 1/1 .. 1/16 resolution. The transformer branch is a lightweight
hierarchical encoder with overlapping patch embedding, reduced-key/value
self-attention, a depthwise-conv FFN, and no positional encodings, producing
features at 1/4 .. 1/32 resolution.
"""
from __future__ import annotations

import math

import numpy as np

from .attention import ChannelAttention, SpatialAttention, WeightedChannelAttention, apply_attention
from .dsconv import SnakeConv2d
from .module import Conv2d, LayerNorm, Linear, Module, Parameter, _uniform
from .tensor import (
    ContractViolation,
    Tensor,
    concat,
    depthwise_conv3x3,
    gelu,
    linear,
    matmul,
    max_pool2,
    mul,
    relu,
    reshape,
    softmax,
    transpose,
)

CONV_MODES = ("vanilla", "dsconv", "enhanced")
CHANNEL_ATTENTION_MODES = ("none", "cam", "wcam")


def make_channel_attention(mode: str, channels: int, ratio: int,
                           rng: np.random.Generator):
    if mode == "wcam":
        return WeightedChannelAttention(channels, ratio=ratio, rng=rng)
    if mode == "cam":
        return ChannelAttention(channels, ratio=ratio, rng=rng)
    if mode == "none":
        return None
    raise ContractViolation(f"channel attention mode must be one of "
                            f"{CHANNEL_ATTENTION_MODES}, got {mode!r}")


class SnakeBlock(Module):
    """Three parallel convolutions -> channel+spatial attention -> fusion -> residual.

    Branch order in the concatenation is fixed: horizontal snake, vertical
    snake, standard 3x3. ``conv_mode`` swaps the two snake branches for the
    ablations (frozen straight chains, or plain 3x3 convolutions).
    """

    def __init__(self, cin: int, cb: int, cout: int, rng: np.random.Generator,
                 conv_mode: str = "enhanced", channel_attention: str = "wcam",
                 ratio: int = 8):
        super().__init__()
        if conv_mode not in CONV_MODES:
            raise ContractViolation(f"conv mode must be one of {CONV_MODES}, got {conv_mode!r}")
        if conv_mode == "vanilla":
            self.branch_h = Conv2d(cin, cb, 3, padding=1, rng=rng)
            self.branch_v = Conv2d(cin, cb, 3, padding=1, rng=rng)
        else:
            frozen = conv_mode == "dsconv"
            self.branch_h = SnakeConv2d(cin, cb, "horizontal", rng, frozen_offsets=frozen)
            self.branch_v = SnakeConv2d(cin, cb, "vertical", rng, frozen_offsets=frozen)
        self.local = Conv2d(cin, cb, 3, padding=1, rng=rng)
        self.ca = make_channel_attention(channel_attention, 3 * cb, ratio, rng)
        self.sa = SpatialAttention(rng=rng)
        self.fuse = Conv2d(3 * cb, cout, 3, padding=1, rng=rng)
        self.proj = Conv2d(cin, cout, 1, rng=rng) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        parts = [relu(self.branch_h(x)), relu(self.branch_v(x)), relu(self.local(x))]
        cat = concat(parts, axis=1)
        sa_map = self.sa(cat)
        if self.ca is not None:
            att = apply_attention(cat, self.ca(cat), sa_map)
        else:
            att = mul(cat, sa_map)
        fused = self.fuse(att)
        res = x if self.proj is None else self.proj(x)
        return fused + res


class SnakeEncoder(Module):
    """Five snake blocks with max pooling in between: 1/1 .. 1/16 features."""

    def __init__(self, cin: int, widths, rng: np.random.Generator,
                 conv_mode: str = "enhanced", channel_attention: str = "wcam",
                 ratio: int = 8):
        super().__init__()
        if len(widths) != 5:
            raise ContractViolation(f"snake encoder takes 5 stage widths, got {widths}")
        self.widths = tuple(widths)
        self._stages = []
        prev = cin
        for i, w in enumerate(widths):
            block = SnakeBlock(prev, w, w, rng, conv_mode=conv_mode,
                               channel_attention=channel_attention, ratio=ratio)
            self.register_module(str(i), block)
            self._stages.append(block)
            prev = w

    def forward(self, x: Tensor) -> list[Tensor]:
        h, w = x.data.shape[2:]
        if h % 16 or w % 16:
            raise ContractViolation(f"snake encoder needs H, W divisible by 16, got {x.data.shape}")
        feats = []
        cur = x
        for i, stage in enumerate(self._stages):
            if i > 0:
                cur = max_pool2(cur)
            cur = stage(cur)
            feats.append(cur)
        return feats


def map_to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    n, l, c = x.data.shape
    if l != h * w:
        raise ContractViolation(f"token count {l} does not match {h}x{w}")
    return transpose(reshape(x, (n, h, w, c)), (0, 3, 1, 2))


def _rows(fn: Linear, x: Tensor) -> Tensor:
    """Apply a Linear over the last axis of (N, L, C)."""
    n, l, c = x.data.shape
    out = fn(reshape(x, (n * l, c)))
    return reshape(out, (n, l, out.data.shape[-1]))


class EfficientSelfAttention(Module):
    """Multi-head attention with keys/values taken from a spatially reduced map.

    The reduction is a non-overlapping RxR patch flatten followed by a linear
    map and layer norm (equivalent to a stride-R, kernel-R convolution).
    """

    def __init__(self, c: int, heads: int, reduction: int,
                 rng: np.random.Generator):
        super().__init__()
        if c % heads:
            raise ContractViolation(f"channels {c} not divisible by heads {heads}")
        self.c = c
        self.heads = heads
        self.reduction = reduction
        self.q = Linear(c, c, rng=rng)
        self.k = Linear(c, c, rng=rng)
        self.v = Linear(c, c, rng=rng)
        self.o = Linear(c, c, rng=rng)
        if reduction > 1:
            self.sr = Linear(c * reduction * reduction, c, rng=rng)
            self.sr_norm = LayerNorm(c)

    def _reduce(self, x: Tensor, h: int, w: int) -> Tensor:
        r = self.reduction
        n = x.data.shape[0]
        grid = reshape(x, (n, h // r, r, w // r, r, self.c))
        patches = reshape(transpose(grid, (0, 1, 3, 2, 4, 5)),
                          (n, (h // r) * (w // r), r * r * self.c))
        return self.sr_norm(_rows(self.sr, patches))

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        n, l, c = x.data.shape
        if l != h * w:
            raise ContractViolation(f"token count {l} does not match {h}x{w}")
        if h % self.reduction or w % self.reduction:
            raise ContractViolation(
                f"grid {h}x{w} not divisible by reduction {self.reduction}"
            )
        kv_src = self._reduce(x, h, w) if self.reduction > 1 else x
        lk = kv_src.data.shape[1]
        d = c // self.heads

        def split_heads(t, length):
            return transpose(reshape(t, (n, length, self.heads, d)), (0, 2, 1, 3))

        q = split_heads(_rows(self.q, x), l)
        k = split_heads(_rows(self.k, kv_src), lk)
        v = split_heads(_rows(self.v, kv_src), lk)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
        probs = softmax(scores, axis=-1)
        ctx = matmul(probs, v)
        merged = reshape(transpose(ctx, (0, 2, 1, 3)), (n, l, c))
        return _rows(self.o, merged)


class MixFFN(Module):
    """Linear expand, 3x3 depthwise conv in the spatial layout, gelu, project."""

    def __init__(self, c: int, rng: np.random.Generator, expansion: int = 4):
        super().__init__()
        hidden = c * expansion
        self.hidden = hidden
        self.fc1 = Linear(c, hidden, rng=rng)
        self.dw_weight = Parameter(_uniform(rng, (hidden, 3, 3), 1.0 / 3.0))
        self.dw_bias = Parameter(np.zeros(hidden, dtype=np.float32))
        self.fc2 = Linear(hidden, c, rng=rng)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        n, l, c = x.data.shape
        if l != h * w:
            raise ContractViolation(f"token count {l} does not match {h}x{w}")
        t = _rows(self.fc1, x)
        m = tokens_to_map(t, h, w)
        m = depthwise_conv3x3(m, self.dw_weight, self.dw_bias)
        t = gelu(map_to_tokens(m))
        return _rows(self.fc2, t)


class TransformerBlock(Module):
    def __init__(self, c: int, heads: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(c)
        self.attn = EfficientSelfAttention(c, heads, reduction, rng)
        self.norm2 = LayerNorm(c)
        self.ffn = MixFFN(c, rng)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.ffn(self.norm2(x), h, w)


class OverlapPatchEmbed(Module):
    """Strided overlapping convolution to tokens: k7/s4 first, k3/s2 after."""

    def __init__(self, cin: int, cout: int, first: bool, rng: np.random.Generator):
        super().__init__()
        k, s, p = (7, 4, 3) if first else (3, 2, 1)
        self.stride = s
        self.conv = Conv2d(cin, cout, k, stride=s, padding=p, rng=rng)
        self.norm = LayerNorm(cout)

    def forward(self, x: Tensor) -> tuple[Tensor, int, int]:
        m = self.conv(x)
        h, w = m.data.shape[2:]
        return self.norm(map_to_tokens(m)), h, w


class TransformerStage(Module):
    def __init__(self, cin: int, cout: int, depth: int, heads: int, reduction: int,
                 first: bool, rng: np.random.Generator):
        super().__init__()
        self.embed = OverlapPatchEmbed(cin, cout, first, rng)
        self._blocks = []
        for b in range(depth):
            blk = TransformerBlock(cout, heads, reduction, rng)
            self.register_module(str(b), blk)
            self._blocks.append(blk)
        self.norm = LayerNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        t, h, w = self.embed(x)
        for blk in self._blocks:
            t = blk(t, h, w)
        return tokens_to_map(self.norm(t), h, w)


class MixTransformerEncoder(Module):
    """Four-stage hierarchical encoder: 1/4, 1/8, 1/16, 1/32 feature maps."""

    def __init__(self, cin: int, widths, depths, heads, reductions,
                 rng: np.random.Generator):
        super().__init__()
        if not (len(widths) == len(depths) == len(heads) == len(reductions) == 4):
            raise ContractViolation("transformer encoder takes 4-entry config lists")
        self.widths = tuple(widths)
        self._stages = []
        prev = cin
        for i in range(4):
            stage = TransformerStage(prev, widths[i], depths[i], heads[i],
                                     reductions[i], first=(i == 0), rng=rng)
            self.register_module(str(i), stage)
            self._stages.append(stage)
            prev = widths[i]

    def forward(self, x: Tensor) -> list[Tensor]:
        h, w = x.data.shape[2:]
        if h % 32 or w % 32:
            raise ContractViolation(
                f"transformer encoder needs H, W divisible by 32, got {x.data.shape}"
            )
        feats = []
        cur = x
        for stage in self._stages:
            cur = stage(cur)
            feats.append(cur)
        return feats
