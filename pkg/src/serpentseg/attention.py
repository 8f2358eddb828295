"""Channel and spatial attention.

``WeightedChannelAttention`` runs independent bottleneck MLPs over the
average- and max-pooled channel descriptors and mixes them with learnable
per-channel weights before the sigmoid. ``ChannelAttention`` is the plain
shared-MLP variant kept for ablations. ``SpatialAttention`` is the stacked
mean/max map followed by a 7x7 convolution and sigmoid.
"""
from __future__ import annotations

import numpy as np

from .module import Module, Parameter, _uniform
from .tensor import (
    ContractViolation,
    Tensor,
    concat,
    conv2d,
    global_pool,
    linear,
    max_along,
    mul,
    relu,
    reshape,
    sigmoid,
    tmean,
)


def _pooled_rows(x: Tensor) -> tuple[Tensor, Tensor]:
    n, c = x.data.shape[:2]
    favg = reshape(global_pool(x, "avg"), (n, c))
    fmax = reshape(global_pool(x, "max"), (n, c))
    return favg, fmax


class WeightedChannelAttention(Module):
    """Per-channel gate in (0, 1) from weighted avg/max MLP branches."""

    def __init__(self, channels: int, ratio: int = 8,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if channels % ratio:
            raise ContractViolation(
                f"reduction ratio {ratio} does not divide {channels} channels"
            )
        self.channels = channels
        hidden = channels // ratio
        b0 = 1.0 / np.sqrt(channels)
        b1 = 1.0 / np.sqrt(hidden)
        self._avg_w0 = self.register_parameter(
            "avg.w0", Parameter(_uniform(rng, (hidden, channels), b0)))
        self._avg_w1 = self.register_parameter(
            "avg.w1", Parameter(_uniform(rng, (channels, hidden), b1)))
        self._max_w0 = self.register_parameter(
            "max.w0", Parameter(_uniform(rng, (hidden, channels), b0)))
        self._max_w1 = self.register_parameter(
            "max.w1", Parameter(_uniform(rng, (channels, hidden), b1)))
        # unit branch weights recover plain channel attention at init
        self.wavg = Parameter(np.ones(channels, dtype=np.float32))
        self.wmax = Parameter(np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.data.shape[:2]
        if c != self.channels:
            raise ContractViolation(
                f"input {x.data.shape} does not match {self.channels} channels"
            )
        favg, fmax = _pooled_rows(x)
        m_avg = linear(relu(linear(favg, self._avg_w0)), self._avg_w1)
        m_max = linear(relu(linear(fmax, self._max_w0)), self._max_w1)
        mixed = mul(m_avg, reshape(self.wavg, (1, c))) + mul(m_max, reshape(self.wmax, (1, c)))
        return reshape(sigmoid(mixed), (n, c, 1, 1))


class ChannelAttention(Module):
    """Shared-MLP channel attention: sigmoid(MLP(avg) + MLP(max))."""

    def __init__(self, channels: int, ratio: int = 8,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if channels % ratio:
            raise ContractViolation(
                f"reduction ratio {ratio} does not divide {channels} channels"
            )
        self.channels = channels
        hidden = channels // ratio
        self.w0 = Parameter(_uniform(rng, (hidden, channels), 1.0 / np.sqrt(channels)))
        self.w1 = Parameter(_uniform(rng, (channels, hidden), 1.0 / np.sqrt(hidden)))

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.data.shape[:2]
        favg, fmax = _pooled_rows(x)
        m = linear(relu(linear(favg, self.w0)), self.w1) + \
            linear(relu(linear(fmax, self.w0)), self.w1)
        return reshape(sigmoid(m), (n, c, 1, 1))


class SpatialAttention(Module):
    """Per-pixel gate from the stacked channel-mean and channel-max maps."""

    def __init__(self, rng: np.random.Generator | None = None):
        super().__init__()
        self.kernel = Parameter(_uniform(rng, (1, 2, 7, 7), 1.0 / np.sqrt(2 * 49)))
        self.bias = Parameter(np.zeros(1, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        mean_map = tmean(x, axis=1, keepdims=True)
        max_map = max_along(x, axis=1, keepdims=True)
        stacked = concat([mean_map, max_map], axis=1)
        return sigmoid(conv2d(stacked, self.kernel, self.bias, padding=3))


def apply_attention(x: Tensor, channel_att: Tensor, spatial_att: Tensor) -> Tensor:
    """Gate features channel-wise then spatially (in that order)."""
    n, c, h, w = x.data.shape
    if channel_att.data.shape != (n, c, 1, 1):
        raise ContractViolation(
            f"channel attention {channel_att.data.shape} does not match input {x.data.shape}"
        )
    if spatial_att.data.shape != (n, 1, h, w):
        raise ContractViolation(
            f"spatial attention {spatial_att.data.shape} does not match input {x.data.shape}"
        )
    return mul(mul(x, channel_att), spatial_att)
