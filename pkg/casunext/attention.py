"""Attention gate for decoder skip connections.

The gate fuses a deep feature map x1 (half resolution, C1 channels) with the encoder skip x2
(full resolution, C2 channels):

    u = upsample(x1);  c = W1 u;  c1, c2, c3 = split(c)
    s = W2 (c1 + x2);  y1 = s * x2;  y2 = sigmoid(c2) * tanh(c3)
    y = W3 sigmoid(y1 + y2);  z = concat(y, u)

W1, W2 and W3 are per-position linear maps (1x1 convs with bias); products are elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from casunext.errors import ShapeError
from casunext.layers import Conv2dParams, bilinear_upsample2x, conv2d, init_conv2d
from casunext.tensor import Tensor, concat, sigmoid, tanh


@dataclass
class AttentionGateParams:
    w1: Conv2dParams  # C1 -> 3*C2
    w2: Conv2dParams  # C2 -> C2
    w3: Conv2dParams  # C2 -> C2

    @property
    def low_channels(self) -> int:
        return self.w2.in_channels

    @property
    def high_channels(self) -> int:
        return self.w1.in_channels


@dataclass
class GateActivations:
    c: Tensor
    c1: Tensor
    c2: Tensor
    c3: Tensor
    s: Tensor
    y1: Tensor
    y2: Tensor
    gate: Tensor  # sigmoid(y1 + y2), before W3
    y: Tensor
    z: Tensor


def init_attention_gate(rng: np.random.Generator, high_channels: int, low_channels: int) -> AttentionGateParams:
    return AttentionGateParams(
        w1=init_conv2d(rng, high_channels, 3 * low_channels, 1),
        w2=init_conv2d(rng, low_channels, low_channels, 1),
        w3=init_conv2d(rng, low_channels, low_channels, 1),
    )


def _check(x1: Tensor, x2: Tensor, p: AttentionGateParams) -> int:
    if x1.ndim != 4 or x2.ndim != 4:
        raise ShapeError(f"attention gate expects N×C×H×W inputs, got {x1.shape} and {x2.shape}")
    if x1.shape[0] != x2.shape[0] or 2 * x1.shape[2] != x2.shape[2] or 2 * x1.shape[3] != x2.shape[3]:
        raise ShapeError(f"attention gate: x1 {x1.shape} must be exactly half the spatial size of x2 {x2.shape}")
    c2 = x2.shape[1]
    if x1.shape[1] != p.high_channels or c2 != p.low_channels or p.w1.out_channels != 3 * c2:
        raise ShapeError(
            f"attention gate: inputs carry {x1.shape[1]}/{c2} channels, parameters expect "
            f"{p.high_channels}/{p.low_channels} with W1 -> {p.w1.out_channels}"
        )
    return c2


def attention_gate(
    x1: Tensor, x2: Tensor, p: AttentionGateParams, return_activations: bool = False
) -> Tensor | tuple[Tensor, GateActivations]:
    """Gated skip connection producing C2 + C1 channels at the resolution of x2."""
    c2 = _check(x1, x2, p)
    u = bilinear_upsample2x(x1)
    c = conv2d(u, p.w1)
    part1, part2, part3 = c[:, :c2], c[:, c2 : 2 * c2], c[:, 2 * c2 :]
    s = conv2d(part1 + x2, p.w2)
    y1 = s * x2
    y2 = sigmoid(part2) * tanh(part3)
    gate = sigmoid(y1 + y2)
    y = conv2d(gate, p.w3)
    z = concat([y, u], axis=1)
    if return_activations:
        return z, GateActivations(c, part1, part2, part3, s, y1, y2, gate, y, z)
    return z
