"""Convolutional building blocks on top of `casunext.tensor`.

Layouts are N×C×H×W throughout. Parameter bundles are plain dataclasses of tensors so that a
network is just a tree of them; `named_parameters` walks that tree and yields stable dotted names
used by the optimizer and by checkpoints.
"""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass, fields, is_dataclass
from functools import lru_cache

import numpy as np

from casunext.errors import ShapeError
from casunext.tensor import DTYPE, Function, Tensor, concat, parameter, relu


# ---------------------------------------------------------------------------
# Parameter bundles
# ---------------------------------------------------------------------------


@dataclass
class Conv2dParams:
    kernel: Tensor  # C_out x C_in x K x K
    bias: Tensor  # C_out
    stride: int = 1
    padding: int = 0

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]


@dataclass
class DepthwiseParams:
    kernel: Tensor  # C x 1 x K x K, one filter per channel
    bias: Tensor  # C
    padding: int = 0

    @property
    def channels(self) -> int:
        return self.kernel.shape[0]


@dataclass
class DepthwiseSeparableParams:
    depthwise: DepthwiseParams
    pointwise: Conv2dParams

    @property
    def in_channels(self) -> int:
        return self.depthwise.channels

    @property
    def out_channels(self) -> int:
        return self.pointwise.out_channels


@dataclass
class NormParams:
    """Channel-wise layer normalization: statistics over C at every position."""

    scale: Tensor
    shift: Tensor
    eps: float = 1e-6


@dataclass
class InvertedBottleneckParams:
    expand: Conv2dParams  # 1x1, C -> rC
    norm: NormParams
    spatial: DepthwiseParams | Conv2dParams  # KxK on rC channels; dense when depthwise is ablated
    project: Conv2dParams  # 1x1, rC -> C

    @property
    def channels(self) -> int:
        return self.expand.in_channels


SpatialParams = Conv2dParams | DepthwiseSeparableParams


def named_parameters(node: object, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield (dotted name, tensor) for every trainable tensor below `node`, in field order."""
    if isinstance(node, Tensor):
        if node.requires_grad:
            yield prefix, node
    elif is_dataclass(node) and not isinstance(node, type):
        for f in fields(node):
            yield from named_parameters(getattr(node, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(node, (list, tuple)):
        for i, child in enumerate(node):
            yield from named_parameters(child, f"{prefix}.{i}" if prefix else str(i))


def param_count(node: object, include_bias: bool = True) -> int:
    total = 0
    for name, tensor in named_parameters(node):
        if not include_bias and name.rsplit(".", 1)[-1] == "bias":
            continue
        total += tensor.size
    return total


def separable_param_count(kernel_size: int, in_channels: int, out_channels: int) -> int:
    """Weights of a depthwise-separable conv, biases excluded."""
    return kernel_size * kernel_size * in_channels + in_channels * out_channels


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


def same_padding(kernel_size: int) -> int:
    if kernel_size % 2 == 0:
        raise ShapeError(f"'same' padding needs an odd kernel, got {kernel_size}")
    return (kernel_size - 1) // 2


def init_conv2d(rng: np.random.Generator, in_channels: int, out_channels: int, kernel_size: int) -> Conv2dParams:
    kernel = _uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), in_channels * kernel_size**2)
    return Conv2dParams(kernel, parameter(np.zeros(out_channels)), stride=1, padding=same_padding(kernel_size))


def init_depthwise(rng: np.random.Generator, channels: int, kernel_size: int) -> DepthwiseParams:
    kernel = _uniform(rng, (channels, 1, kernel_size, kernel_size), kernel_size**2)
    return DepthwiseParams(kernel, parameter(np.zeros(channels)), padding=same_padding(kernel_size))


def init_separable(
    rng: np.random.Generator, in_channels: int, out_channels: int, kernel_size: int
) -> DepthwiseSeparableParams:
    return DepthwiseSeparableParams(
        depthwise=init_depthwise(rng, in_channels, kernel_size),
        pointwise=init_conv2d(rng, in_channels, out_channels, 1),
    )


def init_spatial(
    rng: np.random.Generator, in_channels: int, out_channels: int, kernel_size: int, use_depthwise: bool
) -> SpatialParams:
    if use_depthwise:
        return init_separable(rng, in_channels, out_channels, kernel_size)
    return init_conv2d(rng, in_channels, out_channels, kernel_size)


def init_norm(channels: int) -> NormParams:
    return NormParams(parameter(np.ones(channels)), parameter(np.zeros(channels)))


def init_bottleneck(
    rng: np.random.Generator, channels: int, kernel_size: int, expansion_ratio: int, use_depthwise: bool
) -> InvertedBottleneckParams:
    hidden = channels * expansion_ratio
    spatial: DepthwiseParams | Conv2dParams = (
        init_depthwise(rng, hidden, kernel_size) if use_depthwise else init_conv2d(rng, hidden, hidden, kernel_size)
    )
    return InvertedBottleneckParams(
        expand=init_conv2d(rng, channels, hidden, 1),
        norm=init_norm(hidden),
        spatial=spatial,
        project=init_conv2d(rng, hidden, channels, 1),
    )


# ---------------------------------------------------------------------------
# Convolution primitives
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel_size: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel_size) // stride + 1


def _check_nchw(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an N×C×H×W input, got shape {x.shape}")


def _window(out_size: int, offset: int, stride: int) -> slice:
    return slice(offset, offset + stride * (out_size - 1) + 1, stride)


class Conv2d(Function):
    """Cross-correlation, accumulated one kernel offset at a time."""

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
        _check_nchw(x, "conv2d")
        n, c_in, h, wd = x.shape
        c_out, k_in, k, _ = w.shape
        if c_in != k_in:
            raise ShapeError(f"conv2d: input has {c_in} channels, kernel expects {k_in}")
        ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"conv2d: {h}x{wd} input too small for kernel {k} with padding {padding}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        out = np.zeros((n, c_out, ho, wo), dtype=DTYPE)
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, _window(ho, di, stride), _window(wo, dj, stride)]
                out += np.einsum("nchw,oc->nohw", patch, w[:, :, di, dj], optimize=True)
        self.xp, self.w = xp, w
        self.stride, self.padding, self.in_hw = stride, padding, (h, wd)
        return out + b[None, :, None, None]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xp, w, s, p = self.xp, self.w, self.stride, self.padding
        k = w.shape[2]
        ho, wo = grad.shape[2:]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for di in range(k):
            for dj in range(k):
                rows, cols = _window(ho, di, s), _window(wo, dj, s)
                gw[:, :, di, dj] = np.einsum("nohw,nchw->oc", grad, xp[:, :, rows, cols], optimize=True)
                gxp[:, :, rows, cols] += np.einsum("nohw,oc->nchw", grad, w[:, :, di, dj], optimize=True)
        h, wd = self.in_hw
        return gxp[:, :, p : p + h, p : p + wd], gw, grad.sum(axis=(0, 2, 3))


class DepthwiseConv2d(Function):
    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: int) -> np.ndarray:
        _check_nchw(x, "depthwise conv")
        n, c, h, wd = x.shape
        if w.shape[0] != c or w.shape[1] != 1:
            raise ShapeError(f"depthwise conv: input has {c} channels, kernel shape is {w.shape}")
        k = w.shape[2]
        ho, wo = conv_output_size(h, k, 1, padding), conv_output_size(wd, k, 1, padding)
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"depthwise conv: {h}x{wd} input too small for kernel {k} with padding {padding}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        out = np.zeros((n, c, ho, wo), dtype=DTYPE)
        for di in range(k):
            for dj in range(k):
                out += xp[:, :, di : di + ho, dj : dj + wo] * w[None, :, 0, di, dj, None, None]
        self.xp, self.w, self.padding, self.in_hw = xp, w, padding, (h, wd)
        return out + b[None, :, None, None]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xp, w, p = self.xp, self.w, self.padding
        k = w.shape[2]
        ho, wo = grad.shape[2:]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for di in range(k):
            for dj in range(k):
                gw[:, 0, di, dj] = (grad * xp[:, :, di : di + ho, dj : dj + wo]).sum(axis=(0, 2, 3))
                gxp[:, :, di : di + ho, dj : dj + wo] += grad * w[None, :, 0, di, dj, None, None]
        h, wd = self.in_hw
        return gxp[:, :, p : p + h, p : p + wd], gw, grad.sum(axis=(0, 2, 3))


class MaxPool2x2(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_nchw(x, "maxpool2x2")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2x2 needs even spatial sizes, got {h}x{w}")
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        # argmax returns the first maximum; window order is row-major
        self.argmax = windows.argmax(axis=-1)[..., None]
        self.in_shape = x.shape
        return np.take_along_axis(windows, self.argmax, axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        n, c, h, w = self.in_shape
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(routed, self.argmax, grad[..., None], axis=-1)
        return (routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)


@lru_cache(maxsize=64)
def interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    """out_size × in_size bilinear weights, half-pixel centers, edge-clamped.

    Output index i samples the source at (i + 0.5) * in/out - 0.5.
    """
    if in_size < 1 or out_size < 1:
        raise ShapeError(f"cannot resize {in_size} -> {out_size}")
    m = np.zeros((out_size, in_size), dtype=DTYPE)
    for i in range(out_size):
        src = max((i + 0.5) * in_size / out_size - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0 if i0 < in_size - 1 else 0.0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.flags.writeable = False
    return m


class Resize2d(Function):
    def forward(self, x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
        _check_nchw(x, "bilinear resize")
        self.uh = interpolation_matrix(x.shape[2], out_h)
        self.uw = interpolation_matrix(x.shape[3], out_w)
        return np.einsum("oh,nchw,pw->ncop", self.uh, x, self.uw, optimize=True)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.einsum("oh,ncop,pw->nchw", self.uh, grad, self.uw, optimize=True),)


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a plain 2-D array with the same sampling convention as the layers."""
    return interpolation_matrix(image.shape[0], out_h) @ image @ interpolation_matrix(image.shape[1], out_w).T


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a boolean mask."""
    in_h, in_w = mask.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * in_h / out_h).astype(int), in_h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * in_w / out_w).astype(int), in_w - 1)
    return mask[np.ix_(rows, cols)]


# ---------------------------------------------------------------------------
# Layer functions
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    return Conv2d.apply(x, p.kernel, p.bias, stride=p.stride, padding=p.padding)


def depthwise_conv(x: Tensor, p: DepthwiseParams) -> Tensor:
    return DepthwiseConv2d.apply(x, p.kernel, p.bias, padding=p.padding)


def depthwise_separable_conv(x: Tensor, p: DepthwiseSeparableParams) -> Tensor:
    return conv2d(depthwise_conv(x, p.depthwise), p.pointwise)


def spatial_conv(x: Tensor, p: SpatialParams | DepthwiseParams) -> Tensor:
    if isinstance(p, DepthwiseSeparableParams):
        return depthwise_separable_conv(x, p)
    if isinstance(p, DepthwiseParams):
        return depthwise_conv(x, p)
    return conv2d(x, p)


def maxpool2x2(x: Tensor) -> Tensor:
    return MaxPool2x2.apply(x)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return Resize2d.apply(x, out_h=out_h, out_w=out_w)


def bilinear_upsample2x(x: Tensor) -> Tensor:
    return bilinear_resize(x, 2 * x.shape[2], 2 * x.shape[3])


def pointwise_head(x: Tensor, p: Conv2dParams) -> Tensor:
    """Two-channel logits, channel 0 foreground and channel 1 background."""
    if p.kernel_size != 1 or p.out_channels != 2:
        raise ShapeError(f"head must be a 1x1 conv to 2 channels, got kernel {tuple(p.kernel.shape)}")
    return conv2d(x, p)


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    c = x.shape[1]
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    normed = centered * (var + p.eps) ** -0.5
    return normed * p.scale.reshape(1, c, 1, 1) + p.shift.reshape(1, c, 1, 1)


def inverted_bottleneck(x: Tensor, p: InvertedBottleneckParams) -> Tensor:
    if x.shape[1] != p.channels:
        raise ShapeError(f"inverted bottleneck: input has {x.shape[1]} channels, block expects {p.channels}")
    h = layer_norm(conv2d(x, p.expand), p.norm)
    h = relu(spatial_conv(relu(h), p.spatial))
    return x + conv2d(h, p.project)


def compose_dense(p: DepthwiseSeparableParams) -> Conv2dParams:
    """The single dense conv equal to depthwise followed by pointwise."""
    dw, pw = p.depthwise.kernel.data[:, 0], p.pointwise.kernel.data[:, :, 0, 0]
    kernel = pw[:, :, None, None] * dw[None, :, :, :]
    bias = pw @ p.depthwise.bias.data + p.pointwise.bias.data
    return Conv2dParams(Tensor(kernel), Tensor(bias), stride=1, padding=p.depthwise.padding)


def upsample_concat(x1: Tensor, x2: Tensor) -> Tensor:
    """Gateless skip connection: concat(x2, upsample(x1))."""
    return concat([x2, bilinear_upsample2x(x1)], axis=1)
