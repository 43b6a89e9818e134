"""Loc-Net / Seg-Net: a four-stage encoder-decoder with attention-gated skips.

Both cascade stages share this topology and differ only in input size and training data.

    stem      7x7 conv, 1 -> c0, ReLU
    encoder   per stage: channel-raising spatial conv, inverted-bottleneck blocks, skip, 2x2 max-pool
    decoder   per stage (deepest first): attention gate (or upsample + concat), spatial conv, ReLU
    head      1x1 conv -> (foreground, background) logits

"Spatial conv" is depthwise-separable unless the depthwise ablation swaps it for a dense conv.
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from casunext.attention import AttentionGateParams, attention_gate, init_attention_gate
from casunext.errors import CheckpointError, ConfigError, ShapeError
from casunext.layers import (
    Conv2dParams,
    InvertedBottleneckParams,
    SpatialParams,
    conv2d,
    init_bottleneck,
    init_conv2d,
    init_spatial,
    inverted_bottleneck,
    maxpool2x2,
    named_parameters,
    param_count,
    pointwise_head,
    spatial_conv,
    upsample_concat,
)
from casunext.tensor import Tensor, encode_tensor, load_tensor, no_grad, relu, rng_for, save_tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yaml"
TENSOR_SUFFIX = ".tensor"


@dataclass
class ModelConfig:
    input_size: int = 128
    stem_kernel: int = 7
    kernel_size: int = 7
    channel_schedule: tuple[int, ...] = (16, 32, 64, 128)
    stage_depths: tuple[int, ...] = (1, 1, 3, 1)
    expansion_ratio: int = 4
    width_multiplier: float = 1.0
    use_attention: bool = True
    use_depthwise: bool = True
    use_cascade: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        self.channel_schedule = tuple(int(c) for c in self.channel_schedule)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.validate()

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(max(1, round(c * self.width_multiplier)) for c in self.channel_schedule)

    def validate(self) -> None:
        if self.input_size <= 0 or self.input_size % 16:
            raise ConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if len(self.channel_schedule) != 4 or len(self.stage_depths) != 4:
            raise ConfigError("channel_schedule and stage_depths need exactly four entries")
        if any(d < 0 for d in self.stage_depths):
            raise ConfigError(f"stage_depths must be non-negative, got {self.stage_depths}")
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be positive, got {self.width_multiplier}")
        chans = self.channels
        if any(b <= a for a, b in zip(chans, chans[1:])):
            raise ConfigError(f"channel schedule must be strictly increasing, got {chans}")
        for name in ("stem_kernel", "kernel_size"):
            k = getattr(self, name)
            if k <= 0 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {k}")
        if self.expansion_ratio <= 0:
            raise ConfigError(f"expansion_ratio must be positive, got {self.expansion_ratio}")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["channel_schedule"] = list(self.channel_schedule)
        data["stage_depths"] = list(self.stage_depths)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EncoderStage:
    entry: SpatialParams
    blocks: list[InvertedBottleneckParams] = field(default_factory=list)


@dataclass
class DecoderStage:
    gate: AttentionGateParams | None
    conv: SpatialParams


@dataclass
class Network:
    config: ModelConfig
    stem: Conv2dParams
    encoder: list[EncoderStage]
    decoder: list[DecoderStage]  # indexed by stage, decoder[3] runs first
    head: Conv2dParams

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("stem", "encoder", "decoder", "head"):
            yield from named_parameters(getattr(self, name), name)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self, include_bias: bool = True) -> int:
        return sum(param_count(getattr(self, n), include_bias) for n in ("stem", "encoder", "decoder", "head"))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()


def build(config: ModelConfig) -> Network:
    """Deterministic network for `config`; every layer draws from its own named RNG stream."""
    config.validate()
    chans, k, seed = config.channels, config.kernel_size, config.seed

    stem = init_conv2d(rng_for(seed, "stem"), 1, chans[0], config.stem_kernel)
    encoder = []
    for i, depth in enumerate(config.stage_depths):
        c_in = chans[0] if i == 0 else chans[i - 1]
        entry = init_spatial(rng_for(seed, f"encoder.{i}.entry"), c_in, chans[i], k, config.use_depthwise)
        blocks = [
            init_bottleneck(rng_for(seed, f"encoder.{i}.blocks.{j}"), chans[i], k, config.expansion_ratio,
                            config.use_depthwise)
            for j in range(depth)
        ]
        encoder.append(EncoderStage(entry, blocks))

    decoder = []
    for i in range(4):
        deep = chans[min(i + 1, 3)]
        gate = init_attention_gate(rng_for(seed, f"decoder.{i}.gate"), deep, chans[i]) if config.use_attention else None
        conv = init_spatial(rng_for(seed, f"decoder.{i}.conv"), chans[i] + deep, chans[i], k, config.use_depthwise)
        decoder.append(DecoderStage(gate, conv))

    head = init_conv2d(rng_for(seed, "head"), chans[0], 2, 1)
    net = Network(config, stem, encoder, decoder, head)
    logger.debug("Built network: input %d, channels %s, %d parameters", config.input_size, chans, net.param_count())
    return net


def forward(net: Network, x: Tensor, trace: dict[str, Tensor] | None = None) -> Tensor:
    """Logits N×2×S×S for an N×1×S×S batch. `trace` collects named intermediate activations."""
    size = net.config.input_size
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != size or x.shape[3] != size:
        raise ShapeError(f"network expects N×1×{size}×{size} input, got {x.shape}")

    h = relu(conv2d(x, net.stem))
    skips = []
    for i, stage in enumerate(net.encoder):
        h = spatial_conv(h, stage.entry)
        for block in stage.blocks:
            h = inverted_bottleneck(h, block)
        skips.append(h)
        h = maxpool2x2(h)
        if trace is not None:
            trace[f"encoder.{i}"] = skips[-1]
    if trace is not None:
        trace["bottleneck"] = h

    for i in reversed(range(4)):
        stage = net.decoder[i]
        z = attention_gate(h, skips[i], stage.gate) if stage.gate is not None else upsample_concat(h, skips[i])
        assert isinstance(z, Tensor)
        h = relu(spatial_conv(z, stage.conv))
        if trace is not None:
            trace[f"decoder.{i}"] = h

    return pointwise_head(h, net.head)


def logits_to_mask(logits: np.ndarray) -> np.ndarray:
    """Foreground iff the foreground logit is strictly greater; ties go to background."""
    return logits[:, 0] > logits[:, 1]


def predict(net: Network, images: np.ndarray) -> np.ndarray:
    """Boolean masks N×S×S for an N×S×S stack of preprocessed images."""
    with no_grad():
        logits = forward(net, Tensor(images[:, None, :, :]))
    return logits_to_mask(logits.data)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_digest(net: Network) -> str:
    digest = hashlib.sha256()
    for name, tensor in net.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(encode_tensor(tensor))
    return digest.hexdigest()


def save_checkpoint(net: Network, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for name, tensor in net.named_parameters():
        save_tensor(directory / f"{name}{TENSOR_SUFFIX}", tensor)
        names.append(name)
    manifest = {
        "config": net.config.to_dict(),
        "tensors": names,
        "sha256": checkpoint_digest(net),
    }
    (directory / MANIFEST_NAME).write_text(yaml.safe_dump(manifest, sort_keys=False))
    logger.info("Saved checkpoint: %s (%d tensors)", directory, len(names))
    return directory


def load_checkpoint(directory: Path) -> Network:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"no {MANIFEST_NAME} in {directory}")
    manifest = yaml.safe_load(manifest_path.read_text()) or {}
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{manifest_path}: malformed manifest ({exc})") from None

    net = build(config)
    params = dict(net.named_parameters())
    if sorted(params) != sorted(manifest.get("tensors", [])):
        raise CheckpointError(f"{directory}: tensor names do not match the network built from its config")
    for name, param in params.items():
        loaded = load_tensor(directory / f"{name}{TENSOR_SUFFIX}")
        if loaded.shape != param.shape:
            raise CheckpointError(f"{directory}: {name} has shape {loaded.shape}, expected {param.shape}")
        param.data = loaded.data.copy()

    if checkpoint_digest(net) != manifest.get("sha256"):
        raise CheckpointError(f"{directory}: checksum mismatch, checkpoint is corrupt")
    logger.info("Loaded checkpoint: %s", directory)
    return net
