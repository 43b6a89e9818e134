"""Losses, Adam, the stage training loop, cascade evaluation and the ablation harness."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from casunext.cascade import (
    GeometrySpec,
    StageSample,
    cascade_batch,
    crop,
    prepare_loc_samples,
    prepare_seg_samples,
    preprocess,
    preprocess_mask,
    refeed_samples,
)
from casunext.errors import ConfigError, DataError, ShapeError, TrainingDivergedError
from casunext.metrics import ConfusionCounts, MaskPair, MetricsReport, evaluate_pairs
from casunext.network import ModelConfig, Network, build, forward, predict
from casunext.synthetic_data.generate import SegSample
from casunext.tensor import Tensor, log_softmax, rng_for, softmax

logger = logging.getLogger(__name__)

LOSSES = ("ce+dice", "ce", "dice")
ROLES = {"loc": "Loc-Net", "seg": "Seg-Net", "full": "Full-frame"}
WINDOW_SOURCES = ("predicted", "truth")


@dataclass
class TrainConfig:
    epochs_loc: int = 20
    epochs_seg: int = 40
    batch_size: int = 4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: str = "ce+dice"
    dice_smooth: float = 1.0
    val_fraction: float = 0.2
    refeed: bool = True
    eval_workers: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.epochs_loc <= 0 or self.epochs_seg <= 0:
            raise ConfigError(f"epochs must be positive, got {self.epochs_loc}/{self.epochs_seg}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.adam_eps <= 0:
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be positive")

    def epochs_for(self, role: str) -> int:
        return self.epochs_loc if role == "loc" else self.epochs_seg

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _one_hot(masks: np.ndarray) -> np.ndarray:
    """N×H×W boolean masks to N×2×H×W targets in (foreground, background) order."""
    fg = masks.astype(np.float64)
    return np.stack([fg, 1.0 - fg], axis=1)


def cross_entropy(logits: Tensor, masks: np.ndarray) -> Tensor:
    """Mean per-pixel softmax cross-entropy."""
    n, _, h, w = logits.shape
    return -(log_softmax(logits, axis=1) * _one_hot(masks)).sum() * (1.0 / (n * h * w))


def soft_dice_loss(logits: Tensor, masks: np.ndarray, smooth: float = 1.0) -> Tensor:
    prob = softmax(logits, axis=1)[:, 0]
    truth = masks.astype(np.float64)
    intersection = (prob * truth).sum()
    return 1.0 - (2.0 * intersection + smooth) / (prob.sum() + float(truth.sum()) + smooth)


def segmentation_loss(logits: Tensor, masks: np.ndarray, kind: str = "ce+dice", smooth: float = 1.0) -> Tensor:
    if logits.shape[0] != masks.shape[0] or logits.shape[2:] != masks.shape[1:]:
        raise ShapeError(f"logits {logits.shape} do not match masks {masks.shape}")
    if kind == "ce":
        return cross_entropy(logits, masks)
    if kind == "dice":
        return soft_dice_loss(logits, masks, smooth)
    if kind == "ce+dice":
        return cross_entropy(logits, masks) + soft_dice_loss(logits, masks, smooth)
    raise ConfigError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self) -> None:
        self.steps += 1
        correction1 = 1.0 - self.beta1**self.steps
        correction2 = 1.0 - self.beta2**self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_dice: float
    val_miou: float
    wall_time: float


@dataclass
class TrainResult:
    net: Network
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def write_log(self, path: Path) -> Path:
        Path(path).write_text("".join(json.dumps(asdict(r)) + "\n" for r in self.history))
        return Path(path)


def _hash_key(sample_id: str) -> str:
    return hashlib.sha256(sample_id.encode("utf-8")).hexdigest()


def split_validation(samples: Sequence[StageSample], fraction: float) -> tuple[list[StageSample], list[StageSample]]:
    """Hash-ordered train/validation split; with too few samples validation reuses the training set."""
    ordered = sorted(samples, key=lambda s: _hash_key(s.id))
    n_val = int(len(ordered) * fraction)
    if n_val == 0 or n_val == len(ordered):
        return list(samples), list(samples)
    return ordered[: len(ordered) - n_val], ordered[len(ordered) - n_val :]


def _stack(samples: Sequence[StageSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def validation_scores(net: Network, samples: Sequence[StageSample], batch_size: int = 8) -> tuple[float, float]:
    """Mean Dice and mean MIoU over samples."""
    dices, mious = [], []
    for start in range(0, len(samples), batch_size):
        images, masks = _stack(samples[start : start + batch_size])
        for pred, truth in zip(predict(net, images), masks):
            counts = ConfusionCounts.from_masks(pred, truth)
            dices.append(counts.dice())
            mious.append(counts.miou())
    return float(np.mean(dices)), float(np.mean(mious))


def train(
    net: Network,
    dataset: Sequence[StageSample],
    config: TrainConfig,
    role: str = "loc",
    epochs: int | None = None,
    val_samples: Sequence[StageSample] | None = None,
) -> TrainResult:
    """Mini-batch Adam on `dataset`; the returned network holds the best-validation parameters."""
    if not dataset:
        raise DataError("cannot train on an empty dataset")
    size = net.config.input_size
    if any(s.image.shape != (size, size) for s in dataset):
        raise ShapeError(f"training images must be {size}x{size} for this network")
    label = ROLES.get(role, role)
    epochs = epochs or config.epochs_for(role)
    if val_samples is None:
        train_samples, val_samples = split_validation(dataset, config.val_fraction)
    elif not val_samples:
        raise ConfigError(f"{label}: validation set is empty")
    else:
        train_samples = list(dataset)

    named = list(net.named_parameters())
    optimizer = Adam([t for _, t in named], config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    result = TrainResult(net)
    best_dice, best_params = -math.inf, None
    started = time.perf_counter()

    for epoch in range(1, epochs + 1):
        order = rng_for(config.seed, "shuffle", role, str(epoch)).permutation(len(train_samples))
        losses = []
        for step, start in enumerate(range(0, len(order), config.batch_size), start=1):
            images, masks = _stack([train_samples[i] for i in order[start : start + config.batch_size]])
            loss = segmentation_loss(forward(net, Tensor(images[:, None])), masks, config.loss, config.dice_smooth)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"{label}: loss became {value} at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(value)

        val_dice, val_miou = validation_scores(net, val_samples)
        record = EpochRecord(epoch, float(np.mean(losses)), val_dice, val_miou, time.perf_counter() - started)
        result.history.append(record)
        logger.info("%s: epoch %d/%d loss=%.4f val_dice=%.4f", label, epoch, epochs, record.loss, val_dice)
        if val_dice > best_dice:
            best_dice, result.best_epoch = val_dice, epoch
            best_params = {name: t.data.copy() for name, t in named}

    assert best_params is not None
    for name, t in named:
        t.data = best_params[name]
    optimizer.zero_grad()
    logger.info("%s: best val_dice=%.4f at epoch %d", label, best_dice, result.best_epoch)
    return result


def stage_config(base: ModelConfig, role: str, geometry: GeometrySpec) -> ModelConfig:
    size = geometry.crop_to if role == "seg" else geometry.resize_to
    return replace(base, input_size=size)


def stage_samples(role: str, phantoms: Sequence[SegSample], geometry: GeometrySpec) -> list[StageSample]:
    if role == "seg":
        return prepare_seg_samples(phantoms, geometry)
    if role in ("loc", "full"):
        return prepare_loc_samples(phantoms, geometry)
    raise ConfigError(f"unknown role {role!r}, expected one of {sorted(ROLES)}")


def train_stage(
    role: str,
    phantoms: Sequence[SegSample],
    geometry: GeometrySpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epochs: int | None = None,
) -> TrainResult:
    """Build and train one cascade stage from phantoms of the training split.

    Loc-Net training additionally sees the ground-truth crops re-fed at full-frame size.
    """
    samples = stage_samples(role, phantoms, geometry)
    train_part, val_part = split_validation(samples, train_config.val_fraction)
    if role == "loc" and train_config.refeed:
        train_part = refeed_samples(train_part, geometry)
    net = build(stage_config(model_config, role, geometry))
    return train(net, train_part, train_config, role=role, epochs=epochs, val_samples=val_part)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(net: Network, samples: Sequence[StageSample], stage: str = "full", workers: int = 1) -> MetricsReport:
    pairs = []
    for start in range(0, len(samples), 8):
        chunk = samples[start : start + 8]
        images, masks = _stack(chunk)
        for s, pred, truth in zip(chunk, predict(net, images), masks):
            pairs.append(MaskPair(s.id, pred, truth, stage))
    return evaluate_pairs(pairs, workers)


def evaluate_cascade(
    loc_net: Network,
    seg_net: Network,
    phantoms: Sequence[SegSample],
    geometry: GeometrySpec,
    window_source: str = "predicted",
    workers: int = 1,
    batch_size: int = 8,
) -> MetricsReport:
    """Per-sample `loc`, `seg` and `full` metric groups on the cascade output."""
    if window_source not in WINDOW_SOURCES:
        raise ConfigError(f"window_source must be one of {WINDOW_SOURCES}, got {window_source!r}")
    pairs: list[MaskPair] = []
    fallbacks = 0
    for start in range(0, len(phantoms), batch_size):
        chunk = phantoms[start : start + batch_size]
        images = np.stack([preprocess(p.image, geometry) for p in chunk])
        truths = [preprocess_mask(p.mask, geometry) for p in chunk]
        results = cascade_batch(loc_net, seg_net, images, geometry, truths if window_source == "truth" else None)
        for p, truth, r in zip(chunk, truths, results):
            fallbacks += r.window.fallback
            meta = {"view_tag": p.view_tag, "regime": p.regime}
            pairs.append(MaskPair(p.id, r.loc_mask, truth, "loc", **meta))
            pairs.append(MaskPair(p.id, r.fine_mask_crop, crop(truth, r.window), "seg", **meta))
            pairs.append(MaskPair(p.id, r.fine_mask_full, truth, "full", **meta))
    if fallbacks:
        logger.warning("Cascade: %d of %d samples used the frame-centre fallback", fallbacks, len(phantoms))
    return evaluate_pairs(pairs, workers)


def evaluate_full_frame(
    net: Network, phantoms: Sequence[SegSample], geometry: GeometrySpec, workers: int = 1
) -> MetricsReport:
    pairs = []
    for start in range(0, len(phantoms), 8):
        chunk = phantoms[start : start + 8]
        images = np.stack([preprocess(p.image, geometry) for p in chunk])
        for p, pred in zip(chunk, predict(net, images)):
            pairs.append(MaskPair(p.id, pred, preprocess_mask(p.mask, geometry), "full", p.view_tag, p.regime))
    return evaluate_pairs(pairs, workers)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATIONS: dict[str, dict[str, bool]] = {
    "full": {},
    "without_attention": {"use_attention": False},
    "without_depthwise": {"use_depthwise": False},
    "without_cascade": {"use_cascade": False},
}


@dataclass
class AblationReport:
    table: pd.DataFrame
    window_source: str
    reports: dict[str, MetricsReport] = field(default_factory=dict)

    def to_table(self) -> str:
        return self.table.to_string(float_format=lambda v: f"{v:.4f}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "window_source": self.window_source,
            "rows": {variant: {k: (v.item() if isinstance(v, np.generic) else v) for k, v in row.items()}
                     for variant, row in self.table.to_dict(orient="index").items()},
        }

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.txt").write_text(self.to_table() + "\n")
        (out_dir / "ablation.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def run_variant(
    variant: str,
    train_phantoms: Sequence[SegSample],
    test_phantoms: Sequence[SegSample],
    geometry: GeometrySpec,
    base_config: ModelConfig,
    train_config: TrainConfig,
    window_source: str = "predicted",
) -> tuple[MetricsReport, int]:
    """Train and evaluate one configuration; returns its report and total parameter count."""
    config = replace(base_config, **ABLATIONS[variant])
    if not config.use_cascade:
        result = train_stage("full", train_phantoms, geometry, config, train_config)
        report = evaluate_full_frame(result.net, test_phantoms, geometry, train_config.eval_workers)
        return report, result.net.param_count()
    loc = train_stage("loc", train_phantoms, geometry, config, train_config)
    seg = train_stage("seg", train_phantoms, geometry, config, train_config)
    report = evaluate_cascade(loc.net, seg.net, test_phantoms, geometry, window_source, train_config.eval_workers)
    return report, loc.net.param_count() + seg.net.param_count()


def ablate(
    dataset: Sequence[SegSample],
    geometry: GeometrySpec,
    base_config: ModelConfig,
    train_config: TrainConfig,
    variants: Sequence[str] = tuple(ABLATIONS),
    window_source: str = "predicted",
) -> AblationReport:
    """Train every variant on the training split with a shared seed and score it on the test split."""
    train_phantoms = [s for s in dataset if s.split == "train"]
    test_phantoms = [s for s in dataset if s.split == "test"]
    if not train_phantoms or not test_phantoms:
        raise DataError("ablation needs both train and test samples")
    rows, reports = {}, {}
    for variant in variants:
        if variant not in ABLATIONS:
            raise ConfigError(f"unknown ablation {variant!r}, expected one of {sorted(ABLATIONS)}")
        logger.info("Ablation: %s", variant)
        report, params = run_variant(
            variant, train_phantoms, test_phantoms, geometry, base_config, train_config, window_source
        )
        reports[variant] = report
        rows[variant] = {
            "dice": report.mean("dice"),
            "miou": report.mean("miou"),
            "sensitivity": report.mean("sensitivity"),
            "params": params,
        }
    table = pd.DataFrame.from_dict(rows, orient="index")
    table.index.name = "variant"
    return AblationReport(table, window_source, reports)
