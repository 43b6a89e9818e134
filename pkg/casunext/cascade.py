"""Two-step cascade: localize the brain in the full frame, crop around it, segment the crop, paste back.

Frames are square. `preprocess` brings any scanner matrix to `resize_to`; Loc-Net runs at
`resize_to`, Seg-Net at `crop_to = resize_to / 2`.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from typing import Any, Protocol

import numpy as np

from casunext.errors import ConfigError, PreprocessError, ShapeError
from casunext.layers import resize_image, resize_mask
from casunext.network import Network, predict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeometrySpec:
    edge_crop: int = 192
    resize_to: int = 128
    crop_to: int = 64

    def __post_init__(self) -> None:
        if min(self.edge_crop, self.resize_to, self.crop_to) <= 0:
            raise ConfigError(f"geometry sizes must be positive: {self}")
        if self.resize_to % 16 or self.crop_to % 16:
            raise ConfigError(f"resize_to and crop_to must be multiples of 16: {self}")
        if 2 * self.crop_to != self.resize_to:
            raise ConfigError(f"crop_to must be half of resize_to: {self}")

    @classmethod
    def preset(cls, scale: str) -> GeometrySpec:
        try:
            return GEOMETRY_PRESETS[scale]
        except KeyError:
            raise ConfigError(f"unknown scale {scale!r}, expected one of {sorted(GEOMETRY_PRESETS)}") from None


GEOMETRY_PRESETS = {
    "desk": GeometrySpec(192, 128, 64),
    "paper": GeometrySpec(768, 512, 256),
    "clinical": GeometrySpec(768, 512, 256),
}


@dataclass(frozen=True)
class CropWindow:
    center_row: int
    center_col: int
    side: int
    fallback: bool = False

    @property
    def top(self) -> int:
        return self.center_row - self.side // 2

    @property
    def left(self) -> int:
        return self.center_col - self.side // 2

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.side), slice(self.left, self.left + self.side)

    def to_record(self) -> dict[str, Any]:
        return {**asdict(self), "top": self.top, "left": self.left}


@dataclass
class CascadeResult:
    loc_mask: np.ndarray
    window: CropWindow
    fine_mask_crop: np.ndarray
    fine_mask_full: np.ndarray

    def to_record(self, sample_id: str) -> dict[str, Any]:
        return {
            "id": sample_id,
            "window": self.window.to_record(),
            "fallback": self.window.fallback,
            "loc_fraction": float(self.loc_mask.mean()),
            "fine_fraction": float(self.fine_mask_full.mean()),
        }


class MaskedSample(Protocol):
    id: str
    image: np.ndarray
    mask: np.ndarray


@dataclass
class StageSample:
    """An image/mask pair already in a network's input frame."""

    id: str
    image: np.ndarray
    mask: np.ndarray


# ---------------------------------------------------------------------------
# Frame geometry
# ---------------------------------------------------------------------------


def _square_frame(image: np.ndarray, edge_crop: int) -> np.ndarray:
    h, w = image.shape
    top = max(0, (h - edge_crop) // 2)
    left = max(0, (w - edge_crop) // 2)
    image = image[top : top + min(h, edge_crop), left : left + min(w, edge_crop)]
    h, w = image.shape
    side = max(h, w)
    pad_h, pad_w = side - h, side - w
    if pad_h or pad_w:
        image = np.pad(image, ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)), mode="reflect")
    return image


def preprocess(raw: np.ndarray, geometry: GeometrySpec) -> np.ndarray:
    """Crop edges, square, resize to `resize_to` and min-max normalize to [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise PreprocessError(f"expected a non-empty 2-D grayscale image, got shape {raw.shape}")
    frame = _square_frame(raw, geometry.edge_crop)
    frame = resize_image(frame, geometry.resize_to, geometry.resize_to)
    lo, hi = float(frame.min()), float(frame.max())
    if hi - lo <= 0.0:
        logger.warning("Preprocess: constant image (value %.4g), normalized to zeros", lo)
        return np.zeros_like(frame)
    return (frame - lo) / (hi - lo)


def preprocess_mask(mask: np.ndarray, geometry: GeometrySpec) -> np.ndarray:
    """The geometric part of `preprocess` applied to a mask, nearest-neighbour."""
    if mask.ndim != 2 or mask.size == 0:
        raise PreprocessError(f"expected a non-empty 2-D mask, got shape {mask.shape}")
    frame = _square_frame(mask.astype(np.uint8), geometry.edge_crop).astype(bool)
    return resize_mask(frame, geometry.resize_to, geometry.resize_to)


def clamp_window(center_row: int, center_col: int, side: int, frame: int, fallback: bool = False) -> CropWindow:
    if side > frame:
        raise ShapeError(f"crop side {side} exceeds frame {frame}")
    half = side // 2
    row = min(max(center_row, half), frame - side + half)
    col = min(max(center_col, half), frame - side + half)
    return CropWindow(row, col, side, fallback)


def compute_center(loc_mask: np.ndarray, side: int) -> CropWindow:
    """Crop window centred on the foreground centroid; frame centre when the mask is empty."""
    frame = loc_mask.shape[0]
    if loc_mask.shape != (frame, frame):
        raise ShapeError(f"localization mask must be square, got {loc_mask.shape}")
    rows, cols = np.nonzero(loc_mask)
    if rows.size == 0:
        logger.warning("Localization empty, falling back to the frame-centre window")
        return clamp_window(frame // 2, frame // 2, side, frame, fallback=True)
    # round half up
    row = math.floor(rows.mean() + 0.5)
    col = math.floor(cols.mean() + 0.5)
    return clamp_window(row, col, side, frame)


def crop(image: np.ndarray, window: CropWindow) -> np.ndarray:
    return image[window.slices]


def paste_back(crop_mask: np.ndarray, window: CropWindow, frame: int) -> np.ndarray:
    full = np.zeros((frame, frame), dtype=bool)
    full[window.slices] = crop_mask
    return full


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _check_networks(loc_net: Network, seg_net: Network, geometry: GeometrySpec) -> None:
    if loc_net.config.input_size != geometry.resize_to:
        raise ShapeError(f"Loc-Net input {loc_net.config.input_size} != resize_to {geometry.resize_to}")
    if seg_net.config.input_size != geometry.crop_to:
        raise ShapeError(f"Seg-Net input {seg_net.config.input_size} != crop_to {geometry.crop_to}")


def cascade_batch(
    loc_net: Network,
    seg_net: Network,
    images: np.ndarray,
    geometry: GeometrySpec,
    window_masks: Sequence[np.ndarray] | None = None,
) -> list[CascadeResult]:
    """Run the cascade on preprocessed N×resize_to×resize_to images.

    Windows come from the Loc-Net prediction unless `window_masks` (ground truth) is given.
    """
    _check_networks(loc_net, seg_net, geometry)
    loc_masks = predict(loc_net, images)
    sources = loc_masks if window_masks is None else window_masks
    windows = [compute_center(m, geometry.crop_to) for m in sources]
    crops = np.stack([crop(img, w) for img, w in zip(images, windows)])
    fine = predict(seg_net, crops)
    return [
        CascadeResult(loc, w, f, paste_back(f, w, geometry.resize_to))
        for loc, w, f in zip(loc_masks, windows, fine)
    ]


def run_cascade(
    loc_net: Network,
    seg_net: Network,
    raw_image: np.ndarray,
    geometry: GeometrySpec,
    window_mask: np.ndarray | None = None,
) -> CascadeResult:
    image = preprocess(raw_image, geometry)
    masks = None if window_mask is None else [window_mask]
    return cascade_batch(loc_net, seg_net, image[None], geometry, masks)[0]


def run_full_frame(seg_net: Network, raw_image: np.ndarray, geometry: GeometrySpec) -> np.ndarray:
    """Single-stage segmentation of the whole resized frame (the cascade-free ablation)."""
    if seg_net.config.input_size != geometry.resize_to:
        raise ShapeError(f"full-frame net input {seg_net.config.input_size} != resize_to {geometry.resize_to}")
    return predict(seg_net, preprocess(raw_image, geometry)[None])[0]


# ---------------------------------------------------------------------------
# Training sets
# ---------------------------------------------------------------------------


def prepare_loc_samples(samples: Iterable[MaskedSample], geometry: GeometrySpec) -> list[StageSample]:
    """Full frames at resize_to; also the training set of the cascade-free ablation."""
    return [
        StageSample(s.id, preprocess(s.image, geometry), preprocess_mask(s.mask, geometry)) for s in samples
    ]


def prepare_seg_samples(samples: Iterable[MaskedSample], geometry: GeometrySpec) -> list[StageSample]:
    """crop_to crops centred on the ground-truth brain."""
    out = []
    for s in samples:
        image, mask = preprocess(s.image, geometry), preprocess_mask(s.mask, geometry)
        window = compute_center(mask, geometry.crop_to)
        out.append(StageSample(s.id, crop(image, window), crop(mask, window)))
    return out


def refeed_samples(samples: Sequence[StageSample], geometry: GeometrySpec) -> list[StageSample]:
    """Append, for every Loc-Net sample, its ground-truth crop resized back up to the full frame."""
    size = geometry.resize_to
    extra = []
    for s in samples:
        window = compute_center(s.mask, geometry.crop_to)
        image = resize_image(crop(s.image, window), size, size)
        mask = resize_mask(crop(s.mask, window), size, size)
        extra.append(StageSample(f"{s.id}~refeed", image, mask))
    return [*samples, *extra]
