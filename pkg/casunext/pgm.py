"""Grayscale PGM reading and writing for images and masks, through Pillow.

Images are written as 16-bit binary PGM (P5, maxval 65535). Any grayscale PGM Pillow can decode is
readable; Pillow rescales non-standard maxvals to the full 8- or 16-bit range.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from casunext.errors import DataError

MAXVAL = 65535

# Pillow mode -> full-scale value
_FULL_SCALE = {"L": 255, "I": MAXVAL, "I;16": MAXVAL, "I;16B": MAXVAL}


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Write a [0,1] float image (or boolean mask) as big-endian 16-bit P5."""
    if image.ndim != 2:
        raise DataError(f"PGM images are 2-D, got shape {image.shape}")
    values = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    pixels = np.round(values * MAXVAL).astype(np.int32)
    Image.fromarray(pixels).save(Path(path), format="PPM")


def read_pgm(path: Path) -> np.ndarray:
    """Float64 image scaled to [0,1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            kind, mode = img.format, img.mode
            pixels = np.asarray(img, dtype=np.float64)
    except (OSError, ValueError, SyntaxError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if kind != "PPM" or mode not in _FULL_SCALE:
        raise DataError(f"{path}: not a grayscale PGM ({kind} {mode})")
    return pixels / _FULL_SCALE[mode]


def read_mask(path: Path) -> np.ndarray:
    return read_pgm(path) > 0
