"""Synthetic phantom datasets."""

from casunext.synthetic_data.generate import (
    COHORT_PRESETS,
    REGIMES,
    VIEW_TAGS,
    BrainShape,
    PhantomSpec,
    SegSample,
    by_split,
    generate,
    rasterize_ellipse,
    render_phantom,
)
from casunext.synthetic_data.seed_files import load_dataset, seed_dataset, write_dataset

__all__ = [
    "COHORT_PRESETS",
    "REGIMES",
    "VIEW_TAGS",
    "BrainShape",
    "PhantomSpec",
    "SegSample",
    "by_split",
    "generate",
    "load_dataset",
    "rasterize_ellipse",
    "render_phantom",
    "seed_dataset",
    "write_dataset",
]
