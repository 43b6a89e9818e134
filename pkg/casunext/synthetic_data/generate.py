"""Synthetic fetal-brain phantoms for CasUNext.

Each phantom is a grayscale frame with a textured elliptical "brain" inside a maternal-body
background, plus a ground-truth mask that is the exact rasterized brain region. Regimes add
distractor tissue, motion-like streaks or an abnormal (non-elliptical, hollow) brain. Uses Faker for
pseudonymous subject/site provenance.

Every sample draws from its own named RNG streams, so a sample depends only on (seed, id) and its
regime; corruption streams never touch the mask.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from faker import Faker
from scipy import ndimage

from casunext.errors import ConfigError
from casunext.tensor import rng_for

logger = logging.getLogger(__name__)

VIEW_TAGS = ["axial", "coronal", "sagittal"]
REGIMES = ["clean", "artifact", "distractor", "abnormal"]
SPLITS = ["train", "test"]

# (aspect min, aspect max, rotation half-range in radians)
VIEW_FAMILIES = {
    "axial": (0.85, 1.00, 0.40),
    "coronal": (0.75, 0.90, 0.20),
    "sagittal": (0.60, 0.80, 0.70),
}

# Semi-axes as fractions of the frame's half-side
MAJOR_RANGE = (0.18, 0.30)
MINOR_FLOOR = 0.13
CENTER_JITTER = 0.10

DEFAULT_VIEW_WEIGHTS = {"axial": 1 / 3, "coronal": 1 / 3, "sagittal": 1 / 3}
DEFAULT_REGIME_WEIGHTS = {"clean": 0.4, "artifact": 0.2, "distractor": 0.2, "abnormal": 0.2}

SITE_SUFFIXES = ["Fetal Imaging Center", "Perinatal MRI Unit", "Maternity Radiology", "Children's Hospital MRI"]


@dataclass
class PhantomSpec:
    seed: int = 0
    count: int = 150
    frame_size: int = 192
    view_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_VIEW_WEIGHTS))
    regime_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_REGIME_WEIGHTS))
    test_fraction: float = 0.2
    wide_fraction: float = 0.0
    cohort: str = "multiview"

    def validate(self) -> None:
        if self.count <= 0:
            raise ConfigError(f"phantom count must be positive, got {self.count}")
        if self.frame_size < 32 or self.frame_size % 2:
            raise ConfigError(f"frame_size must be an even integer >= 32, got {self.frame_size}")
        for label, weights, allowed in (
            ("view_weights", self.view_weights, VIEW_TAGS),
            ("regime_weights", self.regime_weights, REGIMES),
        ):
            unknown = set(weights) - set(allowed)
            if unknown:
                raise ConfigError(f"{label}: unknown keys {sorted(unknown)}")
            if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
                raise ConfigError(f"{label} must be non-negative with a positive sum")
        if not 0.0 <= self.test_fraction <= 1.0:
            raise ConfigError(f"test_fraction must lie in [0, 1], got {self.test_fraction}")
        if not 0.0 <= self.wide_fraction <= 1.0:
            raise ConfigError(f"wide_fraction must lie in [0, 1], got {self.wide_fraction}")

    @property
    def wide_frame_size(self) -> int:
        return 2 * round(self.frame_size * 7 / 12)

    @property
    def test_count(self) -> int:
        return int(self.count * self.test_fraction + 1e-9)

    @classmethod
    def cohort_preset(cls, name: str, **overrides: Any) -> PhantomSpec:
        try:
            base = COHORT_PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown cohort {name!r}, expected one of {sorted(COHORT_PRESETS)}") from None
        values = {"view_weights": dict(base.view_weights), "regime_weights": dict(base.regime_weights), **overrides}
        return replace(base, **values)


COHORT_PRESETS = {
    "multiview": PhantomSpec(),
    "coronal": PhantomSpec(
        count=98,
        view_weights={"coronal": 1.0},
        regime_weights={"clean": 0.6, "artifact": 0.2, "distractor": 0.2},
        cohort="coronal",
    ),
    "abnormal": PhantomSpec(count=50, regime_weights={"abnormal": 1.0}, test_fraction=1.0, cohort="abnormal"),
}


@dataclass
class BrainShape:
    center_row: float
    center_col: float
    semi_major: float
    semi_minor: float
    rotation: float
    harmonics: list[tuple[int, float, float]] = field(default_factory=list)  # (order, amplitude, phase)
    hole: tuple[float, float] | None = None  # ventricle semi-axes


@dataclass
class SegSample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    view_tag: str
    regime: str
    split: str
    brain: BrainShape
    scanner: str = "standard"
    subject: str = ""
    site: str = ""

    @property
    def frame_size(self) -> int:
        return self.image.shape[0]


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def _ellipse_coords(
    center: tuple[float, float], axes: tuple[float, float], rotation: float, frame: int | tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized ellipse coordinates (u/a, v/b) of every pixel center."""
    h, w = (frame, frame) if isinstance(frame, int) else frame
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rows - center[0], cols - center[1]
    cos_t, sin_t = math.cos(rotation), math.sin(rotation)
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    return u / axes[0], v / axes[1]


def rasterize_ellipse(
    center: tuple[float, float], axes: tuple[float, float], rotation: float, frame: int | tuple[int, int]
) -> np.ndarray:
    """Pixels whose centers satisfy (u/a)^2 + (v/b)^2 <= 1; `axes` = (a along the rotated x axis, b)."""
    if axes[0] <= 0 or axes[1] <= 0:
        raise ConfigError(f"ellipse axes must be positive, got {axes}")
    un, vn = _ellipse_coords(center, axes, rotation, frame)
    return un * un + vn * vn <= 1.0


def brain_radius(brain: BrainShape, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized radius and the (possibly perturbed) boundary radius at every pixel."""
    un, vn = _ellipse_coords(
        (brain.center_row, brain.center_col), (brain.semi_major, brain.semi_minor), brain.rotation, frame
    )
    radius = np.hypot(un, vn)
    boundary = np.ones_like(radius)
    if brain.harmonics:
        angle = np.arctan2(vn, un)
        for order, amplitude, phase in brain.harmonics:
            boundary += amplitude * np.cos(order * angle + phase)
    return radius, boundary


def brain_mask(brain: BrainShape, frame: int) -> np.ndarray:
    radius, boundary = brain_radius(brain, frame)
    mask = radius <= boundary
    if brain.hole is not None:
        mask &= ~_hole_mask(brain, frame)
    return mask


def _hole_mask(brain: BrainShape, frame: int) -> np.ndarray:
    assert brain.hole is not None
    return rasterize_ellipse((brain.center_row, brain.center_col), brain.hole, brain.rotation, frame)


def sample_brain(rng: np.random.Generator, frame: int, view_tag: str, abnormal: bool) -> BrainShape:
    half = frame / 2
    aspect_lo, aspect_hi, rot_range = VIEW_FAMILIES[view_tag]
    major_frac = rng.uniform(*MAJOR_RANGE)
    minor_frac = max(MINOR_FLOOR, major_frac * rng.uniform(aspect_lo, aspect_hi))
    # major axis vertical, then rotated within the view family's range
    rotation = math.pi / 2 + rng.uniform(-rot_range, rot_range)
    center_row = half + rng.uniform(-CENTER_JITTER, CENTER_JITTER) * frame
    center_col = half + rng.uniform(-CENTER_JITTER, CENTER_JITTER) * frame
    brain = BrainShape(center_row, center_col, major_frac * half, minor_frac * half, rotation)
    if abnormal:
        orders = rng.choice(np.arange(2, 7), size=3, replace=False)
        brain.harmonics = [(int(k), float(rng.uniform(0.02, 0.05)), float(rng.uniform(0, 2 * math.pi))) for k in orders]
        brain.hole = (brain.semi_major * rng.uniform(0.2, 0.3), brain.semi_minor * rng.uniform(0.15, 0.25))
    return brain


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _render_anatomy(rng: np.random.Generator, brain: BrainShape, frame: int) -> np.ndarray:
    """Maternal body, amniotic fluid halo and a brain with cortical bands."""
    image = np.zeros((frame, frame))
    body = rasterize_ellipse(
        (frame / 2 + rng.uniform(-0.05, 0.05) * frame, frame / 2),
        (0.47 * frame, 0.42 * frame),
        rng.uniform(-0.2, 0.2),
        frame,
    )
    image[body] = rng.uniform(0.22, 0.32)

    radius, boundary = brain_radius(brain, frame)
    image[radius <= 1.3 * boundary] = rng.uniform(0.8, 0.9)

    inside = radius <= boundary
    depth = radius / boundary
    bands = rng.integers(3, 6)
    texture = 0.45 + 0.08 * np.sin(2 * math.pi * bands * depth + rng.uniform(0, 2 * math.pi))
    texture += 0.12 * (depth > 0.85)
    image[inside] = texture[inside]
    if brain.hole is not None:
        image[_hole_mask(brain, frame)] = rng.uniform(0.85, 0.95)
    return image


def _add_distractors(rng: np.random.Generator, image: np.ndarray, keep_out: np.ndarray) -> None:
    """2-6 brain-like blobs and arcs outside `keep_out` (maternal tissue analog)."""
    frame = image.shape[0]
    for _ in range(int(rng.integers(2, 7))):
        for _attempt in range(20):
            center = (rng.uniform(0.1, 0.9) * frame, rng.uniform(0.1, 0.9) * frame)
            axes = (rng.uniform(0.04, 0.12) * frame, rng.uniform(0.03, 0.08) * frame)
            shape = rasterize_ellipse(center, axes, rng.uniform(0, math.pi), frame)
            if rng.random() < 0.4:
                shape &= ~rasterize_ellipse(center, (axes[0] * 0.7, axes[1] * 0.7), 0.0, frame)  # arc
            if shape.any() and not (shape & keep_out).any():
                image[shape] = rng.uniform(0.4, 0.65)
                break


def _add_streaks(rng: np.random.Generator, image: np.ndarray) -> None:
    """Additive horizontal sinusoidal bands, amplitude at most 0.5 (motion analog)."""
    frame = image.shape[0]
    rows = np.arange(frame)[:, None]
    cycles = rng.uniform(4, 16)
    amplitude = rng.uniform(0.1, 0.5)
    image += amplitude * np.sin(2 * math.pi * cycles * rows / frame + rng.uniform(0, 2 * math.pi))


def render_phantom(
    seed: int, sample_id: str, frame: int, view_tag: str, regime: str, split: str = "train", scanner: str = "standard"
) -> SegSample:
    """One phantom, reproducible from (seed, sample_id, frame, view_tag, regime)."""
    if view_tag not in VIEW_FAMILIES:
        raise ConfigError(f"unknown view tag {view_tag!r}")
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    anatomy = rng_for(seed, "phantom", sample_id, "anatomy")
    texture = rng_for(seed, "phantom", sample_id, "texture")
    corruption = rng_for(seed, "phantom", sample_id, "corruption")

    brain = sample_brain(anatomy, frame, view_tag, abnormal=regime == "abnormal")
    mask = brain_mask(brain, frame)

    image = _render_anatomy(texture, brain, frame)
    if regime == "distractor":
        radius, boundary = brain_radius(brain, frame)
        _add_distractors(corruption, image, radius <= 1.4 * boundary)
    image = ndimage.gaussian_filter(image, sigma=0.8)
    image += texture.normal(0.0, 0.03, size=image.shape)
    if regime == "artifact":
        _add_streaks(corruption, image)
    image = np.clip(image, 0.0, 1.0)
    return SegSample(sample_id, image, mask, view_tag, regime, split, brain, scanner)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def apportion(weights: dict[str, float], count: int) -> list[str]:
    """Exactly `count` labels in proportion to `weights` (largest remainder)."""
    total = sum(weights.values())
    labels = [k for k, w in weights.items() if w > 0]
    exact = {k: count * weights[k] / total for k in labels}
    counts = {k: int(math.floor(v)) for k, v in exact.items()}
    for k in sorted(labels, key=lambda k: exact[k] - counts[k], reverse=True)[: count - sum(counts.values())]:
        counts[k] += 1
    return [k for k in labels for _ in range(counts[k])]


def split_ids(ids: list[str], test_count: int) -> dict[str, str]:
    """Hash-ordered split: the last `test_count` ids by sha256 go to test."""
    ordered = sorted(ids, key=lambda i: hashlib.sha256(i.encode("utf-8")).hexdigest())
    cut = len(ordered) - test_count
    return {sample_id: ("train" if rank < cut else "test") for rank, sample_id in enumerate(ordered)}


def sample_id(index: int) -> str:
    return f"ph-{index + 1:04d}"


def generate(spec: PhantomSpec) -> list[SegSample]:
    """The full phantom dataset for `spec`, deterministic for a fixed seed."""
    spec.validate()
    ids = [sample_id(i) for i in range(spec.count)]

    views = apportion(spec.view_weights, spec.count)
    regimes = apportion(spec.regime_weights, spec.count)
    rng_for(spec.seed, "views").shuffle(views)
    rng_for(spec.seed, "regimes").shuffle(regimes)
    order = rng_for(spec.seed, "scanner").permutation(spec.count)
    wide = {int(i) for i in order[: round(spec.count * spec.wide_fraction)]}
    splits = split_ids(ids, spec.test_count)

    fake = Faker()
    fake.seed_instance(spec.seed)

    samples = []
    for i, sid in enumerate(ids):
        scanner = "wide" if i in wide else "standard"
        frame = spec.wide_frame_size if scanner == "wide" else spec.frame_size
        sample = render_phantom(spec.seed, sid, frame, views[i], regimes[i], splits[sid], scanner)
        sample.subject = fake.bothify("FB-####-??").upper()
        sample.site = f"{fake.city()} {fake.random_element(SITE_SUFFIXES)}"
        samples.append(sample)

    n_test = sum(s.split == "test" for s in samples)
    logger.info("Generated %d phantoms (%d train / %d test)", len(samples), len(samples) - n_test, n_test)
    return samples


def by_split(samples: list[SegSample], split: str) -> list[SegSample]:
    return [s for s in samples if s.split == split]


if __name__ == "__main__":
    data = generate(PhantomSpec())
    print(f"Phantoms: {len(data)}")
    for regime in REGIMES:
        print(f"  {regime}: {sum(s.regime == regime for s in data)}")
