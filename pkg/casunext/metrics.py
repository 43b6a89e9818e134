"""Pixel-level segmentation metrics: Dice, mean IoU over {foreground, background}, sensitivity.

Zero-denominator conventions: Dice is 1 when both masks are empty, a class IoU is 1 when the class
is absent from both masks, and sensitivity is 1 when the truth mask is empty.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from casunext.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["dice", "miou", "sensitivity"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_masks(cls, pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
        pred, truth = np.asarray(pred, dtype=bool), np.asarray(truth, dtype=bool)
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
        tp = int(np.count_nonzero(pred & truth))
        fp = int(np.count_nonzero(pred & ~truth))
        fn = int(np.count_nonzero(~pred & truth))
        return cls(tp, fp, fn, pred.size - tp - fp - fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def background(self) -> ConfusionCounts:
        """Counts with the background class taken as positive."""
        return ConfusionCounts(self.tn, self.fn, self.fp, self.tp)

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    # -- metrics from counts ----------------------------------------------

    def dice(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom

    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else self.tp / denom

    def miou(self) -> float:
        return (self.iou() + self.background().iou()) / 2

    def sensitivity(self) -> float:
        denom = self.tp + self.fn
        return 1.0 if denom == 0 else self.tp / denom

    def scores(self) -> dict[str, float]:
        return {"dice": self.dice(), "miou": self.miou(), "sensitivity": self.sensitivity()}


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    return ConfusionCounts.from_masks(pred, truth).dice()


def miou(pred: np.ndarray, truth: np.ndarray, n_classes: int = 2) -> float:
    if n_classes != 2:
        raise ConfigError(f"only binary (foreground/background) masks are supported, got n_classes={n_classes}")
    return ConfusionCounts.from_masks(pred, truth).miou()


def sensitivity(pred: np.ndarray, truth: np.ndarray) -> float:
    return ConfusionCounts.from_masks(pred, truth).sensitivity()


@dataclass
class MaskPair:
    id: str
    pred: np.ndarray
    truth: np.ndarray
    stage: str = "full"
    view_tag: str = ""
    regime: str = ""


class MetricsReport:
    """Per-sample metric rows; aggregates are means over samples."""

    def __init__(self, rows: pd.DataFrame, pooled: dict[str, ConfusionCounts] | None = None):
        self.rows = rows
        self.pooled = pooled or {}

    @classmethod
    def from_pairs(cls, pairs: Iterable[MaskPair], workers: int = 1) -> MetricsReport:
        pairs = list(pairs)

        def score(pair: MaskPair) -> tuple[MaskPair, ConfusionCounts]:
            return pair, ConfusionCounts.from_masks(pair.pred, pair.truth)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                scored = list(pool.map(score, pairs))
        else:
            scored = [score(p) for p in pairs]

        records = []
        pooled: dict[str, ConfusionCounts] = {}
        for pair, counts in scored:
            records.append(
                {"id": pair.id, "stage": pair.stage, "view_tag": pair.view_tag, "regime": pair.regime,
                 **asdict(counts), **counts.scores()}
            )
            pooled[pair.stage] = pooled[pair.stage] + counts if pair.stage in pooled else counts
        columns = ["id", "stage", "view_tag", "regime", "tp", "fp", "fn", "tn", *METRIC_COLUMNS]
        return cls(pd.DataFrame.from_records(records, columns=columns), pooled)

    def __len__(self) -> int:
        return len(self.rows)

    def aggregate(self) -> pd.DataFrame:
        """Mean metrics per stage."""
        return self.rows.groupby("stage", sort=False)[METRIC_COLUMNS].mean()

    def by(self, column: str) -> pd.DataFrame:
        """Mean metrics per stage and `column` (view_tag or regime)."""
        if column not in ("view_tag", "regime"):
            raise ConfigError(f"cannot group metrics by {column!r}")
        return self.rows.groupby(["stage", column], sort=True)[METRIC_COLUMNS].mean()

    def mean(self, metric: str, stage: str = "full") -> float:
        return float(self.rows.loc[self.rows["stage"] == stage, metric].mean())

    def to_dict(self) -> dict[str, Any]:
        return {
            "aggregate": {stage: row.to_dict() for stage, row in self.aggregate().iterrows()},
            "pooled": {stage: {**asdict(c), **c.scores()} for stage, c in self.pooled.items()},
            "samples": self.rows.to_dict(orient="records"),
        }

    def to_table(self) -> str:
        return self.aggregate().to_string(float_format=lambda v: f"{v:.4f}")

    def write(self, path: Path, extra: dict[str, Any] | None = None) -> Path:
        payload = {**(extra or {}), **self.to_dict()}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_plain))
        return Path(path)


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def evaluate_pairs(pairs: Sequence[MaskPair], workers: int = 1) -> MetricsReport:
    report = MetricsReport.from_pairs(pairs, workers=workers)
    for stage, row in report.aggregate().iterrows():
        logger.info(
            "Eval %s: dice=%.4f miou=%.4f sensitivity=%.4f", stage, row["dice"], row["miou"], row["sensitivity"]
        )
    return report
