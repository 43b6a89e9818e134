import json

import numpy as np
import pytest

from casunext.errors import ConfigError, ShapeError
from casunext.metrics import ConfusionCounts, MaskPair, MetricsReport, dice, miou, sensitivity


def test_identical_masks_score_one():
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 3:7] = True
    assert dice(mask, mask) == 1.0
    assert miou(mask, mask) == 1.0
    assert sensitivity(mask, mask) == 1.0


def test_disjoint_masks():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[0, 0] = b[3, 3] = True
    assert dice(a, b) == 0.0
    assert sensitivity(a, b) == 0.0
    # background IoU is 14 / 16
    assert miou(a, b) == pytest.approx(14 / 16 / 2)


def test_empty_conventions():
    empty = np.zeros((4, 4), dtype=bool)
    assert dice(empty, empty) == 1.0
    assert miou(empty, empty) == 1.0
    assert sensitivity(empty, empty) == 1.0
    full = np.ones((4, 4), dtype=bool)
    assert dice(full, empty) == 0.0
    assert sensitivity(full, empty) == 1.0


def test_hand_counted_example():
    pred = np.array([[1, 1, 0], [0, 1, 0], [0, 0, 0]], dtype=bool)
    truth = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 0]], dtype=bool)
    counts = ConfusionCounts.from_masks(pred, truth)
    assert counts == ConfusionCounts(tp=2, fp=1, fn=1, tn=5)
    assert counts.dice() == pytest.approx(4 / 6)
    assert counts.miou() == pytest.approx((2 / 4 + 5 / 7) / 2)
    assert counts.sensitivity() == pytest.approx(2 / 3)


def _counted(pred: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    """Pixel-by-pixel confusion counting, independent of ConfusionCounts."""
    rows, cols = truth.shape
    both = {0: 0, 1: 0}
    either = {0: 0, 1: 0}
    n_pred = n_truth = 0
    for r in range(rows):
        for c in range(cols):
            p, t = int(pred[r, c]), int(truth[r, c])
            n_pred += p
            n_truth += t
            for k in (1, 0):
                both[k] += p == k and t == k
                either[k] += p == k or t == k
    ious = [1.0 if either[k] == 0 else both[k] / either[k] for k in (1, 0)]
    return {
        "dice": 1.0 if n_pred + n_truth == 0 else 2 * both[1] / (n_pred + n_truth),
        "miou": sum(ious) / 2,
        "sensitivity": 1.0 if n_truth == 0 else both[1] / n_truth,
    }


def _random_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(11)
    pairs = []
    for i in range(n):
        shape = tuple(int(v) for v in rng.integers(1, 33, size=2))
        if i < 4:
            pairs.append((np.full(shape, i & 1, dtype=bool), np.full(shape, i >> 1, dtype=bool)))
            continue
        pred, truth = rng.random(shape) < rng.uniform(), rng.random(shape) < rng.uniform()
        if i % 10 == 5:
            truth = np.zeros(shape, dtype=bool)
        elif i % 10 == 7:
            pred = np.ones(shape, dtype=bool)
        pairs.append((pred, truth))
    return pairs


def test_metrics_match_pixel_counting():
    pairs = _random_pairs(120)
    for pred, truth in pairs:
        expected = _counted(pred, truth)
        assert dice(pred, truth) == expected["dice"]
        assert miou(pred, truth) == expected["miou"]
        assert sensitivity(pred, truth) == expected["sensitivity"]


def test_single_pixel_masks():
    on, off = np.ones((1, 1), dtype=bool), np.zeros((1, 1), dtype=bool)
    assert dice(on, on) == dice(off, off) == 1.0
    assert dice(on, off) == dice(off, on) == 0.0
    assert miou(on, off) == 0.0
    assert sensitivity(on, off) == 1.0
    assert sensitivity(off, on) == 0.0


def test_dice_of_four_against_six():
    pred = np.zeros((4, 4), dtype=bool)
    truth = np.zeros((4, 4), dtype=bool)
    pred[0, :] = True
    truth[0, :3] = True
    truth[1, :3] = True
    assert dice(pred, truth) == pytest.approx(0.6)


def test_miou_of_full_against_half():
    pred = np.ones((2, 2), dtype=bool)
    truth = np.array([[1, 1], [0, 0]], dtype=bool)
    assert miou(pred, truth) == pytest.approx(0.25)


def test_dice_iou_identity():
    for pred, truth in _random_pairs(100):
        c = ConfusionCounts.from_masks(pred, truth)
        assert c.dice() == pytest.approx(2 * c.iou() / (1 + c.iou()), abs=1e-12)


def test_counts_add():
    a, b = ConfusionCounts(1, 2, 3, 4), ConfusionCounts(10, 20, 30, 40)
    assert a + b == ConfusionCounts(11, 22, 33, 44)
    assert (a + b).total == 110


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros((4, 4), dtype=bool), np.zeros((4, 5), dtype=bool))


def test_multiclass_is_rejected():
    mask = np.zeros((2, 2), dtype=bool)
    with pytest.raises(ConfigError):
        miou(mask, mask, n_classes=3)


def _pairs(rng: np.random.Generator) -> list[MaskPair]:
    pairs = []
    for i, regime in enumerate(["clean", "clean", "artifact", "abnormal"]):
        truth = rng.random((12, 12)) > 0.5
        pred = truth.copy() if regime == "clean" else rng.random((12, 12)) > 0.5
        pairs.append(MaskPair(f"ph-{i:04d}", pred, truth, stage="full", view_tag="axial", regime=regime))
        pairs.append(MaskPair(f"ph-{i:04d}", truth, truth, stage="loc", view_tag="axial", regime=regime))
    return pairs


def test_report_aggregates_per_stage(rng):
    report = MetricsReport.from_pairs(_pairs(rng))
    assert len(report) == 8
    table = report.aggregate()
    assert list(table.index) == ["full", "loc"]
    assert table.loc["loc", "dice"] == 1.0
    assert report.mean("dice", stage="loc") == 1.0
    assert report.mean("dice") < 1.0
    by_regime = report.by("regime")
    assert by_regime.loc[("full", "clean"), "dice"] == 1.0
    with pytest.raises(ConfigError):
        report.by("site")


def test_parallel_scoring_matches_serial(rng):
    pairs = _pairs(rng)
    serial = MetricsReport.from_pairs(pairs)
    parallel = MetricsReport.from_pairs(pairs, workers=4)
    assert serial.pooled == parallel.pooled
    assert serial.rows.equals(parallel.rows)


def test_pooled_counts_sum_the_samples(rng):
    pairs = _pairs(rng)
    report = MetricsReport.from_pairs(pairs)
    full = [ConfusionCounts.from_masks(p.pred, p.truth) for p in pairs if p.stage == "full"]
    assert report.pooled["full"] == sum(full[1:], full[0])


def test_report_written_as_json(tmp_path, rng):
    report = MetricsReport.from_pairs(_pairs(rng))
    path = report.write(tmp_path / "metrics.json", extra={"window_source": "predicted"})
    payload = json.loads(path.read_text())
    assert payload["window_source"] == "predicted"
    assert payload["aggregate"]["loc"]["dice"] == 1.0
    assert len(payload["samples"]) == 8
    assert "loc" in report.to_table()
