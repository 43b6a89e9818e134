import json
import math
import re

import numpy as np
import numpy.testing as npt
import pytest

from casunext.errors import ConfigError, DataError
from casunext.pgm import read_mask, read_pgm, write_pgm
from casunext.synthetic_data.generate import (
    PhantomSpec,
    apportion,
    brain_mask,
    by_split,
    generate,
    rasterize_ellipse,
    render_phantom,
    sample_brain,
    sample_id,
    split_ids,
)
from casunext.synthetic_data.seed_files import MANIFEST_NAME, load_dataset, write_dataset


class TestEllipse:
    @pytest.mark.parametrize("r", [10.0, 12.5, 20.0])
    def test_circle_area(self, r):
        mask = rasterize_ellipse((32.0, 32.0), (r, r), 0.0, 64)
        assert mask.sum() == pytest.approx(math.pi * r * r, rel=0.02)

    def test_quarter_turn_swaps_the_axes(self):
        turned = rasterize_ellipse((20.0, 20.0), (9.3, 5.7), math.pi / 2, 41)
        swapped = rasterize_ellipse((20.0, 20.0), (5.7, 9.3), 0.0, 41)
        npt.assert_array_equal(turned, swapped)

    def test_unrotated_ellipse_is_mirror_symmetric(self):
        mask = rasterize_ellipse((17.3, 20.0), (11.2, 6.1), 0.0, 41)
        npt.assert_array_equal(mask, mask[:, ::-1])

    def test_non_positive_axes(self):
        with pytest.raises(ConfigError):
            rasterize_ellipse((10.0, 10.0), (0.0, 3.0), 0.0, 20)


class TestBrains:
    def test_foreground_fraction_bounds(self):
        rng = np.random.default_rng(0)
        views = ["axial", "coronal", "sagittal"]
        for i in range(1000):
            brain = sample_brain(rng, 64, views[i % 3], abnormal=i % 4 == 0)
            fraction = brain_mask(brain, 64).mean()
            assert 0.01 <= fraction <= 0.35

    def test_view_tags_change_the_aspect(self):
        rng = np.random.default_rng(1)

        def mean_aspect(view: str) -> float:
            brains = [sample_brain(rng, 128, view, abnormal=False) for _ in range(200)]
            return float(np.mean([b.semi_minor / b.semi_major for b in brains]))

        axial, coronal, sagittal = mean_aspect("axial"), mean_aspect("coronal"), mean_aspect("sagittal")
        assert axial > coronal + 0.03
        assert coronal > sagittal + 0.03

    def test_abnormal_brains_have_a_hole(self):
        brain = sample_brain(np.random.default_rng(2), 96, "axial", abnormal=True)
        assert brain.hole is not None and len(brain.harmonics) == 3
        mask = brain_mask(brain, 96)
        assert not mask[round(brain.center_row), round(brain.center_col)]


class TestRendering:
    def test_corruption_never_touches_the_mask(self):
        clean = render_phantom(4, "ph-0007", 64, "coronal", "clean")
        for regime in ("artifact", "distractor"):
            corrupted = render_phantom(4, "ph-0007", 64, "coronal", regime)
            npt.assert_array_equal(corrupted.mask, clean.mask)
            assert not np.array_equal(corrupted.image, clean.image)

    def test_image_range_and_mask(self):
        sample = render_phantom(0, "ph-0001", 64, "sagittal", "artifact")
        assert sample.image.shape == sample.mask.shape == (64, 64)
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
        assert sample.mask.any()

    def test_brain_is_brighter_than_the_body(self):
        sample = render_phantom(0, "ph-0002", 96, "axial", "clean")
        body = sample.image[~sample.mask & (sample.image > 0.1)]
        assert sample.image[sample.mask].mean() > body.mean()

    @pytest.mark.parametrize("view, regime", [("oblique", "clean"), ("axial", "noisy")])
    def test_unknown_labels(self, view, regime):
        with pytest.raises(ConfigError):
            render_phantom(0, "ph-0001", 64, view, regime)


class TestDataset:
    def test_same_seed_same_dataset(self, tiny_phantoms):
        again = generate(PhantomSpec(seed=3, count=10, frame_size=48))
        for a, b in zip(tiny_phantoms, again):
            assert a.id == b.id and a.split == b.split and a.subject == b.subject
            npt.assert_array_equal(a.image, b.image)
            npt.assert_array_equal(a.mask, b.mask)

    def test_other_seed_other_dataset(self, tiny_phantoms):
        other = generate(PhantomSpec(seed=4, count=10, frame_size=48))
        assert any(not np.array_equal(a.mask, b.mask) for a, b in zip(tiny_phantoms, other))

    def test_default_split_is_120_30(self):
        assert PhantomSpec().test_count == 30
        splits = split_ids([sample_id(i) for i in range(150)], 30)
        assert sum(v == "test" for v in splits.values()) == 30
        assert sum(v == "train" for v in splits.values()) == 120

    def test_split_depends_on_the_id_only(self):
        small = split_ids([sample_id(i) for i in range(10)], 2)
        assert split_ids([sample_id(i) for i in reversed(range(10))], 2) == small

    def test_regimes_are_stratified(self, tiny_phantoms):
        counts = {r: sum(s.regime == r for s in tiny_phantoms) for r in ("clean", "artifact", "distractor", "abnormal")}
        assert counts == {"clean": 4, "artifact": 2, "distractor": 2, "abnormal": 2}
        assert len(by_split(tiny_phantoms, "test")) == 2

    def test_apportion_largest_remainder(self):
        labels = apportion({"a": 1, "b": 1, "c": 1}, 10)
        assert len(labels) == 10
        assert sorted(labels.count(k) for k in "abc") == [3, 3, 4]
        assert apportion({"a": 1.0, "b": 0.0}, 3) == ["a", "a", "a"]

    def test_masks_are_non_empty(self, tiny_phantoms):
        assert all(s.mask.any() for s in tiny_phantoms)

    def test_provenance_is_pseudonymous_and_stable(self, tiny_phantoms):
        for s in tiny_phantoms:
            assert re.fullmatch(r"FB-\d{4}-[A-Z]{2}", s.subject)
            assert s.site

    @pytest.mark.parametrize(
        "overrides",
        [
            {"count": 0},
            {"frame_size": 31},
            {"view_weights": {"axial": 1.0, "oblique": 1.0}},
            {"regime_weights": {"clean": 0.0}},
            {"test_fraction": 1.5},
        ],
    )
    def test_invalid_specs(self, overrides):
        with pytest.raises(ConfigError):
            generate(PhantomSpec(**overrides))

    def test_wide_scanner_frames(self):
        spec = PhantomSpec(seed=1, count=10, frame_size=48, wide_fraction=0.3)
        samples = generate(spec)
        wide = [s for s in samples if s.scanner == "wide"]
        assert len(wide) == 3
        assert all(s.frame_size == spec.wide_frame_size == 56 for s in wide)
        assert all(s.frame_size == 48 for s in samples if s.scanner == "standard")

    def test_cohort_presets(self):
        coronal = PhantomSpec.cohort_preset("coronal", seed=9)
        assert (coronal.count, coronal.test_count, coronal.seed) == (98, 19, 9)
        assert coronal.view_weights == {"coronal": 1.0}
        abnormal = PhantomSpec.cohort_preset("abnormal")
        assert abnormal.test_count == abnormal.count == 50
        with pytest.raises(ConfigError, match="cohort"):
            PhantomSpec.cohort_preset("adult")


class TestFiles:
    def test_pgm_round_trip(self, tmp_path):
        image = np.random.default_rng(0).uniform(size=(7, 5))
        write_pgm(tmp_path / "a.pgm", image)
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw.startswith(b"P5\n5 7\n65535\n")
        npt.assert_allclose(read_pgm(tmp_path / "a.pgm"), image, atol=0.5 / 65535 + 1e-12)

        mask = image > 0.5
        write_pgm(tmp_path / "m.pgm", mask)
        npt.assert_array_equal(read_mask(tmp_path / "m.pgm"), mask)

    def test_pgm_header_comments(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
        npt.assert_array_equal(read_pgm(path), [[0.0, 1.0]])

    @pytest.mark.parametrize(
        "payload",
        [
            b"P6\n1 1\n255\n\x00\x00\x00",
            b"P5\n2 1\n255\n\x00",
            b"P5\n2",
            b"P5\n2 1\n0\n\x00\x00",
            b"not an image",
        ],
    )
    def test_bad_pgm(self, tmp_path, payload):
        path = tmp_path / "bad.pgm"
        path.write_bytes(payload)
        with pytest.raises(DataError):
            read_pgm(path)

    def test_dataset_round_trip(self, tmp_path, tiny_phantoms):
        write_dataset(tiny_phantoms, tmp_path)
        records = [json.loads(line) for line in (tmp_path / MANIFEST_NAME).read_text().splitlines()]
        assert [r["id"] for r in records] == [s.id for s in tiny_phantoms]
        assert {"view_tag", "regime", "split", "brain", "subject", "site"} <= set(records[0])

        loaded = load_dataset(tmp_path)
        for original, back in zip(tiny_phantoms, loaded):
            npt.assert_array_equal(back.mask, original.mask)
            npt.assert_allclose(back.image, original.image, atol=1e-4)
            assert back.brain == original.brain
            assert (back.view_tag, back.regime, back.split) == (original.view_tag, original.regime, original.split)

        test = load_dataset(tmp_path, split="test")
        assert [s.id for s in test] == [s.id for s in by_split(tiny_phantoms, "test")]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match=MANIFEST_NAME):
            load_dataset(tmp_path)
