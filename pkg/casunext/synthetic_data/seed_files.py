"""Write phantom datasets to disk and read them back.

Layout of a dataset directory:

    <id>_img.pgm      16-bit grayscale image
    <id>_mask.pgm     16-bit mask (0 / 65535)
    manifest.jsonl    one JSON record per sample
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any

from casunext.errors import DataError
from casunext.pgm import read_mask, read_pgm, write_pgm
from casunext.synthetic_data.generate import BrainShape, PhantomSpec, SegSample, generate

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


def image_path(directory: Path, sample_id: str) -> Path:
    return directory / f"{sample_id}_img.pgm"


def mask_path(directory: Path, sample_id: str) -> Path:
    return directory / f"{sample_id}_mask.pgm"


def manifest_record(sample: SegSample) -> dict[str, Any]:
    return {
        "id": sample.id,
        "view_tag": sample.view_tag,
        "regime": sample.regime,
        "split": sample.split,
        "frame_size": sample.frame_size,
        "scanner": sample.scanner,
        "subject": sample.subject,
        "site": sample.site,
        "brain": asdict(sample.brain),
    }


def write_dataset(samples: list[SegSample], out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for sample in samples:
        write_pgm(image_path(out_dir, sample.id), sample.image)
        write_pgm(mask_path(out_dir, sample.id), sample.mask)
        lines.append(json.dumps(manifest_record(sample), sort_keys=True))
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    logger.info("Wrote %d phantoms to %s", len(samples), out_dir)
    return manifest


def seed_dataset(spec: PhantomSpec, out_dir: Path) -> list[SegSample]:
    """Generate the dataset for `spec` and write it. Nothing is written if the spec is invalid."""
    samples = generate(spec)
    write_dataset(samples, out_dir)
    return samples


def _brain(record: dict[str, Any]) -> BrainShape:
    brain = dict(record)
    brain["harmonics"] = [tuple(h) for h in brain.get("harmonics", [])]
    if brain.get("hole") is not None:
        brain["hole"] = tuple(brain["hole"])
    return BrainShape(**brain)


def load_dataset(data_dir: Path, split: str | None = None) -> list[SegSample]:
    """Samples listed in the manifest, optionally restricted to one split."""
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"no {MANIFEST_NAME} in {data_dir}")
    samples = []
    for line_no, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest}:{line_no}: {exc.msg}") from None
        if split is not None and record["split"] != split:
            continue
        samples.append(
            SegSample(
                id=record["id"],
                image=read_pgm(image_path(data_dir, record["id"])),
                mask=read_mask(mask_path(data_dir, record["id"])),
                view_tag=record["view_tag"],
                regime=record["regime"],
                split=record["split"],
                brain=_brain(record["brain"]),
                scanner=record.get("scanner", "standard"),
                subject=record.get("subject", ""),
                site=record.get("site", ""),
            )
        )
    if not samples:
        raise DataError(f"{data_dir}: no samples" + (f" in split {split!r}" if split else ""))
    logger.debug("Loaded %d samples from %s", len(samples), data_dir)
    return samples
