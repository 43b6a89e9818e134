"""Command-line entry point.

    casunext gen-phantoms --out data/
    casunext train --role loc --data data/ --out runs/loc
    casunext train --role seg --data data/ --out runs/seg
    casunext segment --loc runs/loc/checkpoint --seg runs/seg/checkpoint --input data/ --out runs/pred
    casunext eval --pred runs/pred --data data/ --out runs/eval
    casunext ablate --data data/ --out runs/ablation

Exit codes: 0 success, 1 usage error, 2 runtime error (single-line ``error: ...`` on stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, NoReturn

import numpy as np
import yaml
from scipy import ndimage

from casunext import __version__
from casunext.cascade import preprocess, preprocess_mask, run_cascade, run_full_frame
from casunext.config import ABLATION_FLAGS, SCALES, RunConfig, dump_config, load_config
from casunext.errors import CasUNextError, DataError
from casunext.layers import resize_mask
from casunext.metrics import MaskPair, evaluate_pairs
from casunext.network import Network, checkpoint_digest, load_checkpoint, save_checkpoint
from casunext.pgm import read_mask, read_pgm, write_pgm
from casunext.synthetic_data.generate import COHORT_PRESETS, PhantomSpec
from casunext.synthetic_data.seed_files import MANIFEST_NAME, load_dataset, seed_dataset
from casunext.training import ROLES, WINDOW_SOURCES, ablate, train_stage

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run_manifest.yaml"


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seed: int
    version: str = __version__
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    started_at: str = ""
    wall_clock: float = 0.0

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / RUN_MANIFEST
        path.write_text(yaml.safe_dump(asdict(self), sort_keys=False))
        return path


class Run:
    """Times a command and writes its manifest into the output directory."""

    def __init__(self, command: str, config: RunConfig, out_dir: Path):
        self.manifest = RunManifest(command, config.to_dict(), config.seed)
        self.manifest.started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.out_dir = out_dir
        self._start = time.perf_counter()

    def finish(self) -> None:
        self.manifest.wall_clock = round(time.perf_counter() - self._start, 3)
        path = self.manifest.write(self.out_dir)
        logger.debug("Wrote %s after %.1fs", path, self.manifest.wall_clock)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> RunConfig:
    return load_config(
        path=args.config,
        scale=args.scale,
        seed=args.seed,
        epochs=getattr(args, "epochs", None),
        ablation=getattr(args, "ablation", None),
    )


def cmd_gen_phantoms(args: argparse.Namespace, config: RunConfig) -> int:
    spec = config.phantoms
    if args.cohort:
        spec = PhantomSpec.cohort_preset(args.cohort, seed=config.seed, frame_size=spec.frame_size)
    if args.count is not None:
        spec = replace(spec, count=args.count)
    spec.validate()

    run = Run("gen-phantoms", config, args.out)
    samples = seed_dataset(spec, args.out)
    run.manifest.config["phantoms"] = asdict(spec)
    run.manifest.outputs = {"dataset": str(args.out), "manifest": str(args.out / MANIFEST_NAME)}
    run.finish()
    n_test = sum(s.split == "test" for s in samples)
    print(f"Generated {len(samples)} phantoms ({len(samples) - n_test} train / {n_test} test) in {args.out}")
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    samples = load_dataset(args.data, split="train")
    args.out.mkdir(parents=True, exist_ok=True)
    run = Run(f"train --role {args.role}", config, args.out)
    result = train_stage(args.role, samples, config.geometry, config.model, config.train)
    checkpoint = save_checkpoint(result.net, args.out / "checkpoint")
    log = result.write_log(args.out / "train_log.jsonl")
    run.manifest.inputs = {"data": str(args.data)}
    run.manifest.outputs = {"checkpoint": str(checkpoint), "log": str(log)}
    run.manifest.checkpoints = {str(checkpoint): checkpoint_digest(result.net)}
    run.finish()
    best = result.history[result.best_epoch - 1]
    print(f"{ROLES[args.role]}: best epoch {result.best_epoch}, val_dice={best.val_dice:.4f} -> {checkpoint}")
    return 0


def _input_images(path: Path) -> list[tuple[str, Path]]:
    if path.is_file():
        return [(path.stem.removesuffix("_img"), path)]
    if not path.is_dir():
        raise DataError(f"input not found: {path}")
    files = sorted(path.glob("*_img.pgm")) or sorted(path.glob("*.pgm"))
    if not files:
        raise DataError(f"no .pgm images in {path}")
    return [(f.stem.removesuffix("_img"), f) for f in files]


def contour(mask: np.ndarray) -> np.ndarray:
    return mask & ~ndimage.binary_erosion(mask)


def overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """The image with the mask contour burned in at full intensity."""
    burned = image.copy()
    burned[contour(mask)] = 1.0
    return burned


def cmd_segment(args: argparse.Namespace, config: RunConfig) -> int:
    geometry = config.geometry
    seg_net = load_checkpoint(args.seg)
    loc_net: Network | None = load_checkpoint(args.loc) if args.loc else None
    inputs = _input_images(args.input)

    args.out.mkdir(parents=True, exist_ok=True)
    run = Run("segment", config, args.out)
    records = []
    for sample_id, path in inputs:
        raw = read_pgm(path)
        image = preprocess(raw, geometry)
        if loc_net is None:
            fine = run_full_frame(seg_net, raw, geometry)
            loc_mask = fine
            record: dict[str, Any] = {"id": sample_id, "window": None, "fallback": False}
        else:
            result = run_cascade(loc_net, seg_net, raw, geometry)
            fine, loc_mask = result.fine_mask_full, result.loc_mask
            record = result.to_record(sample_id)
        write_pgm(args.out / f"{sample_id}_pred.pgm", fine)
        write_pgm(args.out / f"{sample_id}_overlay.pgm", overlay(image, fine))
        if args.panel:
            write_pgm(args.out / f"{sample_id}_panel.pgm", np.hstack([image, loc_mask, fine]).astype(np.float64))
        records.append(record)
    (args.out / "cascade.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))

    run.manifest.inputs = {"input": str(args.input), "seg": str(args.seg)}
    if args.loc:
        run.manifest.inputs["loc"] = str(args.loc)
    run.manifest.outputs = {"predictions": str(args.out), "records": str(args.out / "cascade.jsonl")}
    run.manifest.checkpoints = {str(args.seg): checkpoint_digest(seg_net)}
    if loc_net is not None:
        run.manifest.checkpoints[str(args.loc)] = checkpoint_digest(loc_net)
    run.finish()
    print(f"Segmented {len(records)} image(s) -> {args.out}")
    return 0


def _truth_metadata(truth_dir: Path) -> dict[str, dict[str, str]]:
    manifest = truth_dir / MANIFEST_NAME
    if not manifest.exists():
        return {}
    meta = {}
    for line in manifest.read_text().splitlines():
        if line.strip():
            record = json.loads(line)
            meta[record["id"]] = {key: record.get(key, "") for key in ("view_tag", "regime", "split")}
    return meta


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    suffix = "_pred.pgm" if any(args.pred.glob("*_pred.pgm")) else "_mask.pgm"
    preds = sorted(args.pred.glob(f"*{suffix}"))
    if not preds:
        raise DataError(f"no *_pred.pgm or *_mask.pgm files in {args.pred}")
    meta = _truth_metadata(args.data)

    pairs = []
    for pred_path in preds:
        sample_id = pred_path.name.removesuffix(suffix)
        info = meta.get(sample_id, {})
        if args.split and info.get("split") != args.split:
            continue
        truth_path = args.data / f"{sample_id}_mask.pgm"
        if not truth_path.exists():
            raise DataError(f"no ground truth for {sample_id} in {args.data}")
        pred, truth = read_mask(pred_path), read_mask(truth_path)
        if truth.shape != pred.shape:
            truth = preprocess_mask(truth, config.geometry)
            if truth.shape != pred.shape:
                truth = resize_mask(truth, *pred.shape)
        pairs.append(MaskPair(sample_id, pred, truth, "full", info.get("view_tag", ""), info.get("regime", "")))
    if not pairs:
        raise DataError("no prediction/truth pairs to evaluate")

    args.out.mkdir(parents=True, exist_ok=True)
    run = Run("eval", config, args.out)
    report = evaluate_pairs(pairs, config.train.eval_workers)
    metrics = report.write(args.out / "metrics.json", {"pairs": len(pairs), "window_source": args.window_source})
    run.manifest.inputs = {"pred": str(args.pred), "truth": str(args.data)}
    run.manifest.outputs = {"metrics": str(metrics)}
    run.finish()
    print(report.to_table())
    if args.by:
        print(report.by(args.by).to_string(float_format=lambda v: f"{v:.4f}"))
    return 0


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    samples = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    run = Run("ablate", config, args.out)
    report = ablate(samples, config.geometry, config.model, config.train, window_source=args.window_source)
    report.write(args.out)
    run.manifest.inputs = {"data": str(args.data)}
    run.manifest.outputs = {"table": str(args.out / "ablation.txt"), "json": str(args.out / "ablation.json")}
    run.finish()
    print(report.to_table())
    return 0


COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms,
    "train": cmd_train,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file with model/train/geometry/phantoms sections")
    common.add_argument(
        "--scale",
        choices=SCALES,
        help="preset; clinical is an alias of paper (default: the config file scale, $CASUNEXT_SCALE or desk)",
    )
    common.add_argument("--seed", type=int, help="run seed (default: $CASUNEXT_SEED or 0)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = ArgumentParser(prog="casunext", description="Cascade brain segmentation on synthetic phantoms.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-phantoms", parents=[common], help="generate a phantom dataset")
    gen.add_argument("--count", type=int, help="number of phantoms (overrides the config)")
    gen.add_argument("--cohort", choices=sorted(COHORT_PRESETS), help="cohort preset")

    trn = sub.add_parser("train", parents=[common], help="train Loc-Net or Seg-Net")
    trn.add_argument("--role", choices=sorted(ROLES), required=True)
    trn.add_argument("--data", type=Path, required=True, help="phantom dataset directory")
    trn.add_argument("--epochs", type=int, help="override epochs")
    trn.add_argument("--ablation", choices=sorted(ABLATION_FLAGS), default=None)

    seg = sub.add_parser("segment", parents=[common], help="run the cascade on images")
    seg.add_argument("--loc", type=Path, help="Loc-Net checkpoint (omit for single-stage full-frame)")
    seg.add_argument("--seg", type=Path, required=True, help="Seg-Net checkpoint")
    seg.add_argument("--input", type=Path, required=True, help="image file or directory of .pgm images")
    seg.add_argument("--panel", action="store_true", help="also write input | loc | fine panels")

    ev = sub.add_parser("eval", parents=[common], help="score predicted masks against ground truth")
    ev.add_argument("--pred", type=Path, required=True, help="directory of <id>_pred.pgm masks")
    ev.add_argument("--data", type=Path, required=True, help="directory of <id>_mask.pgm ground truth")
    ev.add_argument("--split", choices=["train", "test"], help="restrict to one split of the dataset")
    ev.add_argument("--by", choices=["view_tag", "regime"], help="also print a per-group breakdown")
    ev.add_argument("--window-source", choices=WINDOW_SOURCES, default="predicted")

    abl = sub.add_parser("ablate", parents=[common], help="train and score the four ablation variants")
    abl.add_argument("--data", type=Path, required=True, help="phantom dataset directory")
    abl.add_argument("--epochs", type=int, help="override epochs")
    abl.add_argument("--window-source", choices=WINDOW_SOURCES, default="predicted")
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    if getattr(args, "epochs", None) is not None and args.epochs <= 0:
        parser.error("--epochs must be positive")
    if args.out is None and not args.dump_config:
        parser.error("--out is required")
    try:
        config = resolve_config(args)
        if args.dump_config:
            print(dump_config(config), end="")
            return 0
        return COMMANDS[args.command](args, config)
    except (CasUNextError, OSError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
