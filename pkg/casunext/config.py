"""Run configuration: named presets, YAML files and command-line overrides.

Resolution order: preset (``--scale``, else the file's ``scale``, else ``CASUNEXT_SCALE``, else
``desk``), then the YAML file, then flags. A YAML file holds any of the sections ``model``, ``train``,
``geometry``, ``phantoms`` plus top-level ``seed`` and ``scale``.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import yaml

from casunext.cascade import GeometrySpec
from casunext.errors import ConfigError
from casunext.network import ModelConfig
from casunext.synthetic_data.generate import PhantomSpec
from casunext.training import TrainConfig

# `clinical` is an alias of the 768/512/256 `paper` preset
SCALE_ALIASES = {"clinical": "paper"}
SCALES = ("desk", "paper", *SCALE_ALIASES)
ABLATION_FLAGS = {
    "none": {},
    "attention": {"use_attention": False},
    "depthwise": {"use_depthwise": False},
    "cascade": {"use_cascade": False},
}
SECTIONS = ("model", "train", "geometry", "phantoms")

DEFAULT_SCALE = os.environ.get("CASUNEXT_SCALE", "desk")
DEFAULT_SEED = int(os.environ.get("CASUNEXT_SEED", "0"))


@dataclass
class RunConfig:
    scale: str
    seed: int
    model: ModelConfig
    train: TrainConfig
    geometry: GeometrySpec
    phantoms: PhantomSpec

    def with_seed(self, seed: int) -> RunConfig:
        return replace(
            self,
            seed=seed,
            model=replace(self.model, seed=seed),
            train=replace(self.train, seed=seed),
            phantoms=replace(self.phantoms, seed=seed),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "scale": self.scale,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "geometry": asdict(self.geometry),
            "phantoms": asdict(self.phantoms),
        }


def preset(scale: str, seed: int | None = None) -> RunConfig:
    seed = DEFAULT_SEED if seed is None else seed
    scale = SCALE_ALIASES.get(scale, scale)
    geometry = GeometrySpec.preset(scale)
    if scale == "paper":
        train = TrainConfig(epochs_loc=100, epochs_seg=300)
    else:
        train = TrainConfig()
    config = RunConfig(
        scale=scale,
        seed=seed,
        model=ModelConfig(input_size=geometry.resize_to),
        train=train,
        geometry=geometry,
        phantoms=PhantomSpec(frame_size=geometry.edge_crop),
    )
    return config.with_seed(seed)


def _merge(obj: Any, section: dict[str, Any], name: str) -> dict[str, Any]:
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    unknown = set(section) - {f.name for f in fields(obj)}
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return {**asdict(obj), **section}


def apply_file(config: RunConfig, data: dict[str, Any]) -> RunConfig:
    """Overlay the file's sections on `config`. A top-level `scale` is handled by `load_config`."""
    unknown = set(data) - {*SECTIONS, "seed", "scale"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    train = TrainConfig.from_dict(_merge(config.train, data.get("train", {}), "train"))
    try:
        geometry = GeometrySpec(**_merge(config.geometry, data.get("geometry", {}), "geometry"))
    except TypeError as exc:
        raise ConfigError(f"geometry: {exc}") from None
    # Loc-Net runs at resize_to unless the file pins the input size
    model_section = data.get("model", {})
    if isinstance(model_section, dict):
        model_section = {"input_size": geometry.resize_to, **model_section}
    model = ModelConfig.from_dict(_merge(config.model, model_section, "model"))
    section = data.get("phantoms", {})
    base = config.phantoms
    if isinstance(section, dict) and "cohort" in section:
        section = dict(section)
        base = PhantomSpec.cohort_preset(section.pop("cohort"), frame_size=config.phantoms.frame_size)
    phantoms = PhantomSpec(**_merge(base, section, "phantoms"))
    phantoms.validate()
    resolved = replace(config, model=model, train=train, geometry=geometry, phantoms=phantoms)
    return resolved.with_seed(int(data["seed"])) if "seed" in data else resolved


def read_config_file(path: Path) -> dict[str, Any]:
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_config(
    path: Path | None = None,
    scale: str | None = None,
    seed: int | None = None,
    epochs: int | None = None,
    ablation: str | None = None,
) -> RunConfig:
    data = read_config_file(Path(path)) if path is not None else None
    scale = scale or (data or {}).get("scale") or DEFAULT_SCALE
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}, expected one of {SCALES}")
    config = preset(scale)
    if data is not None:
        config = apply_file(config, data)
    if seed is not None:
        config = config.with_seed(seed)
    if epochs is not None:
        config = replace(config, train=replace(config.train, epochs_loc=epochs, epochs_seg=epochs))
    if ablation is not None:
        if ablation not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation {ablation!r}, expected one of {sorted(ABLATION_FLAGS)}")
        config = replace(config, model=replace(config.model, **ABLATION_FLAGS[ablation]))
    return config


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
