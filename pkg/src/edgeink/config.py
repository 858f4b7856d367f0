"""Experiment configuration: one YAML file, strict schema, stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from . import schema
from .data import DatasetConfig
from .edge_trigger import EdgeConfig
from .errors import ConfigError
from .injector import InjectorConfig
from .poisoning import AttackConfig
from .victim import VictimConfig

STAGES = ("train-injector", "poison", "train-victim", "evaluate")
DEFENSES = ("strip", "fine_prune", "activation_clustering", "edge_replacement", "region_removal")


@dataclass
class Seeds:
    injector: int = 0
    poison: int = 1
    victim: int = 2


@dataclass
class EvaluationConfig:
    transforms: list[str] = field(default_factory=lambda: ["none", "flip", "shrink_pad", "rotate", "crop_resize"])
    extra_transforms: list[str] = field(
        default_factory=lambda: ["resize", "gaussian_noise", "gaussian_blur", "cutout", "mixup", "cutmix"])
    shrink_scale: float = 0.8
    crop_scale: float = 0.8
    resize_scale: float = 0.75
    rotate_angle: float = 15.0
    defenses: list[str] = field(default_factory=lambda: list(DEFENSES))
    strip_overlays: int = 100
    strip_samples: int = 200
    prune_rates: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.3, 0.5, 0.7, 0.9])
    ac_samples: int = 5000
    edge_fill_value: float = 125.0
    region_area: float = 0.25
    clean_baseline: bool = False
    track_every: int = 0

    def validate(self):
        from .evaluation.transforms import KINDS

        for kind in self.transforms + self.extra_transforms:
            if kind not in KINDS:
                raise ConfigError(f"evaluation: unknown transform {kind!r}")
        for d in self.defenses:
            if d not in DEFENSES:
                raise ConfigError(f"evaluation: unknown defense {d!r}, expected one of {DEFENSES}")
        if any(not 0 <= r < 1 for r in self.prune_rates):
            raise ConfigError("evaluation.prune_rates must lie in [0, 1)")
        return self


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    output_dir: str = "runs/experiment"
    device: str = "auto"
    stages: list[str] = field(default_factory=lambda: list(STAGES))
    seeds: Seeds = field(default_factory=Seeds)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    edge: EdgeConfig = field(default_factory=EdgeConfig)
    injector: InjectorConfig = field(default_factory=InjectorConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    victim: VictimConfig = field(default_factory=VictimConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def validate(self):
        for s in self.stages:
            if s not in STAGES:
                raise ConfigError(f"unknown stage {s!r}, expected some of {STAGES}")
        if self.device != "auto" and not self.device.startswith(("cpu", "cuda", "mps")):
            raise ConfigError(f"device must be auto, cpu, cuda[:n] or mps, got {self.device!r}")
        return self

    def torch_device(self):
        import torch

        if self.device == "auto":
            return torch.device("cuda" if torch.cuda.is_available() else "cpu")
        return torch.device(self.device)

    def to_dict(self):
        return schema.to_dict(self)

    def hash(self) -> str:
        """sha256 over canonical JSON, leaving out where/how the run executes (output_dir, stages, device)."""
        d = self.to_dict()
        for key in ("output_dir", "stages", "device"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("edgeink.presets").iterdir() if p.name.endswith(".yaml"))


def _read(path_or_preset) -> dict:
    path = Path(path_or_preset)
    if not path.exists():
        name = str(path_or_preset).removesuffix(".yaml")
        candidate = resources.files("edgeink.presets") / f"{name}.yaml"
        if not candidate.is_file():
            raise ConfigError(f"config {path_or_preset!r} is neither a file nor a preset ({', '.join(preset_names())})")
        text = candidate.read_text()
    else:
        text = path.read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path_or_preset}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path_or_preset}: top level must be a mapping")
    return data


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "targets" else v
    return out


def _set(data: dict, dotted: str):
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} must look like key.sub=value")
    key, raw = dotted.split("=", 1)
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path_or_preset, overrides: list[str] | None = None, seed: int | None = None,
                output_dir: str | None = None) -> ExperimentConfig:
    """Read a YAML file (or bundled preset name), apply ``key=value`` overrides and an optional base seed.

    A preset may name another with ``extends: <preset>``; its values are the base.
    """
    data = _read(path_or_preset)
    parent = data.pop("extends", None)
    if parent is not None:
        data = _merge(_read(parent), data)
        data.pop("extends", None)
    for o in overrides or []:
        _set(data, o)
    if seed is not None:
        data["seeds"] = {"injector": seed, "poison": seed + 1, "victim": seed + 2}
    if output_dir is not None:
        data["output_dir"] = output_dir
    return schema.from_dict(ExperimentConfig, data, "config")
