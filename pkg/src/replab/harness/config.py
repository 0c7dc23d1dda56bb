"""Experiment configuration: JSON files validated against a strict schema.

Unknown keys are rejected by name; every run is fully determined by
(config, seed). The schema is documented in the README and mirrored by the
dataclasses below.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..builder import NetworkSpec, StageSpec


class ConfigError(ValueError):
    pass


@dataclass
class ArchConfig:
    family: str = "resnet_basic"
    stages: list = field(default_factory=lambda: [[5, 8]])  # [blocks, width(, mid)]
    num_classes: int = 4
    in_channels: int = 1
    image_size: int = 8
    kernel: int = 3
    k: int = 4  # replacement interval
    method: str = "repl"
    neighbors: str = "both"
    coeff_mode: str = "two"
    vit_heads: int = 2
    vit_mlp_ratio: int = 4
    vit_synth: str = "headwise"
    vit_use_attn: bool = True
    vit_use_mlp: bool = True
    patch_size: int = 4

    def to_spec(self, method: str | None = None) -> NetworkSpec:
        stages = []
        for entry in self.stages:
            if isinstance(entry, dict):
                stages.append(StageSpec(**entry))
            else:
                stages.append(StageSpec(*entry))
        spec = NetworkSpec(
            family=self.family, stages=stages, num_classes=self.num_classes,
            in_channels=self.in_channels, image_size=self.image_size,
            kernel=self.kernel, K=self.k, method=method or self.method,
            neighbors=self.neighbors, coeff_mode=self.coeff_mode,
            vit_heads=self.vit_heads, vit_mlp_ratio=self.vit_mlp_ratio,
            vit_synth=self.vit_synth, vit_use_attn=self.vit_use_attn,
            vit_use_mlp=self.vit_use_mlp, patch_size=self.patch_size)
        try:
            spec.validate()
        except ValueError as e:
            raise ConfigError(f"arch: {e}") from e
        return spec


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | idx | csv
    classes: int = 4
    train_size: int = 2000
    test_size: int = 500
    style: str = "blobs"  # blobs | textures (synthetic only)
    noise: float = 0.5
    train_images: str | None = None  # idx paths
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_path: str | None = None  # csv paths
    test_path: str | None = None


@dataclass
class TrainingConfig:
    optimizer: str = "sgd"  # sgd | adamw
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 32
    schedule: str = "cosine"  # cosine | constant
    grad_workers: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only


@dataclass
class ExperimentConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs/default"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


_SECTIONS = {"arch": ArchConfig, "dataset": DatasetConfig, "training": TrainingConfig}


def _build_section(cls, data: dict, section: str):
    known = set(cls.__dataclass_fields__)
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key!r}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{section}: {e}") from e


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    known = {"arch", "dataset", "training", "seeds", "out_dir"}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
    cfg = ExperimentConfig(
        arch=_build_section(ArchConfig, data.get("arch", {}), "arch"),
        dataset=_build_section(DatasetConfig, data.get("dataset", {}), "dataset"),
        training=_build_section(TrainingConfig, data.get("training", {}), "training"),
        seeds=data.get("seeds", [0]),
        out_dir=data.get("out_dir", "runs/default"),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    cfg.arch.to_spec()  # raises ConfigError on bad arch, including k < 2
    d = cfg.dataset
    if d.kind not in ("synthetic", "idx", "csv"):
        raise ConfigError(f"dataset.kind: unknown kind {d.kind!r}")
    if d.kind == "synthetic" and d.style not in ("blobs", "textures"):
        raise ConfigError(f"dataset.style: unknown style {d.style!r}")
    if d.kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if getattr(d, key) is None:
                raise ConfigError(f"dataset.{key} is required for idx datasets")
    if d.kind == "csv":
        for key in ("train_path", "test_path"):
            if getattr(d, key) is None:
                raise ConfigError(f"dataset.{key} is required for csv datasets")
    if d.classes < 2:
        raise ConfigError("dataset.classes must be >= 2")
    if cfg.arch.num_classes != d.classes:
        raise ConfigError(
            f"arch.num_classes ({cfg.arch.num_classes}) != dataset.classes ({d.classes})")
    t = cfg.training
    if t.optimizer not in ("sgd", "adamw"):
        raise ConfigError(f"training.optimizer: unknown optimizer {t.optimizer!r}")
    if t.schedule not in ("cosine", "constant"):
        raise ConfigError(f"training.schedule: unknown schedule {t.schedule!r}")
    if t.lr <= 0 or t.epochs < 0 or t.batch_size < 1 or t.grad_workers < 1:
        raise ConfigError("training: lr > 0, epochs >= 0, batch_size >= 1, grad_workers >= 1")
    if not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seeds must be a non-empty list of integers")


def load_config(path) -> ExperimentConfig:
    """Read, parse, and validate a JSON config file; defaults are filled in."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config parse error in {path}: {e}") from e
    return parse_config(data)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Flag-over-file precedence: dotted keys like ``arch.k`` replace values."""
    data = json.loads(cfg.to_json())
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) == 1:
            if parts[0] not in data:
                raise ConfigError(f"unknown key {dotted!r}")
            data[parts[0]] = value
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            section = data.setdefault(parts[0], {})
            if parts[1] not in _SECTIONS[parts[0]].__dataclass_fields__:
                raise ConfigError(f"unknown key {dotted!r}")
            section[parts[1]] = value
        else:
            raise ConfigError(f"unknown key {dotted!r}")
    return parse_config(data)
