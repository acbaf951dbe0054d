"""Dataclass configs and YAML loading with flag overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any

import yaml


@dataclass
class ModelConfig:
    # defaults are the reference configuration
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 8
    conv_depth: int = 3
    fusion_depth: int = 2
    block_size: int = 7
    n_steps: int = 22
    n_channels: int = 2
    intervals_per_day: int = 48
    n_external: int = 0
    kernel_size: int = 3
    d_ff: int | None = None
    ten_hidden: int | None = None
    dropout: float = 0.1
    softmax_mode: str = "per_position"
    share_conv_stacks: bool = False
    use_steg: bool = True
    ln_eps: float = 1e-6
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 1 or self.conv_depth < 1 or self.fusion_depth < 1:
            raise ValueError("layer counts must be >= 1")
        if self.block_size % 2 == 0 or self.kernel_size % 2 == 0:
            raise ValueError("block_size and kernel_size must be odd")
        if self.softmax_mode not in ("per_position", "global"):
            raise ValueError(f"unknown softmax_mode {self.softmax_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def ffn_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    @property
    def ten_width(self) -> int:
        return self.ten_hidden if self.ten_hidden is not None else self.d_model


@dataclass
class DatasetConfig:
    n_rows: int = 16
    n_cols: int = 12
    lat_min: float = 40.699031
    lat_max: float = 40.849878
    lon_min: float = -74.022216
    lon_max: float = -73.873868
    interval_minutes: int = 30
    epoch: str = "2016-01-01T00:00:00"
    n_days: int | None = None
    days: int = 7
    per_day: int = 3
    train_days: int = 40
    test_days: int | None = None
    val_fraction: float = 0.2
    external_file: str | None = None
    external_columns: list[str] = field(default_factory=list)
    seed: int = 0

    @property
    def epoch_datetime(self) -> datetime:
        return datetime.fromisoformat(self.epoch)


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 20
    max_steps: int | None = None
    patience: int = 5
    warmup_steps: int = 1000
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float | None = 1.0
    dropout: float = 0.1
    seed: int = 0
    precision: str = "float32"
    checkpoint_dir: str = "checkpoints"
    val_threshold: float = 0.0
    steps_per_epoch: int | None = None
    time_budget_s: float | None = None
    val_max_samples: int | None = None   # evenly spaced validation subset per epoch

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {"dataset": DatasetConfig, "model": ModelConfig, "train": TrainConfig}


def _build(cls, values: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


def load_run_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> tuple[RunConfig, dict[str, str]]:
    """Resolve defaults < file < overrides.

    ``overrides`` uses dotted keys (``model.d_model``). Returns the config and
    a map from each non-default key to where its value came from.
    """
    merged: dict[str, dict[str, Any]] = {k: {} for k in _SECTIONS}
    origin: dict[str, str] = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        for section, values in raw.items():
            if section not in _SECTIONS:
                raise ValueError(f"unknown config section {section!r}")
            for k, v in (values or {}).items():
                merged[section][k] = v
                origin[f"{section}.{k}"] = "file"
    for dotted, v in (overrides or {}).items():
        if v is None:
            continue
        section, key = dotted.split(".", 1)
        merged[section][key] = v
        origin[dotted] = "flag"
    cfg = RunConfig(**{s: _build(cls, merged[s]) for s, cls in _SECTIONS.items()})
    return cfg, origin


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    return _build(ModelConfig, d)


def dump_yaml(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
