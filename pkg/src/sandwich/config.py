"""Experiment configuration (JSON, written back with every default filled in)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .alignment import AlignmentConfig, KernelConfig
from .backbones import UNIFIED_LABELS
from .data import COMMON_17
from .federation.runtime import TrainConfig
from .preprocess import PreprocessConfig

BACKBONES = ("shallow_conv", "inception")
HEADS = ("unified", "multi")
TRANSFERS = ("none", "mmd", "deepset")
BRANCH_MODES = ("per_dataset", "pooled")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetEntry:
    path: str
    role: str = "source"  # source | target
    test_path: Optional[str] = None
    channels: Optional[tuple[str, ...]] = None  # overrides the experiment channel choice

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ConfigError(f"dataset role must be source or target, got {self.role!r}")
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(self.channels))


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple[DatasetEntry, ...]
    backbone: str = "inception"
    head: str = "multi"
    transfer: str = "deepset"
    branches: str = "per_dataset"
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    channels: Union[str, tuple[str, ...]] = "common17"  # common17 | all | explicit list
    batch_size: int = 10
    lr: Optional[float] = None
    weight_decay: float = 5e-4
    epochs: int = 30
    seed: int = 42
    trials_per_set: Optional[int] = None
    max_steps_per_epoch: Optional[int] = None
    val_trials_per_subject: int = 20
    label_union: tuple[str, ...] = UNIFIED_LABELS
    branch_overrides: dict = field(default_factory=dict)
    trunk_overrides: dict = field(default_factory=dict)
    audit_strict: bool = True
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "label_union", tuple(self.label_union))
        if not isinstance(self.channels, str):
            object.__setattr__(self, "channels", tuple(self.channels))
        elif self.channels not in ("common17", "all"):
            raise ConfigError(f"channels must be 'common17', 'all' or a list, got {self.channels!r}")
        for name, allowed in (("backbone", BACKBONES), ("head", HEADS), ("transfer", TRANSFERS),
                              ("branches", BRANCH_MODES)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        targets = [d for d in self.datasets if d.role == "target"]
        if len(targets) != 1:
            raise ConfigError(f"exactly one target dataset required, got {len(targets)}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.val_trials_per_subject < 1:
            raise ConfigError("val_trials_per_subject must be >= 1")

    def channel_list(self, entry: DatasetEntry, available) -> tuple[str, ...]:
        if entry.channels is not None:
            return entry.channels
        if self.channels == "common17":
            return COMMON_17
        if self.channels == "all":
            return tuple(available)
        return self.channels

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            head_mode=self.head,
            transfer_mode=self.transfer,
            alignment=self.alignment,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            seed=self.seed,
            trials_per_set=self.trials_per_set,
            max_steps_per_epoch=self.max_steps_per_epoch,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return ExperimentConfig(**d)

    # -- serialization -----------------------------------------------------

    def to_json(self) -> dict:
        d = asdict(self)
        d["datasets"] = [asdict(e) for e in self.datasets]
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            d["datasets"] = tuple(DatasetEntry(**e) for e in d["datasets"])
            if "alignment" in d:
                a = dict(d["alignment"])
                a["kernel"] = KernelConfig(**a.get("kernel", {}))
                d["alignment"] = AlignmentConfig(**a)
            if "preprocess" in d:
                d["preprocess"] = PreprocessConfig(**d["preprocess"])
            return cls(**d)
        except KeyError as e:
            raise ConfigError(f"config is missing field {e.args[0]!r}") from e
        except TypeError as e:
            raise ConfigError(f"config: {e}") from e

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        cfg = cls.from_json(raw)
        # dataset paths are relative to the config file
        entries = tuple(
            DatasetEntry(str((path.parent / e.path).resolve()), e.role,
                         str((path.parent / e.test_path).resolve()) if e.test_path else None,
                         e.channels)
            for e in cfg.datasets
        )
        return cfg.replace(datasets=entries)
