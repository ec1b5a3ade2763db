"""Load, preprocess, split and train one configured experiment."""

from __future__ import annotations

import datetime as _dt
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import __version__
from .backbones import (
    SandwichModel, build_head_spec, build_inception_branch, build_inception_trunk,
    build_shallow_branch, build_shallow_trunk,
)
from .config import DatasetEntry, ExperimentConfig
from .data import DatasetDescriptor, TrialTensor, read_dataset, select_channels
from .federation import (
    AuditLog, Federation, MonolithicTrainer, NodeData, load_checkpoints, predict,
    save_checkpoints, train,
)
from .preprocess import run_pipeline

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    datas: dict[str, NodeData]
    # held-out evaluation trials per dataset id (target only unless test paths are given)
    test: dict[str, TrialTensor]

    @property
    def target(self) -> str:
        return next(n for n, d in self.datas.items() if d.role == "target")


def _load(cfg: ExperimentConfig, entry: DatasetEntry, path: str, balance: bool):
    descriptor, trials = read_dataset(path)
    channels = cfg.channel_list(entry, descriptor.channel_names)
    trials = select_channels(trials, descriptor, channels)
    descriptor = descriptor.replace(channel_names=tuple(channels))
    return run_pipeline(descriptor, trials, cfg.preprocess, balance_trials=balance)


def split_last_per_subject(trials: TrialTensor, n_last: int) -> tuple[TrialTensor, TrialTensor]:
    """(train, validation): the last ``n_last`` trials of every subject are held out."""
    val = np.zeros(trials.n_trials, dtype=bool)
    for s in np.unique(trials.subject_index):
        rows = np.flatnonzero(trials.subject_index == s)
        if len(rows) <= n_last:
            raise ValueError(f"subject {s} of {trials.dataset_id} has only {len(rows)} trials, "
                             f"cannot hold out {n_last}")
        val[rows[-n_last:]] = True
    return trials.take(np.flatnonzero(~val)), trials.take(np.flatnonzero(val))


def prepare(cfg: ExperimentConfig) -> Prepared:
    datas, test = {}, {}
    for entry in cfg.datasets:
        if entry.role == "target":
            desc, trials = _load(cfg, entry, entry.path, balance=False)
            tr, val = split_last_per_subject(trials, cfg.val_trials_per_subject)
            datas[desc.dataset_id] = NodeData(desc, tr, val, "target")
            test[desc.dataset_id] = val
        else:
            desc, trials = _load(cfg, entry, entry.path, balance=True)
            datas[desc.dataset_id] = NodeData(desc, trials, None, "source")
        if entry.test_path is not None:
            tdesc, ttrials = _load(cfg, entry, entry.test_path, balance=False)
            if tdesc.dataset_id != desc.dataset_id:
                raise ValueError(f"test set {tdesc.dataset_id!r} does not match {desc.dataset_id!r}")
            test[desc.dataset_id] = ttrials
    if len(datas) != len(cfg.datasets):
        raise ValueError("dataset ids must be unique across the configured paths")
    return Prepared(datas, test)


def build_model(cfg: ExperimentConfig, datas: dict[str, NodeData]) -> SandwichModel:
    n_samples = {d.train.n_samples for d in datas.values()}
    if len(n_samples) != 1:
        raise ValueError(f"datasets disagree on window length: {n_samples}")
    if cfg.backbone == "shallow_conv":
        branches = {n: build_shallow_branch(d.train.n_channels, **cfg.branch_overrides)
                    for n, d in datas.items()}
        trunk = build_shallow_trunk(cfg.transfer, **cfg.trunk_overrides)
    else:
        branches = {n: build_inception_branch(d.train.n_channels, **cfg.branch_overrides)
                    for n, d in datas.items()}
        trunk = build_inception_trunk(cfg.transfer, **cfg.trunk_overrides)
    head = build_head_spec(cfg.head, {n: d.descriptor.n_classes for n, d in datas.items()},
                           len(cfg.label_union))
    return SandwichModel(branches, trunk, head, n_samples.pop(),
                         shared_branch=cfg.branches == "pooled", seed=cfg.seed)


Trainer = Union[Federation, MonolithicTrainer]


def make_trainer(cfg: ExperimentConfig, model: SandwichModel, datas: dict[str, NodeData],
                 audit_path=None) -> Trainer:
    tcfg = cfg.train_config()
    if cfg.branches == "pooled":
        return MonolithicTrainer(model, datas, tcfg, cfg.label_union)
    audit = AuditLog(cfg.head, len(datas), audit_path)
    return Federation(model, datas, tcfg, cfg.label_union, audit, strict=cfg.audit_strict)


def fit(trainer: Trainer, epochs: Optional[int] = None):
    if isinstance(trainer, Federation):
        return train(trainer, epochs)
    report = trainer.train(epochs)
    report.audit = {"mode": "centralized", "messages": 0, "violations": []}
    return report


def predict_with(trainer: Trainer, dataset_id: str, trials: TrialTensor) -> np.ndarray:
    if isinstance(trainer, Federation):
        return predict(trainer, dataset_id, trials)
    return trainer.predict(dataset_id, trials)


def report_header() -> dict:
    return {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "version": __version__}


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_train(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Train and write ``checkpoints/``, ``report.json``, ``audit.ndjson`` and ``config.json``."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    prepared = prepare(cfg)
    model = build_model(cfg, prepared.datas)
    trainer = make_trainer(cfg, model, prepared.datas, out / "audit.ndjson")
    report = fit(trainer)
    body = report.to_json()
    if cfg.epochs > 0:
        save_checkpoints(model, out / "checkpoints")
    body["checkpoint_written"] = cfg.epochs > 0
    result = {"header": report_header(), "config": cfg.to_json(), **body}
    write_json(out / "report.json", result)
    return result


def restore(cfg: ExperimentConfig, checkpoint_dir, audit_path=None):
    """Rebuild model and trainer from config and owner-partitioned checkpoints."""
    prepared = prepare(cfg)
    model = build_model(cfg, prepared.datas)
    load_checkpoints(model, checkpoint_dir)
    trainer = make_trainer(cfg, model, prepared.datas, audit_path)
    return prepared, model, trainer
