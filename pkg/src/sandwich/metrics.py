"""Merged-label scoring, perturbation relevance and feature export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .backbones import SandwichModel
from .data import TrialTensor


class ScoringConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MergeScoringMap:
    """Raw label id -> one of exactly three merged classes."""

    name: str
    mapping: Mapping[int, str]

    def __post_init__(self):
        object.__setattr__(self, "mapping", {int(k): str(v) for k, v in dict(self.mapping).items()})
        if len(set(self.mapping.values())) != 3:
            raise ScoringConfigError(
                f"scoring map {self.name!r} must merge into exactly three classes, "
                f"got {sorted(set(self.mapping.values()))}"
            )

    @property
    def classes(self) -> list[str]:
        seen = []
        for k in sorted(self.mapping):
            if self.mapping[k] not in seen:
                seen.append(self.mapping[k])
        return seen

    def merge(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        bad = sorted(set(labels.tolist()) - set(self.mapping))
        if bad:
            raise ScoringConfigError(f"labels {bad} are not mapped by {self.name!r}")
        index = {c: i for i, c in enumerate(self.classes)}
        return np.array([index[self.mapping[int(l)]] for l in labels], dtype=np.int64)

    @classmethod
    def load(cls, path) -> "MergeScoringMap":
        d = json.loads(Path(path).read_text())
        return cls(d["name"], {int(k): v for k, v in d["map"].items()})

    def to_json(self) -> dict:
        return {"name": self.name, "map": {str(k): v for k, v in sorted(self.mapping.items())}}


# The two BEETL MI test sets: the last two labels of each collapse to "others".
SET_A = MergeScoringMap("A", {0: "Rest", 1: "LH", 2: "others", 3: "others"})
SET_B = MergeScoringMap("B", {0: "LH", 1: "RH", 2: "others", 3: "others"})


def merged_confusion(predictions, labels, scoring: MergeScoringMap) -> np.ndarray:
    p, y = scoring.merge(predictions), scoring.merge(labels)
    k = len(scoring.classes)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def merged_weighted_accuracy(predictions, labels, scoring: MergeScoringMap,
                             weighting: str = "macro") -> float:
    """Mean per-merged-class recall ("macro") or support-weighted accuracy ("support")."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have the same length")
    cm = merged_confusion(predictions, labels, scoring)
    support = cm.sum(axis=1)
    if weighting == "support":
        return float(np.trace(cm) / support.sum())
    if weighting != "macro":
        raise ScoringConfigError(f"unknown weighting {weighting!r}")
    present = support > 0
    recalls = np.diag(cm)[present] / support[present]
    return float(recalls.mean())


# --------------------------------------------------------------------------
# Perturbation relevance

ProbaFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class RelevanceMap:
    channel_names: tuple[str, ...]
    # (subject, label) -> per-channel relevance
    scores: dict

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "label", *self.channel_names])
            for (s, l), v in sorted(self.scores.items()):
                w.writerow([s, l, *[repr(float(x)) for x in v]])


def perturbation_relevance(
    proba: ProbaFn,
    trials: TrialTensor,
    label: int,
    noise_scale: float,
    n_repeats: int,
    channel_names: Optional[Sequence[str]] = None,
    seed: int = 42,
) -> RelevanceMap:
    """Mean absolute change of one class probability when a single channel is jittered.

    Noise on channel ``c`` is Gaussian with std ``noise_scale * std(c)``,
    where ``std(c)`` is taken over all trials and samples of that channel.
    """
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    x = np.asarray(trials.data, dtype=np.float32)
    n_ch = x.shape[1]
    names = tuple(channel_names) if channel_names is not None else tuple(f"ch{i}" for i in range(n_ch))
    if len(names) != n_ch:
        raise ValueError("channel_names length does not match data")
    ch_std = x.std(axis=(0, 2))
    scores = {}
    for subj in np.unique(trials.subject_index):
        rows = trials.subject_index == subj
        xs, si = x[rows], trials.subject_index[rows]
        base = proba(xs, si)[:, label]
        rel = np.zeros(n_ch)
        rng = np.random.default_rng([seed, int(subj), label])
        for c in range(n_ch):
            total = 0.0
            for _ in range(n_repeats):
                xp = xs.copy()
                xp[:, c, :] += (noise_scale * ch_std[c] *
                                rng.standard_normal(xp[:, c, :].shape)).astype(np.float32)
                total += float(np.mean(np.abs(proba(xp, si)[:, label] - base)))
            rel[c] = total / n_repeats
        scores[(int(subj), int(label))] = rel
    return RelevanceMap(names, scores)


def model_proba(model: SandwichModel, dataset_id: str) -> ProbaFn:
    """Softmax over the head that serves ``dataset_id`` (eval mode)."""

    def fn(data: np.ndarray, set_index: np.ndarray) -> np.ndarray:
        model.eval()
        with torch.no_grad():
            f = model.branch(dataset_id)(torch.tensor(data, dtype=torch.float32))
            z = model.trunk(f, torch.tensor(np.asarray(set_index)))
            return torch.softmax(model.head(dataset_id)(z), dim=1).numpy()

    return fn


# --------------------------------------------------------------------------
# Feature export

TAP_POINTS = ("pre_common", "post_transfer")


def extract_features(model: SandwichModel, dataset_id: str, trials: TrialTensor,
                     tap_point: str) -> np.ndarray:
    if tap_point not in TAP_POINTS:
        raise ScoringConfigError(f"unknown tap point {tap_point!r}; use one of {TAP_POINTS}")
    model.eval()
    with torch.no_grad():
        f = model.branch(dataset_id)(torch.tensor(trials.data, dtype=torch.float32))
        if tap_point == "pre_common":
            return f.flatten(1).numpy()
        z = model.trunk(f, torch.tensor(trials.subject_index))
        return z.flatten(1).numpy()


def export_features(model: SandwichModel, trials_by_dataset: Mapping[str, TrialTensor],
                    tap_point: str, path) -> Path:
    """Delimited table: trial_id, dataset_id, label, set_index, f0..fk."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = {d: extract_features(model, d, t, tap_point) for d, t in sorted(trials_by_dataset.items())}
    width = {b.shape[1] for b in blocks.values()}
    if len(width) != 1:
        raise ValueError(f"datasets disagree on feature width at {tap_point}: {width}")
    k = width.pop()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_id", "dataset_id", "label", "set_index", *[f"f{i}" for i in range(k)]])
        for d, feats in blocks.items():
            t = trials_by_dataset[d]
            for i in range(t.n_trials):
                w.writerow([i, d, int(t.labels[i]), int(t.subject_index[i]),
                            *[repr(float(v)) for v in feats[i]]])
    return path


def read_feature_table(path) -> tuple[list[dict], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    meta = [dict(zip(header[:4], r[:4])) for r in body]
    values = np.array([[float(v) for v in r[4:]] for r in body]) if body else np.zeros((0, len(header) - 4))
    return meta, values
