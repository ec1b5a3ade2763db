"""Domain types and the on-disk dataset container.

A dataset directory holds ``manifest.json`` plus three raw blobs:
``data.f32le`` (float32, C-order ``(trial, channel, sample)``),
``labels.i32le`` and ``subjects.i32le`` (int32). All blobs are little-endian.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST = "manifest.json"
DATA_BLOB = "data.f32le"
LABELS_BLOB = "labels.i32le"
SUBJECTS_BLOB = "subjects.i32le"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "int32": "<i4"}


class ValidationError(ValueError):
    """Input violates a type invariant or operation precondition."""


class ShapeError(ValueError):
    pass


class LoadError(IOError):
    """Base class for dataset-directory load failures."""


class MissingBlobError(LoadError):
    pass


class ChecksumMismatchError(LoadError):
    pass


class ShapeMismatchError(LoadError):
    pass


class UnsupportedFormatError(LoadError):
    pass


@dataclass(frozen=True)
class DatasetDescriptor:
    dataset_id: str
    channel_names: tuple[str, ...]
    sampling_rate_hz: float
    label_space: tuple[tuple[int, str], ...]
    subject_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        object.__setattr__(
            self, "label_space", tuple((int(i), str(n)) for i, n in self.label_space)
        )
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        if len(set(self.channel_names)) != len(self.channel_names):
            raise ValidationError(f"{self.dataset_id}: duplicate channel names")
        if not self.sampling_rate_hz > 0:
            raise ValidationError(f"{self.dataset_id}: sampling_rate_hz must be > 0")
        ids = [i for i, _ in self.label_space]
        if ids != list(range(len(ids))):
            raise ValidationError(f"{self.dataset_id}: label ids must be contiguous from 0")

    @property
    def label_names(self) -> tuple[str, ...]:
        return tuple(name for _, name in self.label_space)

    @property
    def n_classes(self) -> int:
        return len(self.label_space)

    def label_id(self, name: str) -> int:
        for i, n in self.label_space:
            if n == name:
                return i
        raise KeyError(f"label {name!r} not in {self.dataset_id} label space")

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "channel_names": list(self.channel_names),
            "sampling_rate_hz": self.sampling_rate_hz,
            "label_space": [[i, n] for i, n in self.label_space],
            "subject_ids": list(self.subject_ids),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetDescriptor":
        return cls(
            dataset_id=d["dataset_id"],
            channel_names=tuple(d["channel_names"]),
            sampling_rate_hz=float(d["sampling_rate_hz"]),
            label_space=tuple((int(i), n) for i, n in d["label_space"]),
            subject_ids=tuple(d["subject_ids"]),
        )

    def replace(self, **changes) -> "DatasetDescriptor":
        d = {
            "dataset_id": self.dataset_id,
            "channel_names": self.channel_names,
            "sampling_rate_hz": self.sampling_rate_hz,
            "label_space": self.label_space,
            "subject_ids": self.subject_ids,
        }
        d.update(changes)
        return DatasetDescriptor(**d)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TrialTensor:
    """A batch of trials ``(n_trials, n_channels, n_samples)`` with provenance."""

    data: np.ndarray
    labels: np.ndarray
    subject_index: np.ndarray
    dataset_id: str

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        subjects = np.asarray(self.subject_index, dtype=np.int64)
        if data.ndim != 3:
            raise ValidationError(f"data must be 3-D (trials, channels, samples), got {data.shape}")
        n = data.shape[0]
        if labels.shape != (n,) or subjects.shape != (n,):
            raise ValidationError(
                f"labels {labels.shape} / subject_index {subjects.shape} do not match {n} trials"
            )
        if not np.all(np.isfinite(data)):
            raise ValidationError(f"{self.dataset_id}: data contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "subject_index", _frozen(subjects))

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    def __len__(self) -> int:
        return self.n_trials

    def take(self, idx) -> "TrialTensor":
        idx = np.asarray(idx)
        return TrialTensor(self.data[idx], self.labels[idx], self.subject_index[idx], self.dataset_id)

    def with_data(self, data: np.ndarray) -> "TrialTensor":
        return TrialTensor(data, self.labels, self.subject_index, self.dataset_id)


def validate_against(descriptor: DatasetDescriptor, trials: TrialTensor) -> None:
    if trials.dataset_id != descriptor.dataset_id:
        raise ValidationError(
            f"trials belong to {trials.dataset_id!r}, descriptor is {descriptor.dataset_id!r}"
        )
    if trials.n_channels != len(descriptor.channel_names):
        raise ValidationError(
            f"{trials.n_channels} data channels vs {len(descriptor.channel_names)} channel names"
        )
    if trials.n_trials:
        if trials.labels.min() < 0 or trials.labels.max() >= descriptor.n_classes:
            raise ValidationError(
                f"labels outside label space [0, {descriptor.n_classes}) of {descriptor.dataset_id}"
            )
        n_subj = len(descriptor.subject_ids)
        if trials.subject_index.min() < 0 or trials.subject_index.max() >= n_subj:
            raise ValidationError(f"subject_index outside [0, {n_subj})")


# Closed schema: nothing but these three fields may ride along with features.
FEATURE_FIELDS = frozenset({"values", "branch_id", "set_index"})


@dataclass(frozen=True)
class FeatureTensor:
    values: np.ndarray
    branch_id: str
    set_index: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        set_index = np.asarray(self.set_index, dtype=np.int64)
        if values.ndim != 3:
            raise ValidationError(f"feature values must be (trials, filters, length), got {values.shape}")
        if set_index.shape != (values.shape[0],):
            raise ValidationError("set_index length must equal the number of trials")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "set_index", _frozen(set_index))

    @classmethod
    def from_fields(cls, **fields) -> "FeatureTensor":
        extra = set(fields) - FEATURE_FIELDS
        if extra:
            raise ValidationError(f"FeatureTensor does not accept fields {sorted(extra)}")
        return cls(**fields)


@dataclass(frozen=True)
class LabelVector:
    values: np.ndarray
    owner: str
    # Never serialized across the federation boundary in multi-head mode.
    local_only: bool = field(default=True)


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def write_dataset(descriptor: DatasetDescriptor, trials: TrialTensor, root) -> Path:
    validate_against(descriptor, trials)
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        blobs = {
            DATA_BLOB: ("float32", trials.data.astype("<f4", copy=False)),
            LABELS_BLOB: ("int32", trials.labels.astype("<i4")),
            SUBJECTS_BLOB: ("int32", trials.subject_index.astype("<i4")),
        }
        entries = {}
        for name, (dtype, arr) in blobs.items():
            raw = np.ascontiguousarray(arr).tobytes()
            (root / name).write_bytes(raw)
            entries[name] = {"dtype": dtype, "shape": list(arr.shape), "sha256": _sha256(raw)}
        manifest = {
            "format_version": FORMAT_VERSION,
            **descriptor.to_json(),
            "byte_order": "little",
            "layout": "C",
            "shape": list(trials.data.shape),
            "blobs": entries,
        }
        path = root / MANIFEST
        path.write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as e:
        raise OSError(f"cannot write dataset to {root}: {e}") from e
    return path


def read_dataset(root) -> tuple[DatasetDescriptor, TrialTensor]:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise MissingBlobError(f"no {MANIFEST} in {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise UnsupportedFormatError(f"malformed manifest {path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION or manifest.get("byte_order") != "little":
        raise UnsupportedFormatError(f"{path}: unsupported format version or byte order")

    arrays = {}
    for name in (DATA_BLOB, LABELS_BLOB, SUBJECTS_BLOB):
        entry = manifest["blobs"].get(name)
        if entry is None or not (root / name).exists():
            raise MissingBlobError(f"{root}: blob {name} missing")
        if entry["dtype"] not in _DTYPES:
            raise UnsupportedFormatError(f"{name}: unsupported dtype {entry['dtype']!r}")
        raw = (root / name).read_bytes()
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape)) * dtype.itemsize
        if len(raw) != expected:
            raise ShapeMismatchError(
                f"{name}: {len(raw)} bytes on disk, manifest shape {list(shape)} needs {expected}"
            )
        if _sha256(raw) != entry["sha256"]:
            raise ChecksumMismatchError(f"{name}: checksum mismatch")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape)

    if list(arrays[DATA_BLOB].shape) != list(manifest["shape"]):
        raise ShapeMismatchError(f"data blob shape disagrees with manifest shape {manifest['shape']}")
    descriptor = DatasetDescriptor.from_json(manifest)
    trials = TrialTensor(
        arrays[DATA_BLOB].astype(np.float32),
        arrays[LABELS_BLOB].astype(np.int64),
        arrays[SUBJECTS_BLOB].astype(np.int64),
        descriptor.dataset_id,
    )
    validate_against(descriptor, trials)
    return descriptor, trials


def select_channels(
    trials: TrialTensor, descriptor: DatasetDescriptor, wanted: Sequence[str]
) -> TrialTensor:
    """Reorder/subset channels to exactly ``wanted``."""
    lookup = {name: i for i, name in enumerate(descriptor.channel_names)}
    idx = []
    for name in wanted:
        if name not in lookup:
            raise KeyError(f"channel {name!r} not in dataset {descriptor.dataset_id}")
        idx.append(lookup[name])
    return trials.with_data(trials.data[:, idx, :])


# The 17 channels shared by every BEETL MI set.
COMMON_17 = (
    "Fz", "FC1", "FC2", "C5", "C3", "C1", "C2", "C4", "C6",
    "CP3", "CP1", "CPz", "CP2", "CP4", "P1", "Pz", "P2",
)
