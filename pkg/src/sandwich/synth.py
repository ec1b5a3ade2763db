"""Deterministic synthetic motor-imagery datasets.

Every trial is broadband Gaussian noise plus a band-limited (mu-band)
oscillation on each channel. A label attenuates that oscillation on its
designated channels, e.g. left-hand imagery damps the right motor strip.
Subjects scale the oscillation per channel; datasets may scramble the
channel order of the shared montage so that only a dataset-specific
spatial filter can undo it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import COMMON_17, DatasetDescriptor, TrialTensor, ValidationError

EXTRA_CHANNELS = (
    "Cz", "FCz", "F3", "F4", "FC3", "FC4", "FC5", "FC6", "CP5", "CP6", "P3", "P4",
    "O1", "O2", "Oz", "T7", "T8", "Fp1", "Fp2", "AF3", "AF4", "F7", "F8", "TP7", "TP8",
    "P7", "P8", "PO3", "PO4", "POz", "F1", "F2", "F5", "F6", "FT7", "FT8", "P5", "P6",
    "C3h", "C4h", "PO7", "PO8", "AFz", "Fpz", "Iz", "FT9", "FT10",
)
ALL_CHANNELS = COMMON_17 + EXTRA_CHANNELS

LEFT_MOTOR = ("C5", "C3", "C1", "CP3", "CP1")
RIGHT_MOTOR = ("C2", "C4", "C6", "CP2", "CP4")
MIDLINE = ("FC1", "FC2", "CPz", "Cz", "FCz")


@dataclass(frozen=True)
class ClassSignature:
    label: str
    attenuated: tuple[str, ...] = ()
    attenuation: float = 0.5
    band_center_hz: float = 10.0
    bandwidth_hz: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "attenuated", tuple(self.attenuated))
        if not 0 < self.attenuation <= 1:
            raise ValidationError(f"signature {self.label}: attenuation must be in (0, 1]")
        if self.bandwidth_hz <= 0 or self.band_center_hz - self.bandwidth_hz / 2 <= 0:
            raise ValidationError(f"signature {self.label}: band must lie above 0 Hz")


def default_signatures(attenuation: float = 0.5) -> tuple[ClassSignature, ...]:
    return (
        ClassSignature("LH", RIGHT_MOTOR, attenuation),
        ClassSignature("RH", LEFT_MOTOR, attenuation),
        ClassSignature("Feet", MIDLINE, attenuation),
        ClassSignature("Tongue", ("C5", "C6", "CP3", "CP4"), attenuation),
        ClassSignature("Both hands", LEFT_MOTOR + RIGHT_MOTOR, attenuation),
        ClassSignature("Rest", (), 1.0),
    )


@dataclass(frozen=True)
class DatasetSynth:
    dataset_id: str
    n_subjects: int
    trials_per_subject: int
    n_channels: int
    sampling_rate_hz: float
    labels: tuple[str, ...]
    trial_s: float = 4.0
    permute_channels: bool = False
    band_shift_hz: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        for name in ("n_subjects", "trials_per_subject", "n_channels"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{self.dataset_id}: {name} must be >= 1")
        if self.n_channels > len(ALL_CHANNELS):
            raise ValidationError(f"{self.dataset_id}: n_channels exceeds {len(ALL_CHANNELS)}")
        if self.sampling_rate_hz <= 0:
            raise ValidationError(f"{self.dataset_id}: sampling_rate_hz must be > 0")
        if not self.labels:
            raise ValidationError(f"{self.dataset_id}: labels must be non-empty")

    @property
    def channel_names(self) -> tuple[str, ...]:
        return ALL_CHANNELS[: self.n_channels]


@dataclass(frozen=True)
class SynthSpec:
    datasets: tuple[DatasetSynth, ...]
    signatures: tuple[ClassSignature, ...] = field(default_factory=default_signatures)
    gain_range: tuple[float, float] = (1.0, 1.0)
    noise_std: float = 1.0
    oscillation_amplitude: float = 2.0
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "signatures", tuple(self.signatures))
        object.__setattr__(self, "gain_range", tuple(self.gain_range))
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            raise ValidationError("gain_range must satisfy 0 < lo <= hi")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        known = {s.label for s in self.signatures}
        for d in self.datasets:
            missing = set(d.labels) - known
            if missing:
                raise ValidationError(f"{d.dataset_id}: labels {sorted(missing)} have no signature")
        ids = [d.dataset_id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise ValidationError("dataset ids must be unique")

    @property
    def n_datasets(self) -> int:
        return len(self.datasets)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SynthSpec":
        try:
            datasets = tuple(DatasetSynth(**x) for x in d["datasets"])
            sigs = d.get("signatures")
            signatures = tuple(ClassSignature(**s) for s in sigs) if sigs else default_signatures()
            rest = {k: v for k, v in d.items() if k not in ("datasets", "signatures")}
            return cls(datasets=datasets, signatures=signatures, **rest)
        except KeyError as e:
            raise ValidationError(f"synth spec is missing field {e.args[0]!r}") from e
        except TypeError as e:
            raise ValidationError(f"synth spec: {e}") from e


def band_limited_noise(rng: np.random.Generator, shape, rate_hz: float,
                       lo_hz: float, hi_hz: float) -> np.ndarray:
    """Unit-RMS noise confined to [lo_hz, hi_hz] along the last axis."""
    n = shape[-1]
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(n, 1.0 / rate_hz)
    spec[..., (freqs < lo_hz) | (freqs > hi_hz)] = 0
    x = np.fft.irfft(spec, n=n, axis=-1)
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True))
    return x / np.where(rms > 0, rms, 1.0)


def _generate_one(spec: SynthSpec, ds: DatasetSynth, index: int):
    rng = np.random.default_rng([spec.seed, index])
    channels = ds.channel_names
    sig = {s.label: s for s in spec.signatures}
    n_samples = int(round(ds.trial_s * ds.sampling_rate_hz))

    # dataset-level montage scramble among the shared channels present
    perm = np.arange(len(channels))
    if ds.permute_channels:
        shared = [i for i, c in enumerate(channels) if c in COMMON_17]
        perm[shared] = rng.permutation(shared)

    data, labels, subjects = [], [], []
    n_labels = len(ds.labels)
    for s in range(ds.n_subjects):
        lo, hi = spec.gain_range
        gains = np.exp(rng.uniform(np.log(lo), np.log(hi), size=len(channels)))
        y = np.arange(ds.trials_per_subject) % n_labels
        y = rng.permutation(y)
        amp = np.empty((ds.trials_per_subject, len(channels)))
        centers = np.empty(ds.trials_per_subject)
        widths = np.empty(ds.trials_per_subject)
        for i, li in enumerate(y):
            cs = sig[ds.labels[li]]
            att = np.array([cs.attenuation if c in cs.attenuated else 1.0 for c in channels])
            amp[i] = spec.oscillation_amplitude * gains * att
            centers[i], widths[i] = cs.band_center_hz + ds.band_shift_hz, cs.bandwidth_hz
        osc = np.empty((ds.trials_per_subject, len(channels), n_samples))
        for c, w in sorted(set(zip(centers.tolist(), widths.tolist()))):
            rows = np.flatnonzero((centers == c) & (widths == w))
            osc[rows] = band_limited_noise(rng, (len(rows), len(channels), n_samples),
                                           ds.sampling_rate_hz, c - w / 2, c + w / 2)
        noise = spec.noise_std * rng.standard_normal((ds.trials_per_subject, len(channels), n_samples))
        x = amp[:, :, None] * osc + noise
        data.append(x[:, perm, :])
        labels.append(y)
        subjects.append(np.full(ds.trials_per_subject, s))

    descriptor = DatasetDescriptor(
        dataset_id=ds.dataset_id,
        channel_names=channels,
        sampling_rate_hz=ds.sampling_rate_hz,
        label_space=tuple(enumerate(ds.labels)),
        subject_ids=tuple(f"{ds.dataset_id}-s{i:02d}" for i in range(ds.n_subjects)),
    )
    trials = TrialTensor(np.concatenate(data).astype(np.float32), np.concatenate(labels),
                         np.concatenate(subjects), ds.dataset_id)
    return descriptor, trials


def generate(spec: SynthSpec) -> list[tuple[DatasetDescriptor, TrialTensor]]:
    return [_generate_one(spec, ds, i) for i, ds in enumerate(spec.datasets)]


TARGET_ID = "tgt_cybathlon"
TARGET_LABELS = ("Rest", "LH", "RH", "Feet")


def beetl_mini_spec(seed: int = 42, *, permute: bool = True, gain_range=(0.6, 1.6),
                    noise_std: float = 1.0, attenuation: float = 0.3,
                    target_trials_per_subject: int = 120) -> SynthSpec:
    """Three heterogeneous sources and one few-trial target."""
    datasets = (
        DatasetSynth("src_bcic", 3, 60, 22, 250.0, ("LH", "RH", "Feet", "Tongue"),
                     permute_channels=permute),
        DatasetSynth("src_cho", 4, 50, 30, 500.0, ("LH", "RH"),
                     permute_channels=permute, trial_s=3.0),
        DatasetSynth("src_physio", 6, 40, 17, 160.0, ("LH", "RH", "Feet", "Rest"),
                     permute_channels=permute),
        DatasetSynth(TARGET_ID, 3, target_trials_per_subject, 24, 250.0, TARGET_LABELS),
    )
    return SynthSpec(datasets, default_signatures(attenuation), gain_range, noise_std,
                     seed=seed)


def make_beetl_mini(seed: int = 42, **kwargs) -> list[tuple[DatasetDescriptor, TrialTensor]]:
    return generate(beetl_mini_spec(seed, **kwargs))


def band_power_features(trials: TrialTensor, rate_hz: float, lo_hz: float = 8.0,
                        hi_hz: float = 12.0) -> np.ndarray:
    """Log mean periodogram power in [lo_hz, hi_hz] per channel."""
    spec = np.abs(np.fft.rfft(trials.data.astype(np.float64), axis=-1)) ** 2
    freqs = np.fft.rfftfreq(trials.n_samples, 1.0 / rate_hz)
    band = (freqs >= lo_hz) & (freqs <= hi_hz)
    return np.log(spec[..., band].mean(-1) + 1e-12)
