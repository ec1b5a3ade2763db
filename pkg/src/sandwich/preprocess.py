"""Signal conditioning: bandpass, resample, window, normalize, balance."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.signal import butter, resample_poly, sosfiltfilt

from .data import DatasetDescriptor, TrialTensor, ValidationError

NORM_EPS = 1e-8


class ConfigError(ValueError):
    pass


class UnsupportedError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    band_lo_hz: float = 4.0
    band_hi_hz: float = 32.0
    filter_order: int = 5
    target_rate_hz: float = 200.0
    window_s: float = 3.0
    balance_target: Optional[int] = 2880

    def __post_init__(self):
        if not 0 < self.band_lo_hz < self.band_hi_hz < self.target_rate_hz / 2:
            raise ConfigError(
                f"need 0 < band_lo ({self.band_lo_hz}) < band_hi ({self.band_hi_hz}) "
                f"< target_rate/2 ({self.target_rate_hz / 2})"
            )
        if self.filter_order < 1:
            raise ConfigError("filter_order must be >= 1")
        if self.window_s <= 0:
            raise ConfigError("window_s must be > 0")
        if self.balance_target is not None and self.balance_target <= 0:
            raise ConfigError("balance_target must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def bandpass(trials: TrialTensor, cfg: PreprocessConfig, rate_hz: float) -> TrialTensor:
    """Zero-phase Butterworth bandpass along the sample axis."""
    nyq = rate_hz / 2
    if cfg.band_hi_hz >= nyq or cfg.band_lo_hz <= 0:
        raise ConfigError(f"band {cfg.band_lo_hz}-{cfg.band_hi_hz} Hz invalid at {rate_hz} Hz")
    sos = butter(cfg.filter_order, [cfg.band_lo_hz, cfg.band_hi_hz], btype="bandpass",
                 fs=rate_hz, output="sos")
    x = trials.data.astype(np.float64)
    y = sosfiltfilt(sos, x, axis=-1)
    return trials.with_data(y.astype(trials.data.dtype))


def resample(trials: TrialTensor, from_hz: float, to_hz: float) -> TrialTensor:
    """Anti-aliased polyphase decimation; output length ``floor(n * to / from)``."""
    if to_hz > from_hz:
        raise UnsupportedError(f"upsampling {from_hz} -> {to_hz} Hz is not supported")
    if to_hz == from_hz:
        return trials
    ratio = Fraction(to_hz).limit_denominator(10_000) / Fraction(from_hz).limit_denominator(10_000)
    n_out = int(np.floor(trials.n_samples * to_hz / from_hz))
    # resample_poly applies a Kaiser-windowed FIR low-pass before decimating.
    y = resample_poly(trials.data.astype(np.float64), ratio.numerator, ratio.denominator, axis=-1)
    return trials.with_data(y[..., :n_out].astype(trials.data.dtype))


def window(trials: TrialTensor, window_s: float, rate_hz: float) -> TrialTensor:
    n = int(np.floor(window_s * rate_hz + 1e-9))
    if trials.n_samples < n:
        raise ValidationError(
            f"trials have {trials.n_samples} samples, window needs {n} ({window_s} s at {rate_hz} Hz)"
        )
    return trials.with_data(trials.data[..., :n])


def _standardize(x: np.ndarray, axis: int) -> np.ndarray:
    mean = x.mean(axis=axis, keepdims=True)
    std = x.std(axis=axis, keepdims=True)
    return (x - mean) / (std + NORM_EPS)


def normalize(trials: TrialTensor) -> TrialTensor:
    """Per trial: standardize across channels, then across time per channel."""
    x = trials.data.astype(np.float64)
    x = _standardize(x, axis=1)
    x = _standardize(x, axis=2)
    return trials.with_data(x.astype(trials.data.dtype))


def balance(trials: TrialTensor, target: int) -> TrialTensor:
    """Duplicate cyclically (or keep the first ``target``) to exactly ``target`` trials."""
    if target <= 0:
        raise ConfigError("balance target must be positive")
    if trials.n_trials < 1:
        raise ValidationError("cannot balance an empty trial set")
    idx = np.arange(target) % trials.n_trials
    return trials.take(idx)


def power_topomap(trials: TrialTensor) -> np.ndarray:
    if trials.n_trials < 1:
        raise ValidationError("power_topomap needs at least one trial")
    power = np.mean(np.square(trials.data.astype(np.float64)), axis=(0, 2))
    return power - power.mean()


def run_pipeline(
    descriptor: DatasetDescriptor,
    trials: TrialTensor,
    cfg: PreprocessConfig,
    balance_trials: bool = True,
) -> tuple[DatasetDescriptor, TrialTensor]:
    """Resample, bandpass, window and normalize; optionally balance."""
    rate = descriptor.sampling_rate_hz
    out = resample(trials, rate, cfg.target_rate_hz)
    rate = cfg.target_rate_hz
    out = bandpass(out, cfg, rate)
    out = window(out, cfg.window_s, rate)
    out = normalize(out)
    if balance_trials and cfg.balance_target is not None:
        out = balance(out, cfg.balance_target)
    return descriptor.replace(sampling_rate_hz=rate), out
