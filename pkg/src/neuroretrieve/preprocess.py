"""Per-clip preprocessing: decimation, Butterworth band-pass, train-set normalization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .dataio import EEGClip

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class FilterSpec:
    low_hz: float = 55.0
    high_hz: float = 95.0
    order: int = 4
    fs: float = 1024.0

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"filter order must be >= 1, got {self.order}")
        if not self.low_hz < self.high_hz:
            raise ValueError(f"invalid band: low {self.low_hz} Hz >= high {self.high_hz} Hz")
        if self.low_hz <= 0:
            raise ValueError(f"low band edge must be positive, got {self.low_hz}")
        if self.high_hz >= self.fs / 2:
            raise ValueError(f"band edge {self.high_hz} Hz at or above Nyquist ({self.fs / 2} Hz)")


@dataclass
class NormStats:
    mean: np.ndarray  # (V,)
    std: np.ndarray  # (V,)
    source: str = "train"


def _pad_length(sos: np.ndarray, n_samples: int) -> int:
    # reflect-pad 3x the filter length, clipped for short clips
    return min(3 * (2 * len(sos) + 1), n_samples - 1)


def _check_stable(sos: np.ndarray) -> None:
    poles = np.concatenate([np.roots(sec[3:]) for sec in sos])
    if np.any(np.abs(poles) >= 1.0):
        raise ValueError(f"unstable filter: max pole magnitude {np.abs(poles).max():.6f}")


def design_bandpass(spec: FilterSpec) -> np.ndarray:
    """Second-order sections of a digital Butterworth band-pass.

    ``spec.order`` is the analog low-pass prototype order, so the band-pass
    has ``2 * order`` poles.
    """
    sos = signal.butter(spec.order, [spec.low_hz, spec.high_hz], btype="bandpass", fs=spec.fs, output="sos")
    _check_stable(sos)
    return sos


def design_lowpass(cutoff_hz: float, fs: float, order: int = 8) -> np.ndarray:
    if not 0 < cutoff_hz < fs / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz outside (0, {fs / 2})")
    sos = signal.butter(order, cutoff_hz, btype="lowpass", fs=fs, output="sos")
    _check_stable(sos)
    return sos


def sos_response(sos: np.ndarray, freqs_hz, fs: float) -> np.ndarray:
    """Complex frequency response of ``sos`` evaluated directly on the unit circle."""
    z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=float) / fs)
    h = np.ones_like(z)
    for b0, b1, b2, a0, a1, a2 in sos:
        h = h * (b0 + b1 / z + b2 / z**2) / (a0 + a1 / z + a2 / z**2)
    return h


def filter_data(data: np.ndarray, sos: np.ndarray, zero_phase: bool = True) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if zero_phase:
        return signal.sosfiltfilt(sos, data, axis=-1, padtype="even", padlen=_pad_length(sos, data.shape[-1]))
    return signal.sosfilt(sos, data, axis=-1)


def apply_filter(clip: EEGClip, sos: np.ndarray, zero_phase: bool = True) -> EEGClip:
    """Filter every channel. Zero-phase mode runs the filter forward and backward,
    which squares the magnitude response."""
    out = filter_data(clip.data, sos, zero_phase=zero_phase)
    return EEGClip(pair_id=clip.pair_id, data=out, fs=clip.fs, class_label=clip.class_label)


def resample(clip: EEGClip, target_fs: float) -> EEGClip:
    """Integer decimation preceded by an 8th-order zero-phase anti-alias low-pass at 0.4*target_fs."""
    if target_fs >= clip.fs:
        raise ValueError(f"target rate {target_fs} Hz must be below source rate {clip.fs} Hz")
    factor = clip.fs / target_fs
    if abs(factor - round(factor)) > 1e-9:
        raise ValueError(f"non-integer decimation factor {clip.fs}/{target_fs} = {factor:g}")
    factor = int(round(factor))
    sos = design_lowpass(0.4 * target_fs, clip.fs, order=8)
    smoothed = filter_data(clip.data, sos, zero_phase=True)
    return EEGClip(pair_id=clip.pair_id, data=smoothed[:, ::factor], fs=float(target_fs), class_label=clip.class_label)


def fit_norm(train_clips) -> NormStats:
    """Per-channel mean/std pooled over all samples of all training clips."""
    total = None
    total_sq = None
    n = 0
    for clip in train_clips:
        x = np.asarray(clip.data, dtype=np.float64)
        if total is None:
            total = np.zeros(x.shape[0])
        elif x.shape[0] != total.shape[0]:
            raise ValueError("training clips disagree on channel count")
        total += x.sum(axis=1)
        n += x.shape[1]
    if total is None:
        raise ValueError("fit_norm needs at least one clip")
    mean = total / n
    # second pass for a numerically clean variance
    total_sq = np.zeros_like(mean)
    for clip in train_clips:
        total_sq += ((np.asarray(clip.data, dtype=np.float64) - mean[:, None]) ** 2).sum(axis=1)
    std = np.sqrt(total_sq / n)
    flat = std < STD_FLOOR
    if np.any(flat):
        warnings.warn(f"zero-variance channels {np.flatnonzero(flat).tolist()}; std floored at {STD_FLOOR}")
        std = np.maximum(std, STD_FLOOR)
    return NormStats(mean=mean, std=std)


def normalize(clip: EEGClip, stats: NormStats) -> EEGClip:
    data = (np.asarray(clip.data, dtype=np.float64) - stats.mean[:, None]) / stats.std[:, None]
    return EEGClip(pair_id=clip.pair_id, data=data, fs=clip.fs, class_label=clip.class_label)


def denormalize(clip: EEGClip, stats: NormStats) -> EEGClip:
    data = np.asarray(clip.data, dtype=np.float64) * stats.std[:, None] + stats.mean[:, None]
    return EEGClip(pair_id=clip.pair_id, data=data, fs=clip.fs, class_label=clip.class_label)


def preprocess_clip(
    clip: EEGClip,
    target_fs: float | None = None,
    band: FilterSpec | None = None,
    zero_phase: bool = True,
) -> EEGClip:
    """Resample (if ``target_fs`` differs from the clip rate), then band-pass (if ``band``)."""
    if target_fs is not None and target_fs != clip.fs:
        clip = resample(clip, target_fs)
    if band is not None:
        if band.fs != clip.fs:
            raise ValueError(f"filter designed for {band.fs} Hz, clip is at {clip.fs} Hz")
        clip = apply_filter(clip, design_bandpass(band), zero_phase=zero_phase)
    return clip
