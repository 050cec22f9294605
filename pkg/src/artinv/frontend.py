"""Acoustic front end: waveform -> 429-dim context-stacked MFCC features.

Pipeline: peak normalisation to +/-0.5, 25 ms / 10 ms framing, 13 MFCCs,
first and second order regression deltas, +/-5 frame context stacking.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.fft import dct

from .errors import DegenerateSignal, TooShort

SAMPLE_RATE = 16000
N_CEPS = 13
BASE_DIM = 3 * N_CEPS
CONTEXT = 5
FEATURE_DIM = BASE_DIM * (2 * CONTEXT + 1)
PEAK = 0.5


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if len(self.samples) == 0:
            raise DegenerateSignal("empty waveform")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrameSpec:
    frame_length: float = 0.025
    hop: float = 0.010

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_length:
            raise ValueError("need 0 < hop <= frame_length")

    def sizes(self, sample_rate: int) -> tuple[int, int]:
        return int(round(self.frame_length * sample_rate)), int(round(self.hop * sample_rate))


@dataclass(frozen=True)
class MfccConfig:
    """MFCC internals. Only the coefficient count is fixed by the method."""

    n_fft: int = 512
    n_filters: int = 26
    n_ceps: int = N_CEPS
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    # 1 = magnitude spectrum, 2 = power spectrum
    spectrum_power: float = 1.0


@dataclass(frozen=True)
class AcousticSequence:
    frames: np.ndarray
    frame_rate: float = 100.0

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != FEATURE_DIM:
            raise ValueError(f"expected T x {FEATURE_DIM}, got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("empty acoustic sequence")

    def __len__(self):
        return self.frames.shape[0]


def normalize_waveform(raw: Sequence[float], sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Scale ``raw`` so that its peak absolute amplitude is exactly 0.5."""
    x = np.asarray(raw, dtype=np.float64)
    if x.size == 0:
        raise DegenerateSignal("empty waveform")
    peak = np.max(np.abs(x))
    if not np.isfinite(peak) or peak == 0.0:
        raise DegenerateSignal("waveform has no nonzero finite peak")
    return Waveform(PEAK * (x / peak), sample_rate)


def frame_signal(w: Waveform, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """Split into overlapping frames, shape (n_frames, frame_len). No padding."""
    frame_len, hop = spec.sizes(w.sample_rate)
    n = len(w.samples)
    if n < frame_len:
        raise TooShort(f"{n} samples is shorter than one {frame_len}-sample frame")
    n_frames = (n - frame_len) // hop + 1
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.asarray(w.samples, dtype=np.float64)[idx]


def n_frames_for(n_samples: int, sample_rate: int = SAMPLE_RATE, spec: FrameSpec = FrameSpec()) -> int:
    frame_len, hop = spec.sizes(sample_rate)
    if n_samples < frame_len:
        raise TooShort(f"{n_samples} samples is shorter than one {frame_len}-sample frame")
    return (n_samples - frame_len) // hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _mel_filterbank(n_filters: int, n_fft: int, sample_rate: int, f_min: float, f_max: float) -> np.ndarray:
    # triangles evaluated at the exact bin frequencies, peak 1 at each centre
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(n_filters: int = 26, n_fft: int = 512, sample_rate: int = SAMPLE_RATE,
                   f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    """Triangular mel filterbank, shape (n_filters, n_fft // 2 + 1)."""
    return _mel_filterbank(n_filters, n_fft, sample_rate, float(f_min), float(f_max))


def _mfcc_frames(frames: np.ndarray, sample_rate: int, cfg: MfccConfig) -> np.ndarray:
    window = np.hamming(frames.shape[-1])
    spectrum = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=-1)) ** cfg.spectrum_power
    fb = mel_filterbank(cfg.n_filters, cfg.n_fft, sample_rate, cfg.f_min, cfg.f_max)
    energies = spectrum @ fb.T
    log_e = np.log(np.maximum(energies, cfg.log_floor))
    return dct(log_e, type=2, norm="ortho", axis=-1)[..., : cfg.n_ceps]


def mfcc(frame: np.ndarray, sample_rate: int = SAMPLE_RATE, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """MFCCs c0..c12 of a single frame.

    Hamming window, ``n_fft``-point magnitude spectrum, triangular mel
    filters, natural log with a floor, orthonormal DCT-II.
    """
    return _mfcc_frames(np.asarray(frame, dtype=np.float64)[None, :], sample_rate, cfg)[0]


def delta_features(coeffs: np.ndarray, order: int = 1, half_window: int = 2) -> np.ndarray:
    """Regression deltas over time with replicate padding.

    ``d_t = sum_n n (c_{t+n} - c_{t-n}) / (2 sum_n n^2)`` for n = 1..half_window.
    ``order=2`` applies the operator twice.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    c = np.asarray(coeffs, dtype=np.float64)
    for _ in range(order):
        T = c.shape[0]
        padded = np.pad(c, ((half_window, half_window), (0, 0)), mode="edge")
        denom = 2.0 * sum(n * n for n in range(1, half_window + 1))
        d = np.zeros_like(c)
        for n in range(1, half_window + 1):
            d += n * (padded[half_window + n: half_window + n + T] - padded[half_window - n: half_window - n + T])
        c = d / denom
    return c


def stack_context(features: np.ndarray, half_window: int = CONTEXT) -> np.ndarray:
    """Concatenate rows t-k..t+k (edge-replicated) into one row per frame."""
    f = np.asarray(features, dtype=np.float64)
    T = f.shape[0]
    idx = np.clip(np.arange(T)[:, None] + np.arange(-half_window, half_window + 1)[None, :], 0, T - 1)
    return f[idx].reshape(T, -1)


def base_features(w: Waveform, spec: FrameSpec = FrameSpec(), cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """T x 39 matrix of MFCC, delta and delta-delta."""
    c = _mfcc_frames(frame_signal(w, spec), w.sample_rate, cfg)
    d1 = delta_features(c, 1)
    d2 = delta_features(c, 2)
    return np.hstack([c, d1, d2])


def extract_acoustic_features(w: Waveform, spec: FrameSpec = FrameSpec(),
                              cfg: MfccConfig = MfccConfig()) -> AcousticSequence:
    stacked = stack_context(base_features(w, spec, cfg), CONTEXT)
    return AcousticSequence(stacked, frame_rate=1.0 / spec.hop)


def write_feature_csv(path: str | Path, utterance_id: str, frames: np.ndarray, frame_rate: float) -> None:
    """Matrix export: one ``#`` header line, then one comma-separated row per frame."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# utterance={utterance_id} frame_rate={frame_rate:g} columns={frames.shape[1]}\n")
        np.savetxt(fh, frames, delimiter=",", fmt="%.17g")


def read_feature_csv(path: str | Path) -> tuple[str, float, np.ndarray]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline()
        fields = dict(tok.split("=", 1) for tok in header.lstrip("# ").split())
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return fields["utterance"], float(fields["frame_rate"]), data
