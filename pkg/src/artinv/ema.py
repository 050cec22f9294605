"""EMA preprocessing: smoothing, tract variables, synchronisation, z-scoring.

Raw sensor trajectories (12 coordinates in mm) become 16-channel target
sequences aligned one-to-one with the acoustic frames.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .errors import (ConstantChannel, DegenerateCoordinate, InvalidCutoff,
                     NegativeRadicand, SchemaError)

log = logging.getLogger(__name__)

SENSOR_CHANNELS = (
    "UL_x", "UL_y", "LL_x", "LL_y", "LI_x", "LI_y",
    "TT_x", "TT_y", "TB_x", "TB_y", "TD_x", "TD_y",
)
TRACT_VARIABLES = ("TTCL", "TBCL", "LA", "LP")
TARGET_CHANNELS = SENSOR_CHANNELS + TRACT_VARIABLES
N_TARGETS = len(TARGET_CHANNELS)

CUTOFF_HZ = 25.0
N_TAPS = 50
FRAME_RATE = 100.0
LA_VARIANTS = ("literal", "euclidean")


@dataclass(frozen=True)
class EmaRecording:
    channels: Mapping[str, np.ndarray]
    sample_rate: float

    def __post_init__(self):
        missing = [c for c in SENSOR_CHANNELS if c not in self.channels]
        if missing:
            raise SchemaError(f"missing EMA channels: {missing}")
        lengths = {len(self.channels[c]) for c in SENSOR_CHANNELS}
        if len(lengths) != 1:
            raise SchemaError(f"EMA channels have unequal lengths {sorted(lengths)}")
        if lengths.pop() == 0:
            raise SchemaError("empty EMA recording")
        if not all(np.all(np.isfinite(self.channels[c])) for c in SENSOR_CHANNELS):
            raise SchemaError("non-finite EMA samples")
        if self.sample_rate <= 0:
            raise SchemaError("EMA sample rate must be positive")

    def matrix(self) -> np.ndarray:
        """N x 12 array in canonical channel order."""
        return np.column_stack([np.asarray(self.channels[c], dtype=np.float64) for c in SENSOR_CHANNELS])

    @classmethod
    def from_matrix(cls, data: np.ndarray, sample_rate: float) -> "EmaRecording":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != len(SENSOR_CHANNELS):
            raise SchemaError(f"expected N x 12 EMA matrix, got {data.shape}")
        return cls({c: data[:, i] for i, c in enumerate(SENSOR_CHANNELS)}, sample_rate)


@dataclass(frozen=True)
class SincKernel:
    taps: np.ndarray
    cutoff_norm: float


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise ConstantChannel("channel stats need std > 0")

    def apply(self, seq: np.ndarray) -> np.ndarray:
        return (seq - self.mean) / self.std

    def invert(self, seq: np.ndarray) -> np.ndarray:
        return seq * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChannelStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def design_windowed_sinc(cutoff_hz: float = CUTOFF_HZ, sample_rate: float = FRAME_RATE,
                         n_taps: int = N_TAPS) -> SincKernel:
    """Hann-windowed sinc low-pass with unit DC gain.

    The cutoff is taken relative to ``sample_rate`` before entering the sinc.
    """
    if not 0 < cutoff_hz < sample_rate / 2:
        raise InvalidCutoff(f"cutoff {cutoff_hz} Hz outside (0, {sample_rate / 2}) Hz")
    if n_taps < 2:
        raise ValueError("n_taps must be >= 2")
    fc = cutoff_hz / sample_rate
    i = np.arange(n_taps, dtype=np.float64)
    h = np.sinc(2.0 * fc * (i - (n_taps - 1) / 2.0))
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * i / (n_taps - 1)))
    taps = h * w
    total = taps.sum()
    if not total > 0:
        # a 2-point Hann window is all zeros
        raise ValueError(f"{n_taps}-tap Hann-windowed sinc has no DC gain to normalise")
    taps = taps / total
    # pin exact mirror symmetry against rounding in the cosine
    taps = 0.5 * (taps + taps[::-1])
    return SincKernel(taps, fc)


def reflect_index(length: int, n_taps: int) -> np.ndarray:
    """Gather map (length, n_taps) for same-length reflect-padded correlation.

    Row t holds the source indices under tap 0..n_taps-1; the left pad is
    (n_taps - 1) // 2 samples.
    """
    left = (n_taps - 1) // 2
    right = n_taps - 1 - left
    padded = np.pad(np.arange(length), (left, right), mode="reflect")
    return padded[np.arange(length)[:, None] + np.arange(n_taps)[None, :]]


def lowpass(trajectory: np.ndarray, kernel: SincKernel | np.ndarray) -> np.ndarray:
    """Same-length filtering along axis 0 with reflect padding."""
    taps = kernel.taps if isinstance(kernel, SincKernel) else np.asarray(kernel, dtype=np.float64)
    x = np.asarray(trajectory, dtype=np.float64)
    gathered = x[reflect_index(x.shape[0], taps.size)]
    return np.tensordot(gathered, taps, axes=([1], [0])) if x.ndim > 1 else gathered @ taps


def constriction_location(x, y):
    """x / sqrt(x^2 + y^2): cosine of the sensor's polar angle."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = np.hypot(x, y)
    if np.any(r == 0):
        raise DegenerateCoordinate("constriction location undefined at the origin")
    out = x / r
    return float(out) if out.ndim == 0 else out


def lip_aperture(ul, ll, variant: str = "literal"):
    """Lip aperture from upper/lower lip (x, y) pairs.

    ``literal`` evaluates sqrt((ULx^2 - LLx^2) + (ULy^2 + LLy^2)) term for
    term; ``euclidean`` is the inter-lip distance.
    """
    ulx, uly = (np.asarray(v, dtype=np.float64) for v in ul)
    llx, lly = (np.asarray(v, dtype=np.float64) for v in ll)
    if variant == "literal":
        radicand = (ulx ** 2 - llx ** 2) + (uly ** 2 + lly ** 2)
        if np.any(radicand < 0):
            raise NegativeRadicand(f"lip aperture radicand min {np.min(radicand):g} < 0")
        out = np.sqrt(radicand)
    elif variant == "euclidean":
        out = np.hypot(ulx - llx, uly - lly)
    else:
        raise ValueError(f"unknown lip aperture variant {variant!r}")
    return float(out) if out.ndim == 0 else out


def lip_protrusion(ul_x, ll_x):
    out = (np.asarray(ul_x, dtype=np.float64) + np.asarray(ll_x, dtype=np.float64)) / 2.0
    return float(out) if out.ndim == 0 else out


def tract_variables(coords: np.ndarray, la_variant: str = "literal") -> np.ndarray:
    """N x 12 sensor matrix -> N x 4 [TTCL, TBCL, LA, LP]."""
    col = {c: coords[:, i] for i, c in enumerate(SENSOR_CHANNELS)}
    return np.column_stack([
        constriction_location(col["TT_x"], col["TT_y"]),
        constriction_location(col["TB_x"], col["TB_y"]),
        lip_aperture((col["UL_x"], col["UL_y"]), (col["LL_x"], col["LL_y"]), la_variant),
        lip_protrusion(col["UL_x"], col["LL_x"]),
    ])


def resample_to_frame_rate(traj: np.ndarray, source_rate: float, target_len: int,
                           target_rate: float = FRAME_RATE) -> np.ndarray:
    """Linear interpolation onto t_i = i / target_rate, i < target_len.

    Works along axis 0; values beyond the last source sample are held.
    """
    x = np.asarray(traj, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty trajectory")
    if source_rate == target_rate and x.shape[0] == target_len:
        return x.copy()
    t_src = np.arange(x.shape[0]) / source_rate
    t_dst = np.arange(target_len) / target_rate
    if x.ndim == 1:
        return np.interp(t_dst, t_src, x)
    return np.column_stack([np.interp(t_dst, t_src, x[:, j]) for j in range(x.shape[1])])


def fit_channel_stats(seqs) -> ChannelStats:
    """Population mean/std per column over the row-concatenation of ``seqs``."""
    data = np.vstack([np.asarray(s, dtype=np.float64) for s in seqs])
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    bad = np.flatnonzero(std <= 1e-12)
    if bad.size:
        raise ConstantChannel(f"zero-variance channel(s) {bad.tolist()}")
    return ChannelStats(mean, std)


def zscore_fit_apply(seq: np.ndarray, stats: Optional[ChannelStats] = None):
    """Standardise columns; fits population stats on ``seq`` when none given."""
    seq = np.asarray(seq, dtype=np.float64)
    if stats is None:
        stats = fit_channel_stats([seq])
    return stats.apply(seq), stats


@dataclass(frozen=True)
class ArticulatorySequence:
    frames: np.ndarray
    frame_rate: float = FRAME_RATE
    channel_names: tuple = TARGET_CHANNELS

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != N_TARGETS:
            raise ValueError(f"expected T x {N_TARGETS}, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("non-finite articulatory frames")

    def __len__(self):
        return self.frames.shape[0]


def articulatory_trajectories(rec: EmaRecording, n_frames: int, la_variant: str = "literal",
                              cutoff_hz: float = CUTOFF_HZ, n_taps: int = N_TAPS,
                              frame_rate: float = FRAME_RATE) -> np.ndarray:
    """Pre-normalisation T x 16 matrix (mm / TV units).

    Smooth the 12 coordinates at the native rate, derive the tract
    variables, then interpolate everything onto the acoustic frame grid.
    """
    coords = rec.matrix()
    native = design_windowed_sinc(cutoff_hz, rec.sample_rate, n_taps) if cutoff_hz < rec.sample_rate / 2 else None
    if native is not None:
        coords = lowpass(coords, native)
    else:
        log.warning("EMA rate %g Hz too low for a %g Hz cutoff; native smoothing skipped",
                    rec.sample_rate, cutoff_hz)
    full = np.hstack([coords, tract_variables(coords, la_variant)])
    return resample_to_frame_rate(full, rec.sample_rate, n_frames, frame_rate)


def finish_targets(pre: np.ndarray, stats: ChannelStats, cutoff_hz: float = CUTOFF_HZ,
                   n_taps: int = N_TAPS, frame_rate: float = FRAME_RATE) -> np.ndarray:
    """z-score with stored stats, then smooth again at the frame rate."""
    normed = stats.apply(pre)
    return lowpass(normed, design_windowed_sinc(cutoff_hz, frame_rate, n_taps))


def build_targets(rec: EmaRecording, n_frames: int, stats: Optional[ChannelStats] = None,
                  la_variant: str = "literal", cutoff_hz: float = CUTOFF_HZ,
                  n_taps: int = N_TAPS) -> tuple[ArticulatorySequence, ChannelStats]:
    """Full target pipeline for one recording.

    Without ``stats`` the normalisation is fitted on this recording alone;
    training code fits on the whole training partition instead (see
    :func:`fit_channel_stats`).
    """
    pre = articulatory_trajectories(rec, n_frames, la_variant, cutoff_hz, n_taps)
    if stats is None:
        stats = fit_channel_stats([pre])
    return ArticulatorySequence(finish_targets(pre, stats, cutoff_hz, n_taps)), stats
