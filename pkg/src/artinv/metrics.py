"""Pearson correlation and RMSE, per channel and aggregated."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ema import TARGET_CHANNELS, ChannelStats
from .errors import EmptyEvaluation, ShapeError, UndefinedCorrelation

AGGREGATIONS = ("utterance", "pooled")


def pearson_cc(a, y) -> float:
    """Standard Pearson coefficient cov(a, y) / (std(a) std(y))."""
    a = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if a.shape != y.shape:
        raise ShapeError(f"length mismatch {a.size} vs {y.size}")
    if a.size < 2:
        raise ShapeError("need at least two samples")
    da = a - a.mean()
    dy = y - y.mean()
    saa = float(np.dot(da, da))
    syy = float(np.dot(dy, dy))
    if saa == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation of a constant sequence is undefined")
    r = float(np.dot(da, dy)) / np.sqrt(saa * syy)
    return float(min(1.0, max(-1.0, r)))


def rmse(a, y) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if a.shape != y.shape:
        raise ShapeError(f"length mismatch {a.size} vs {y.size}")
    if a.size < 1:
        raise ShapeError("empty sequences")
    return float(np.sqrt(np.mean((a - y) ** 2)))


def _pcc_or_zero(a, y) -> float:
    # a flat channel carries no linear relationship to measure
    try:
        return pearson_cc(a, y)
    except UndefinedCorrelation:
        return 0.0


def channel_pcc(target: np.ndarray, pred: np.ndarray) -> float:
    """Mean over columns of the per-column PCC (flat columns count as 0)."""
    return float(np.mean([_pcc_or_zero(target[:, j], pred[:, j]) for j in range(target.shape[1])]))


def mean_sq_second_difference(x: np.ndarray) -> float:
    d2 = np.diff(np.asarray(x, dtype=np.float64), n=2, axis=0)
    return float(np.mean(d2 ** 2))


@dataclass
class EvalReport:
    channels: list
    pcc: list
    rmse: list
    per_utterance: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    aggregation: str = "utterance"

    @property
    def mean_pcc(self) -> float:
        return float(np.mean(self.pcc))

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_pcc"] = self.mean_pcc
        d["mean_rmse"] = self.mean_rmse
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", "pcc", "rmse"])
        for name, p, r in zip(self.channels, self.pcc, self.rmse):
            w.writerow([name, repr(p), repr(r)])
        w.writerow(["mean", repr(self.mean_pcc), repr(self.mean_rmse)])
        return buf.getvalue()


def score_trajectories(pairs: dict, channels: Sequence[str] = TARGET_CHANNELS,
                       aggregation: str = "utterance", meta: Optional[dict] = None) -> EvalReport:
    """Score {utterance id: (target, prediction)} matrices already in report units.

    ``utterance``: PCC/RMSE per channel per utterance, then averaged over
    utterances. ``pooled``: frames of all utterances concatenated first.
    """
    if not pairs:
        raise EmptyEvaluation("no utterances to evaluate")
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    C = len(channels)
    per_utt = {}
    for uid in sorted(pairs):
        t, p = pairs[uid]
        if t.shape != p.shape or t.shape[1] != C:
            raise ShapeError(f"{uid}: target {t.shape} vs prediction {p.shape}")
        per_utt[uid] = {
            "pcc": [_pcc_or_zero(t[:, j], p[:, j]) for j in range(C)],
            "rmse": [rmse(t[:, j], p[:, j]) for j in range(C)],
        }
    if aggregation == "utterance":
        pcc = np.mean([v["pcc"] for v in per_utt.values()], axis=0)
        err = np.mean([v["rmse"] for v in per_utt.values()], axis=0)
    else:
        T = np.vstack([pairs[u][0] for u in sorted(pairs)])
        P = np.vstack([pairs[u][1] for u in sorted(pairs)])
        pcc = np.array([_pcc_or_zero(T[:, j], P[:, j]) for j in range(C)])
        err = np.array([rmse(T[:, j], P[:, j]) for j in range(C)])
    return EvalReport(list(channels), [float(x) for x in pcc], [float(x) for x in err],
                      per_utt, dict(meta or {}), aggregation)


def evaluate(model, items: Sequence[tuple], stats: ChannelStats, aggregation: str = "utterance",
             use_smoothed: bool = True, meta: Optional[dict] = None) -> EvalReport:
    """Score a model on normalised (id, acoustic, target) items.

    Predictions and targets are mapped back to mm / tract-variable units
    with ``stats`` before RMSE is taken.
    """
    from .training import predict_items

    if not items:
        raise EmptyEvaluation("empty test set")
    if stats is None:
        raise EmptyEvaluation("normalisation stats are required for mm-space RMSE")
    preds = predict_items(model, items)
    pairs = {uid: (stats.invert(y), stats.invert(preds[uid][1 if use_smoothed else 0]))
             for uid, _, y in items}
    return score_trajectories(pairs, TARGET_CHANNELS, aggregation, meta)
