"""Evaluation metrics: AP, TTA / mTTA, TTA at a recall target, AOLA, and CSV curve export.

Frames are 1-indexed; ``tau`` is the accident frame. ``t_theta`` is the first
frame from which the score stays at or above the threshold through ``tau``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, UndefinedMetricError
from .heads import LocalizationTrace, ScoreTrace

AP_MODES = ("frame", "clip")


def fmt(x: float) -> str:
    return f"{x:.9g}"


def threshold_grid(size: int = 100) -> np.ndarray:
    """``size`` evenly spaced thresholds strictly inside (0, 1)."""
    if size < 1:
        raise ConfigurationError("threshold grid needs at least one point")
    return np.linspace(0.0, 1.0, size + 2)[1:-1]


def _ranked(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if not labels.any():
        raise UndefinedMetricError("average precision is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    return labels[order]


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each rank of a descending-score walk."""
    hits = _ranked(scores, labels)
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return tp / hits.sum(), tp / ranks


def average_precision(scores, labels) -> float:
    """Sum of precision times recall increment over the ranks that consume a positive."""
    hits = _ranked(scores, labels)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(np.sum(precision[hits]) / hits.sum())


def crossing_frame(s, s_theta: float, tau: int) -> Optional[int]:
    """Earliest t in [1, tau] with s_u >= s_theta for all u in [t, tau]; None if s_tau < s_theta."""
    s = np.asarray(s, dtype=np.float64)
    if not 1 <= tau <= len(s):
        raise ValueError(f"tau={tau} outside [1, {len(s)}]")
    suffix_min = np.minimum.accumulate(s[:tau][::-1])[::-1]
    idx = int(np.searchsorted(suffix_min, s_theta, side="left"))
    return idx + 1 if idx < tau else None


def tta(trace, s_theta: float, tau: int, fps: float) -> float:
    """Time-to-accident in seconds at one threshold; 0 when the score never persistently crosses."""
    s = trace.s if isinstance(trace, ScoreTrace) else trace
    t = crossing_frame(s, s_theta, tau)
    if t is None:
        return 0.0
    return max(tau - t, 0) / fps


def tta_curve(s, grid: np.ndarray, tau: int, fps: float) -> np.ndarray:
    """TTA for every threshold in ``grid`` (vectorized form of :func:`tta`)."""
    s = np.asarray(s, dtype=np.float64)
    if not 1 <= tau <= len(s):
        raise ValueError(f"tau={tau} outside [1, {len(s)}]")
    suffix_min = np.minimum.accumulate(s[:tau][::-1])[::-1]
    idx = np.searchsorted(suffix_min, grid, side="left")
    frames = idx + 1
    return np.where(idx < tau, np.maximum(tau - frames, 0) / fps, 0.0)


@dataclass
class ClipEval:
    clip_id: str
    score: ScoreTrace
    label: int
    fps: float
    tau: Optional[int] = None
    loc: Optional[LocalizationTrace] = None
    involvement: Optional[np.ndarray] = None


@dataclass
class EvalBundle:
    clips: list[ClipEval]
    threshold_grid: np.ndarray = field(default_factory=threshold_grid)

    def __post_init__(self):
        g = np.asarray(self.threshold_grid, dtype=np.float64)
        if g.ndim != 1 or np.any(g < 0) or np.any(g > 1) or np.any(np.diff(g) <= 0):
            raise ConfigurationError("threshold grid must lie in [0, 1], sorted ascending, without duplicates")
        self.threshold_grid = g

    @property
    def positives(self) -> list[ClipEval]:
        return [c for c in self.clips if c.label == 1]

    def ranking_data(self, mode: str = "frame") -> tuple[np.ndarray, np.ndarray]:
        if mode == "frame":
            scores = np.concatenate([c.score.s for c in self.clips]) if self.clips else np.zeros(0)
            labels = np.concatenate([np.full(len(c.score.s), c.label) for c in self.clips]) if self.clips else np.zeros(0)
        elif mode == "clip":
            scores = np.array([np.max(c.score.s) for c in self.clips])
            labels = np.array([c.label for c in self.clips])
        else:
            raise ConfigurationError(f"AP mode must be one of {AP_MODES}")
        return scores, labels


def bundle_ap(bundle: EvalBundle, mode: str = "frame") -> float:
    return average_precision(*bundle.ranking_data(mode))


def mtta(bundle: EvalBundle) -> float:
    pos = bundle.positives
    if not pos:
        raise UndefinedMetricError("mTTA needs at least one positive clip")
    grid = bundle.threshold_grid
    return float(np.mean([tta_curve(c.score.s, grid, c.tau, c.fps) for c in pos]))


def recall_threshold(bundle: EvalBundle, recall_target: float = 0.8) -> float:
    """Largest positive score threshold whose frame-level recall reaches ``recall_target``."""
    pos = bundle.positives
    if not pos:
        raise UndefinedMetricError("no positive clips")
    desc = np.sort(np.concatenate([c.score.s for c in pos]))[::-1]
    P = len(desc)
    need = next(c for c in range(1, P + 1) if c / P >= recall_target) if recall_target <= 1 else None
    if need is None:
        raise UndefinedMetricError(f"recall target {recall_target} is above 1")
    theta = float(desc[need - 1])
    if theta <= 0.0:
        raise UndefinedMetricError(
            f"recall {recall_target:.2f} is only reached at threshold 0 "
            f"({int(np.sum(desc > 0))} of {P} positive frames score above 0)"
        )
    return theta


def tta_at_recall(bundle: EvalBundle, recall_target: float = 0.8) -> float:
    theta = recall_threshold(bundle, recall_target)
    return float(np.mean([tta(c.score, theta, c.tau, c.fps) for c in bundle.positives]))


def aola(bundle: EvalBundle) -> float:
    """Fraction of occupied object slots whose involvement call (score > 0.5) matches ground truth."""
    correct = total = 0
    for c in bundle.clips:
        if c.loc is None or c.involvement is None:
            continue
        mask = c.loc.object_mask
        correct += int(np.sum((c.loc.involved == np.asarray(c.involvement, dtype=bool)) & mask))
        total += int(np.sum(mask))
    if not any(c.loc is not None and c.involvement is not None for c in bundle.clips):
        raise ConfigurationError("AOLA needs localization traces with involvement ground truth")
    if total == 0:
        raise UndefinedMetricError("no occupied object slots")
    return correct / total


def evaluate(bundle: EvalBundle, ap_mode: str = "frame", recall_target: float = 0.8) -> dict:
    """All headline metrics; undefined ones come back as None."""
    out = {"AP": bundle_ap(bundle, ap_mode), "mTTA": mtta(bundle)}
    try:
        out["TTA@R80"] = tta_at_recall(bundle, recall_target)
    except UndefinedMetricError:
        out["TTA@R80"] = None
    try:
        out["AOLA"] = aola(bundle)
    except (ConfigurationError, UndefinedMetricError):
        out["AOLA"] = None
    return out


def export_curves(bundle: EvalBundle, out_dir, ap_mode: str = "frame") -> dict:
    """Write scores.csv, pr_curve.csv and tta_sweep.csv; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"scores": out / "scores.csv", "pr": out / "pr_curve.csv", "tta": out / "tta_sweep.csv"}
    with open(paths["scores"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "t", "s_t"])
        for c in bundle.clips:
            for t, v in enumerate(c.score.s, 1):
                w.writerow([c.clip_id, t, fmt(v)])
    with open(paths["pr"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recall", "precision"])
        scores, labels = bundle.ranking_data(ap_mode)
        if labels.size and labels.any():
            for r, p in zip(*pr_curve(scores, labels)):
                w.writerow([fmt(r), fmt(p)])
    with open(paths["tta"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "mean_tta"])
        pos = bundle.positives
        if pos:
            curves = np.mean([tta_curve(c.score.s, bundle.threshold_grid, c.tau, c.fps) for c in pos], axis=0)
            for th, v in zip(bundle.threshold_grid, curves):
                w.writerow([fmt(th), fmt(v)])
    return paths
