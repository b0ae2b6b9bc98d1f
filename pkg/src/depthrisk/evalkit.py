"""Video-level detection and time-to-accident metrics.

A clip is flagged once any frame score reaches the threshold, so the
video-level score is the maximum over frames. Frames are 1-based
throughout; TTA values are in seconds.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels

THRESHOLD_GRID = np.round(np.arange(1, 100) / 100.0, 2)


class MetricError(ValueError):
    pass


def detect_time(scores, threshold: float) -> Optional[int]:
    """First (1-based) frame whose score is >= threshold, or None."""
    scores = np.asarray(scores, dtype=np.float64)
    hits = np.flatnonzero(scores >= threshold)
    return int(hits[0]) + 1 if hits.size else None


def tta(scores, tau: int, threshold: float, frame_rate: float) -> float:
    """Lead time in seconds; 0 when the clip is never flagged or flagged late."""
    if tau <= 0:
        raise MetricError("time-to-accident is only defined for positive clips (tau > 0)")
    t = detect_time(scores, threshold)
    if t is None:
        return 0.0
    return max(tau - t, 0) / frame_rate


def video_scores(curves) -> np.ndarray:
    return np.array([float(np.max(c)) for c in curves])


def lead_frames(curves, taus, thresholds=THRESHOLD_GRID) -> np.ndarray:
    """(V, K) integer lead in frames of each positive clip at each threshold."""
    curves = _stack(curves)
    taus = np.asarray(taus, dtype=np.int64)
    if np.any(taus <= 0):
        raise MetricError("time-to-accident is only defined for positive clips (tau > 0)")
    first = kernels.first_crossings(curves, np.asarray(thresholds, dtype=np.float64))
    return np.where(first > 0, np.maximum(taus[:, None] - first, 0), 0)


def tta_table(curves, taus, thresholds=THRESHOLD_GRID, frame_rate: float = 20.0) -> np.ndarray:
    """(V, K) TTA in seconds of each positive clip at each threshold."""
    return lead_frames(curves, taus, thresholds) / frame_rate


def mtta(curves, taus, thresholds=THRESHOLD_GRID, frame_rate: float = 20.0,
         detected_only: bool = False) -> float:
    """Mean over thresholds of the mean TTA of the positive clips.

    Missed clips count as 0 s; with ``detected_only`` they are left out of
    the per-threshold mean instead (thresholds where nothing is detected
    contribute 0).
    """
    if len(curves) == 0:
        raise MetricError("mTTA needs at least one positive clip")
    lead = lead_frames(curves, taus, thresholds)
    if not detected_only:
        # integer total, one rounding step
        return float(int(lead.sum()) / lead.size / frame_rate)
    table = lead / frame_rate
    detected = kernels.first_crossings(_stack(curves), np.asarray(thresholds, dtype=np.float64)) > 0
    n = detected.sum(axis=0)
    per = np.where(n > 0, (table * detected).sum(axis=0) / np.maximum(n, 1), 0.0)
    return float(per.mean())


def average_precision(scores, labels, allow_single_class: bool = True) -> float:
    """Step-integrated area under the precision-recall curve.

    Clips are ranked by score; tied scores form one rank group whose
    precision is taken at the end of the group. Without negatives the
    result is 1.0 (every cutoff is perfectly precise).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positive clips")
    if n_pos == len(labels):
        if not allow_single_class:
            raise MetricError("no negative clips")
        return 1.0
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of every tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    recall = tp / n_pos
    precision = tp / seen
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def auc(scores, labels) -> float:
    """Probability that a positive clip outranks a negative one (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative clips")
    ranks = _average_ranks(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _average_ranks(x):
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(x)]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + 1 + b) / 2.0
    return ranks


def recall_at(video_score, labels, thresholds=THRESHOLD_GRID) -> np.ndarray:
    video_score = np.asarray(video_score)
    pos = np.asarray(labels).astype(bool)
    return np.array([(video_score[pos] >= th).mean() for th in thresholds])


def tta_at_recall(curves, labels, taus, target: float, frame_rate: float = 20.0,
                  thresholds=THRESHOLD_GRID) -> Optional[float]:
    """Mean TTA of the positives at the largest threshold reaching ``target`` recall.

    Returns None when no threshold of the grid reaches the target.
    """
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        raise MetricError("TTA at recall needs positive clips")
    curves = _stack(curves)
    pos_curves = curves[labels]
    taus = np.asarray(taus)[labels]
    rec = recall_at(curves.max(axis=1), labels, thresholds)
    ok = np.flatnonzero(rec >= target - 1e-12)
    if ok.size == 0:
        return None
    th = np.asarray(thresholds)[ok[-1]]
    return float(tta_table(pos_curves, taus, [th], frame_rate).mean())


@dataclass
class EvalReport:
    ap: float
    auc: float
    mtta: float
    tta_r80: Optional[float]
    tta_r50: Optional[float]
    frame_rate: float
    num_videos: int
    num_positive: int
    mtta_detected_only: float = 0.0
    single_class: bool = False
    thresholds: list = field(default_factory=list)  # rows: threshold, precision, recall, mean_tta

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def threshold_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall", "mean_tta"])
        for row in self.thresholds:
            w.writerow([f"{row['threshold']:.2f}", f"{row['precision']:.6f}",
                        f"{row['recall']:.6f}", f"{row['mean_tta']:.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        def fmt(v):
            return "unreachable" if v is None else f"{v:.3f}s"
        return (f"AP {self.ap:.4f}  AUC {self.auc:.4f}  mTTA {self.mtta:.3f}s  "
                f"TTA@R80 {fmt(self.tta_r80)}  TTA@R50 {fmt(self.tta_r50)}")


def evaluate_curves(curves, labels, taus, frame_rate: float = 20.0,
                    thresholds=THRESHOLD_GRID) -> EvalReport:
    """Full report from per-clip score curves."""
    curves = _stack(curves)
    labels = np.asarray(labels).astype(bool)
    taus = np.asarray(taus, dtype=np.int64)
    vs = curves.max(axis=1)
    n_pos = int(labels.sum())
    single = n_pos == len(labels)
    ap = average_precision(vs, labels)
    area = auc(vs, labels) if 0 < n_pos < len(labels) else float("nan")
    pos_curves, pos_taus = curves[labels], taus[labels]
    table = tta_table(pos_curves, pos_taus, thresholds, frame_rate)
    rows = []
    for k, th in enumerate(thresholds):
        flagged = vs >= th
        tp = int((flagged & labels).sum())
        fp = int((flagged & ~labels).sum())
        rows.append({"threshold": float(th),
                     "precision": tp / (tp + fp) if tp + fp else 1.0,
                     "recall": tp / n_pos,
                     "mean_tta": float(table[:, k].mean())})
    return EvalReport(
        ap=ap,
        auc=area if np.isfinite(area) else 1.0,
        mtta=mtta(pos_curves, pos_taus, thresholds, frame_rate),
        tta_r80=tta_at_recall(curves, labels, taus, 0.8, frame_rate, thresholds),
        tta_r50=tta_at_recall(curves, labels, taus, 0.5, frame_rate, thresholds),
        frame_rate=frame_rate,
        num_videos=len(labels),
        num_positive=n_pos,
        mtta_detected_only=mtta(pos_curves, pos_taus, thresholds, frame_rate, detected_only=True),
        single_class=single,
        thresholds=rows,
    )


def _stack(curves) -> np.ndarray:
    if isinstance(curves, np.ndarray):
        return np.ascontiguousarray(curves, dtype=np.float64)
    return np.stack([np.asarray(getattr(c, "scores", c), dtype=np.float64) for c in curves])
