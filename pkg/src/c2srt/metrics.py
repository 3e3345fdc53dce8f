"""Average precision, mAP and top-K precision/recall/F1 for ZSL and GZSL."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class PredictionMatrix:
    scores: np.ndarray     # (N, C)
    truth: np.ndarray      # (N, C) in {0, 1}
    mask: np.ndarray       # (C,) bool, active columns

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truth = np.asarray(self.truth).astype(np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.scores.shape != self.truth.shape:
            raise ValueError(f"scores {self.scores.shape} and truth {self.truth.shape} differ")
        if self.mask.shape != (self.scores.shape[1],):
            raise ValueError("mask length must equal the number of categories")
        if not np.isin(self.truth, (0, 1)).all():
            raise ValueError("truth must be binary")

    @classmethod
    def for_task(cls, scores, truth, n_seen: int, task: str) -> "PredictionMatrix":
        C = np.asarray(scores).shape[1]
        if task == "zsl":
            if n_seen >= C:
                raise ValueError("ZSL evaluation needs at least one unseen category")
            mask = np.arange(C) >= n_seen
        elif task == "gzsl":
            mask = np.ones(C, dtype=bool)
        else:
            raise ValueError(f"unknown task {task!r}")
        return cls(scores, truth, mask)

    def active(self):
        return self.scores[:, self.mask], self.truth[:, self.mask]


def average_precision(scores: Sequence[float], truth: Sequence[int]) -> Optional[float]:
    """AP of one category; ``None`` if it has no positives.

    Images are ranked by descending score, ties by ascending image index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(np.int64)
    n_pos = truth.sum()
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    rel = truth[order]
    precision_at = np.cumsum(rel) / np.arange(1, len(rel) + 1)
    return float((precision_at * rel).sum() / n_pos)


def mean_average_precision(pm: PredictionMatrix) -> float:
    scores, truth = pm.active()
    aps = [average_precision(scores[:, c], truth[:, c]) for c in range(scores.shape[1])]
    valid = [ap for ap in aps if ap is not None]
    excluded = len(aps) - len(valid)
    if excluded:
        logger.warning("%d categories without positives excluded from mAP", excluded)
    if not valid:
        raise ValueError("no category with positives under the mask")
    return float(np.mean(valid))


@dataclass
class TopK:
    precision: float
    recall: float
    f1: float
    printed_recall: float = 0.0


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def topk_prf1(pm: PredictionMatrix, k: int) -> TopK:
    """Top-K assignment per image; P and R are pooled over categories.

    ``printed_recall`` is sum(predicted) / sum(positives), kept for audit next
    to the true-positive recall actually reported.
    """
    scores, truth = pm.active()
    n_img, C = scores.shape
    if k < 1 or k > C:
        raise ValueError(f"K={k} must lie in [1, {C}]")
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    pred = np.zeros_like(truth)
    np.put_along_axis(pred, top, 1, axis=1)
    n_tp = (pred & truth).sum()
    n_pred = pred.sum()
    n_pos = truth.sum()
    p = n_tp / n_pred if n_pred else 0.0
    r = n_tp / n_pos if n_pos else 0.0
    return TopK(float(p), float(r), _f1(p, r), float(n_pred / n_pos) if n_pos else 0.0)


@dataclass
class MetricsReport:
    task: str
    mAP: float
    per_k: Dict[int, TopK] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "mAP": self.mAP,
            "perK": {str(k): {"P": v.precision, "R": v.recall, "F1": v.f1} for k, v in self.per_k.items()},
            "debug": {"printed_R": {str(k): v.printed_recall for k, v in self.per_k.items()}},
        }


def evaluate(scores, truth, n_seen: int, task: str, ks: Sequence[int] = (3, 5)) -> MetricsReport:
    pm = PredictionMatrix.for_task(scores, truth, n_seen, task)
    return MetricsReport(task, mean_average_precision(pm), {k: topk_prf1(pm, k) for k in ks})
