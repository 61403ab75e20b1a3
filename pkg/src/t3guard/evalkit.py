"""Detection metrics over two labeled score samples.

Convention throughout: higher score = more anomalous, and the harmful
(out-of-distribution) side is the positive class.  A sample is flagged at
threshold t when its score is >= t, so ties at a threshold resolve toward
flagging.  Every metric here depends only on score order, which the tests
pin down via invariance under strictly increasing transforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError, ValidationError


@dataclass(frozen=True)
class LabeledScores:
    """Scores split by ground truth; id = safe, ood = harmful."""

    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self) -> None:
        for name in ("id_scores", "ood_scores"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if arr.size == 0:
                raise MetricError(f"{name} is empty; both classes are required")
            if not np.isfinite(arr).all():
                raise ValidationError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)

    @property
    def n_id(self) -> int:
        return int(self.id_scores.size)

    @property
    def n_ood(self) -> int:
        return int(self.ood_scores.size)


def auroc(s: LabeledScores) -> float:
    """P(random harmful score > random safe score), ties counted half.

    Computed as the normalized Mann-Whitney U via midranks of the pooled
    sample, which equals the direct pairwise count.
    """
    pooled = np.concatenate([s.ood_scores, s.id_scores])
    ranks = rankdata(pooled, method="average")
    u = ranks[: s.n_ood].sum() - s.n_ood * (s.n_ood + 1) / 2.0
    return float(u / (s.n_ood * s.n_id))


def fpr_at_95_tpr(s: LabeledScores) -> float:
    """Safe-side flag rate at the loosest threshold catching 95% of harmful.

    The threshold is the largest t with at least 95% of harmful scores
    >= t; that is the ceil(0.95 * n)-th largest harmful score.  Returns
    the fraction of safe scores >= t.
    """
    n = s.n_ood
    need = int(np.ceil(0.95 * n))
    t = np.sort(s.ood_scores)[::-1][need - 1]
    return float((s.id_scores >= t).mean())


def _curve_counts(s: LabeledScores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique thresholds descending, with flagged counts per class at >= t."""
    thresholds = np.unique(np.concatenate([s.ood_scores, s.id_scores]))[::-1]
    tp = (s.ood_scores[None, :] >= thresholds[:, None]).sum(axis=1)
    fp = (s.id_scores[None, :] >= thresholds[:, None]).sum(axis=1)
    return thresholds, tp.astype(np.float64), fp.astype(np.float64)


def auprc(s: LabeledScores) -> float:
    """Area under precision-recall by trapezoid over recall.

    The curve starts at the smallest observed recall with its own
    precision (no pinned (0,1) anchor), so an uninformative scorer
    integrates to the harmful-class prevalence exactly.
    """
    _, tp, fp = _curve_counts(s)
    recall = tp / s.n_ood
    precision = tp / np.maximum(tp + fp, 1.0)
    area = float(precision[0] * recall[0])
    for a in range(1, recall.size):
        area += (recall[a] - recall[a - 1]) * (precision[a] + precision[a - 1]) / 2.0
    return area


def max_f1(s: LabeledScores) -> tuple[float, float]:
    """Best F1 over all flagging thresholds; ties keep the lower threshold."""
    thresholds, tp, fp = _curve_counts(s)
    fn = s.n_ood - tp
    f1 = 2.0 * tp / np.maximum(2.0 * tp + fp + fn, 1.0)
    # thresholds descend; scanning from the end finds the lowest maximizer
    best_idx = f1.size - 1 - int(np.argmax(f1[::-1]))
    return float(f1[best_idx]), float(thresholds[best_idx])


@dataclass(frozen=True)
class EvalReport:
    auroc: float
    fpr_at_95: float
    auprc: float
    max_f1: float
    f1_threshold: float
    n_id: int
    n_ood: int

    def to_json_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "fpr95": self.fpr_at_95,
            "auprc": self.auprc,
            "max_f1": self.max_f1,
            "threshold": self.f1_threshold,
            "n_id": self.n_id,
            "n_ood": self.n_ood,
        }


def evaluate(s: LabeledScores) -> EvalReport:
    f1, f1_threshold = max_f1(s)
    return EvalReport(
        auroc=auroc(s),
        fpr_at_95=fpr_at_95_tpr(s),
        auprc=auprc(s),
        max_f1=f1,
        f1_threshold=f1_threshold,
        n_id=s.n_id,
        n_ood=s.n_ood,
    )


def write_report(path: str | Path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
        fh.write("\n")
