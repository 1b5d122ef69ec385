"""Classification/segmentation metrics, significance tests, and the report.

AUC is the Mann-Whitney statistic (ties counted 1/2) computed from midranks;
the classification decision rule everywhere is score >= threshold => positive.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class SingleClassError(ValueError):
    """Raised when a metric needs both classes but only one is present."""


def dice(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Overlap coefficient 2|A n B| / (|A| + |B|); two empty masks score 1."""
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"extent mismatch: {pred_mask.shape} vs {true_mask.shape}")
    a = pred_mask.astype(bool)
    b = true_mask.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def _check_binary_labels(labels: np.ndarray) -> None:
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    if labels.min() == labels.max():
        raise SingleClassError("both classes must be present")


def _midranks(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their midrank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j < len(x) and sorted_x[j] == sorted_x[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def roc_auc(
    scores: Sequence[float], labels: Sequence[int]
) -> tuple[float, list[tuple[float, float]]]:
    """AUC plus the ROC staircase swept over all unique score thresholds.

    Points start at (0, 0) and end at (1, 1); each point is the
    (false positive rate, true positive rate) of the rule score >= threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1D and the same length")
    _check_binary_labels(labels)
    m = int(labels.sum())
    n = len(labels) - m
    ranks = _midranks(scores)
    auc = (float(ranks[labels == 1].sum()) - m * (m + 1) / 2.0) / (m * n)
    points = [(0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        positive = scores >= t
        tpr = float(np.logical_and(positive, labels == 1).sum()) / m
        fpr = float(np.logical_and(positive, labels == 0).sum()) / n
        points.append((fpr, tpr))
    return auc, points


def sens_spec(
    scores: Sequence[float], labels: Sequence[int], threshold: float
) -> tuple[float, float]:
    """Patient-level (sensitivity, specificity) at score >= threshold => positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_binary_labels(labels)
    positive = scores >= threshold
    tp = int(np.logical_and(positive, labels == 1).sum())
    fn = int(np.logical_and(~positive, labels == 1).sum())
    tn = int(np.logical_and(~positive, labels == 0).sum())
    fp = int(np.logical_and(positive, labels == 0).sum())
    return tp / (tp + fn), tn / (tn + fp)


def _placements(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """DeLong placement values (V10 per positive, V01 per negative) and the AUC."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    m, n = len(pos), len(neg)
    combined = np.concatenate([pos, neg])
    tz = _midranks(combined)
    tx = _midranks(pos)
    ty = _midranks(neg)
    auc = (tz[:m].sum() - m * (m + 1) / 2.0) / (m * n)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    return v10, v01, auc


def delong_test(
    scores_a: Sequence[float], scores_b: Sequence[float], labels: Sequence[int]
) -> float:
    """Two-sided p-value for equality of the two paired AUCs.

    Uses the covariance of paired placement values; a degenerate variance
    (e.g. identical score vectors) yields p = 1 with a warning.
    """
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not (scores_a.shape == scores_b.shape == labels.shape):
        raise ValueError("paired scores and labels must have identical shapes")
    _check_binary_labels(labels)
    v10_a, v01_a, auc_a = _placements(scores_a, labels)
    v10_b, v01_b, auc_b = _placements(scores_b, labels)
    m, n = len(v10_a), len(v01_a)
    s10 = np.cov(np.stack([v10_a, v10_b])) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.stack([v01_a, v01_b])) if n > 1 else np.zeros((2, 2))
    var = (s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / m + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / n
    if var <= 1e-16:
        warnings.warn("degenerate AUC-difference variance; reporting p = 1", stacklevel=2)
        return 1.0
    z = (auc_a - auc_b) / math.sqrt(var)
    return math.erfc(abs(z) / math.sqrt(2.0))


def permutation_test(
    binary_outcomes_a: Sequence[int],
    binary_outcomes_b: Sequence[int],
    n_perm: int,
    seed: int,
) -> float:
    """Two-sided p-value of the paired accuracy difference under label swaps.

    Each resample swaps both methods' correctness indicators within a case
    with probability 1/2; p uses the add-one estimator (1 + hits)/(1 + n_perm).
    """
    if n_perm < 100:
        raise ValueError("n_perm must be at least 100")
    a = np.asarray(binary_outcomes_a, dtype=np.float64)
    b = np.asarray(binary_outcomes_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise ValueError("outcome vectors must be 1D, nonempty, and the same length")
    observed = abs(a.mean() - b.mean())
    rng = np.random.default_rng(seed)
    swap = rng.random((n_perm, len(a))) < 0.5
    pa = np.where(swap, b, a)
    pb = np.where(swap, a, b)
    diffs = np.abs(pa.mean(axis=1) - pb.mean(axis=1))
    hits = int((diffs >= observed - 1e-12).sum())
    return (1 + hits) / (1 + n_perm)


@dataclass(frozen=True)
class CaseEval:
    """Per-case inputs to the aggregate report; masks may be omitted for normals."""

    case_id: str
    label: int
    score: float
    pred_mask: np.ndarray | None = None
    true_mask: np.ndarray | None = None


def plot_roc(points: list[tuple[float, float]], auc: float, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fpr = [p[0] for p in points]
    tpr = [p[1] for p in points]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(fpr, tpr, color="tab:blue", label=f"AUC = {auc:.3f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def evaluate(
    cases: Sequence[CaseEval], threshold: float, roc_out: str | Path | None = None
) -> dict:
    """Aggregate the headline metrics plus per-case rows into a JSON-ready report.

    Mean dice is averaged over label-1 cases only and reported as null when
    there are none; classification metrics require both classes.
    """
    if not cases:
        raise ValueError("evaluate requires at least one case")
    labels = np.asarray([c.label for c in cases], dtype=np.int64)
    scores = np.asarray([c.score for c in cases], dtype=np.float64)
    auc, points = roc_auc(scores, labels)
    sensitivity, specificity = sens_spec(scores, labels, threshold)
    per_case = []
    dices = []
    for case in cases:
        predicted = bool(case.score >= threshold)
        row = {
            "case_id": case.case_id,
            "label": int(case.label),
            "score": float(case.score),
            "predicted": predicted,
            "correct": predicted == bool(case.label),
            "dice": None,
        }
        if case.label == 1 and case.pred_mask is not None and case.true_mask is not None:
            row["dice"] = dice(case.pred_mask, case.true_mask)
            dices.append(row["dice"])
        per_case.append(row)
    report = {
        "n_cases": len(cases),
        "n_pe": int(labels.sum()),
        "threshold": float(threshold),
        "sensitivity": sensitivity,
        "specificity": specificity,
        "auc": auc,
        "mean_dice": float(np.mean(dices)) if dices else None,
        "per_case": per_case,
        "roc": [[float(f), float(t)] for f, t in points],
    }
    if roc_out is not None:
        plot_roc(points, auc, roc_out)
    return report


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
