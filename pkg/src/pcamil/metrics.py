"""Classifier metrics and the paired comparison tests.

MSI is the positive class throughout; labels are passed as 0/1 arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from pcamil.errors import LengthMismatch, NoPositives, SingleClassCohort, TooFewFolds

MCNEMAR_EXACT_MAX = 25


def _as_arrays(labels, scores):
    y = np.asarray(labels, dtype=int)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise LengthMismatch(f"labels {y.shape} and scores {s.shape} differ")
    return y, s


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg), ties counted as one half."""
    y, s = _as_arrays(labels, scores)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassCohort("AUROC needs both classes")
    ranks = stats.rankdata(s)  # average ranks resolve ties as 0.5 credit
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def average_precision(labels, scores) -> float:
    """Step-wise AP with equal scores processed as one block."""
    y, s = _as_arrays(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each tie block
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    precision = tp / seen
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class BinaryReport:
    counts: ConfusionCounts
    accuracy: float
    f1: float
    kappa: float


def confusion(labels, predictions) -> ConfusionCounts:
    y, p = _as_arrays(labels, predictions)
    p = p.astype(int)
    return ConfusionCounts(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
        tn=int(np.sum((p == 0) & (y == 0))),
    )


def report_from_counts(c: ConfusionCounts) -> BinaryReport:
    n = c.total
    acc = (c.tp + c.tn) / n
    f1_den = 2 * c.tp + c.fp + c.fn
    f1 = 2 * c.tp / f1_den if f1_den else 0.0
    pred_pos, true_pos = (c.tp + c.fp) / n, (c.tp + c.fn) / n
    p_e = pred_pos * true_pos + (1 - pred_pos) * (1 - true_pos)
    if p_e == 1.0:
        kappa = 1.0 if acc == 1.0 else 0.0
    else:
        kappa = (acc - p_e) / (1 - p_e)
    return BinaryReport(c, acc, f1, kappa)


def binary_report(labels, scores, threshold: float = 0.5) -> BinaryReport:
    """Confusion counts, accuracy, F1 and Cohen's kappa; MSI iff score >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    y, s = _as_arrays(labels, scores)
    return report_from_counts(confusion(y, (s >= threshold).astype(int)))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired Student t-test on ``a - b``.

    Zero-variance differences give ``(0, 1)`` when they are all zero and
    ``(+-inf, 0)`` otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    n = len(a)
    if n < 2:
        raise TooFewFolds("paired t-test needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return float(t), float(min(1.0, p))


def mcnemar_counts(correct_a, correct_b) -> tuple[int, int]:
    a = np.asarray(correct_a, dtype=bool)
    b = np.asarray(correct_b, dtype=bool)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    return int(np.sum(a & ~b)), int(np.sum(~a & b))


def mcnemar_test(correct_a, correct_b) -> tuple[float, float]:
    """McNemar test on per-patient correctness of two classifiers.

    Exact two-sided binomial p-value up to 25 discordant pairs, otherwise
    the continuity-corrected chi-square. The exact branch reports the
    smaller discordant count as its statistic.
    """
    b, c = mcnemar_counts(correct_a, correct_b)
    n = b + c
    if n == 0:
        return 0.0, 1.0
    if n <= MCNEMAR_EXACT_MAX:
        k = min(b, c)
        tail = sum(math.comb(n, i) for i in range(k + 1)) / 2**n
        return float(k), min(1.0, 2.0 * tail)
    stat = (abs(b - c) - 1) ** 2 / n
    return float(stat), float(stats.chi2.sf(stat, df=1))


@dataclass(frozen=True)
class FoldSummary:
    mean: float
    sd: float
    ci_low: float
    ci_high: float


def aggregate_folds(values: Sequence[float], bounds: tuple[float, float] | None = (0.0, 1.0)) -> FoldSummary:
    """Mean, sample sd and t-based 95% CI across folds, clipped to ``bounds`` unless None."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if n < 2:
        raise TooFewFolds("need at least 2 folds to aggregate")
    if np.all(v == v[0]):
        mean, sd = float(v[0]), 0.0
    else:
        mean, sd = float(v.mean()), float(v.std(ddof=1))
    half = float(stats.t.ppf(0.975, df=n - 1)) * sd / math.sqrt(n)
    lo, hi = mean - half, mean + half
    if bounds is not None:
        lo, hi = max(bounds[0], lo), min(bounds[1], hi)
    return FoldSummary(mean, sd, lo, hi)
