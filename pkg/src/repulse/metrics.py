"""
Evaluation metrics: accuracy, NLL, Brier score, ECE and AUROC.

Predictions are N x K probability matrices; the predicted class is the argmax with the
lowest index winning ties. Values are raw (nats, fractions); percent display is a CLI
concern.
"""

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy.stats import rankdata

from .errors import LabelOutOfRange, SpecError
from .models import Matrix

DEFAULT_ECE_BINS = 15
PROB_FLOOR = 1e-12

Labels = npt.NDArray[np.int64]


@dataclass
class EvalReport:
    """Classification metrics on one dataset."""

    accuracy: float
    nll: float
    ece: float
    brier: float
    count: int

    def as_rows(self) -> list[tuple[str, float, int]]:
        """(metric, value, sample count) rows for CSV reports."""
        return [
            ("accuracy", self.accuracy, self.count),
            ("nll", self.nll, self.count),
            ("ece", self.ece, self.count),
            ("brier", self.brier, self.count),
        ]


def _check(probs: Matrix, labels: Labels) -> tuple[Matrix, Labels]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0] or probs.shape[0] < 1:
        raise SpecError(f"probabilities {probs.shape} do not match {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise LabelOutOfRange(f"labels must lie in [0, {probs.shape[1]})")
    return probs, labels.astype(np.int64)


def accuracy(probs: Matrix, labels: Labels) -> float:
    """Fraction of samples whose argmax class equals the label."""
    probs, labels = _check(probs, labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def nll(probs: Matrix, labels: Labels) -> float:
    """
    Mean negative log-likelihood of the true labels in nats.

    Example:
        >>> round(nll(np.full((1, 10), 0.1), np.array([3])), 6)
        2.302585
    """
    probs, labels = _check(probs, labels)
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def brier(probs: Matrix, labels: Labels) -> float:
    """Multiclass Brier score (1/N) sum_i ||p_i - onehot(y_i)||^2, in [0, 2]."""
    probs, labels = _check(probs, labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def ece(probs: Matrix, labels: Labels, bins: int = DEFAULT_ECE_BINS) -> float:
    """
    Expected calibration error with equal-width confidence bins.

    Bin m (1-based) covers ((m-1)/M, m/M]; confidence 0 falls into bin 1. Empty bins
    contribute nothing.

    Args:
        probs: N x K probabilities.
        labels: N labels.
        bins: Number of bins M.

    Returns:
        sum_m |B_m|/N * |acc(B_m) - conf(B_m)|
    """
    if bins < 1:
        raise SpecError(f"ECE needs at least one bin, got {bins}")
    probs, labels = _check(probs, labels)
    confidence = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    upper_edges = np.arange(1, bins + 1) / bins
    assignment = np.minimum(np.searchsorted(upper_edges, confidence, side="left"), bins - 1)

    total = 0.0
    n = confidence.shape[0]
    for m in range(bins):
        members = assignment == m
        count = int(members.sum())
        if count == 0:
            continue
        gap = abs(np.mean(correct[members]) - np.mean(confidence[members]))
        total += count / n * gap
    return float(total)


def auroc(scores_negative: npt.ArrayLike, scores_positive: npt.ArrayLike) -> float:
    """
    Area under the ROC curve via the Mann-Whitney U statistic.

    Positives are the samples expected to score higher (OOD under epistemic
    uncertainty). Ties count one half. The statistic is counted in half-pair units as
    an integer, so auroc(a, b) + auroc(b, a) == 1.0 holds exactly in floating point.

    Example:
        >>> auroc([0.1, 0.2], [0.8, 0.9])
        1.0

    Raises:
        SpecError: If either list is empty.
    """
    negative = np.asarray(scores_negative, dtype=np.float64).ravel()
    positive = np.asarray(scores_positive, dtype=np.float64).ravel()
    if negative.size == 0 or positive.size == 0:
        raise SpecError("AUROC needs at least one negative and one positive score")
    pooled = np.concatenate([negative, positive])
    # min + max rank is twice the average rank
    doubled = rankdata(pooled, method="min") + rankdata(pooled, method="max")
    n_neg, n_pos = negative.size, positive.size
    twice_u = int(np.sum(doubled[n_neg:], dtype=np.int64)) - n_pos * (n_pos + 1)
    pairs = 2 * n_neg * n_pos
    if 2 * twice_u <= pairs:
        return twice_u / pairs
    return 1.0 - (pairs - twice_u) / pairs


def evaluate(probs: Matrix, labels: Labels, bins: int = DEFAULT_ECE_BINS) -> EvalReport:
    """All classification metrics of a predictive distribution."""
    probs, labels = _check(probs, labels)
    return EvalReport(
        accuracy=accuracy(probs, labels),
        nll=nll(probs, labels),
        ece=ece(probs, labels, bins),
        brier=brier(probs, labels),
        count=int(labels.shape[0]),
    )
