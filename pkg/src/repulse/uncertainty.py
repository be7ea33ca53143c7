"""
Uncertainty decomposition from particle predictions.

For n particles with predictive distributions p_i = p(y | x, theta_i) and the mixture
p_bar = (1/n) sum_i p_i:

    total     = H(p_bar)
    aleatoric = (1/n) sum_i H(p_i)
    epistemic = (1/n) sum_i KL(p_i || p_bar)

and total = aleatoric + epistemic. All values are in nats. Terms with p_i[k] = 0
contribute 0 (``scipy.special.entr`` / ``rel_entr`` conventions).
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import numpy.typing as npt
from scipy.special import entr, rel_entr
from scipy.special import softmax as _softmax

from .errors import SpecError
from .models import Matrix
from .particles import ParticleSet, predict_all

ROW_SUM_TOLERANCE = 1e-9


class UncertaintyTriple(NamedTuple):
    """Total, aleatoric and epistemic uncertainty in nats."""

    total: float
    aleatoric: float
    epistemic: float


@dataclass
class UncertaintyArrays:
    """Per-input uncertainty values for a batch."""

    total: npt.NDArray[np.float64]
    aleatoric: npt.NDArray[np.float64]
    epistemic: npt.NDArray[np.float64]

    def triples(self) -> list[UncertaintyTriple]:
        return [
            UncertaintyTriple(float(t), float(a), float(e))
            for t, a, e in zip(self.total, self.aleatoric, self.epistemic, strict=True)
        ]


@dataclass
class PredictiveSample:
    """
    Per-particle predictions at one input.

    Exactly one of ``probs`` (n x K class probabilities) or ``means`` (n regression
    means) is set.
    """

    probs: Optional[Matrix] = None
    means: Optional[npt.NDArray[np.float64]] = None

    def __post_init__(self) -> None:
        if (self.probs is None) == (self.means is None):
            raise SpecError("a predictive sample holds either class probabilities or means")
        if self.probs is not None:
            self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
            _check_probabilities(self.probs)
        else:
            self.means = np.atleast_1d(np.asarray(self.means, dtype=np.float64))
            if self.means.size < 1:
                raise SpecError("a predictive sample needs at least one particle")

    @property
    def n(self) -> int:
        if self.probs is not None:
            return int(self.probs.shape[0])
        assert self.means is not None
        return int(self.means.shape[0])


def _check_probabilities(probs: Matrix) -> None:
    if probs.shape[0] < 1:
        raise SpecError("a predictive sample needs at least one particle")
    sums_to_one = np.allclose(probs.sum(axis=-1), 1.0, rtol=0.0, atol=ROW_SUM_TOLERANCE)
    if (probs < 0).any() or not sums_to_one:
        raise SpecError("probability rows must be non-negative and sum to 1")


def softmax(logits: Matrix) -> Matrix:
    """
    Numerically stable softmax over the last axis.

    Example:
        >>> softmax(np.array([1000.0, 0.0]))
        array([1., 0.])
    """
    return _softmax(np.asarray(logits, dtype=np.float64), axis=-1)


def entropy(probs: Matrix) -> npt.NDArray[np.float64] | float:
    """
    Shannon entropy -sum p log p over the last axis, with 0 log 0 = 0.

    Example:
        >>> round(float(entropy(np.full(10, 0.1))), 6)
        2.302585
    """
    value = entr(np.asarray(probs, dtype=np.float64)).sum(axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def decompose_probs(probs: Matrix) -> UncertaintyArrays:
    """
    Vectorised decomposition.

    Args:
        probs: n x B x K per-particle class probabilities.

    Returns:
        UncertaintyArrays with B entries each.
    """
    probs = np.asarray(probs, dtype=np.float64)
    mixture = probs.mean(axis=0)
    total = entr(mixture).sum(axis=-1)
    aleatoric = entr(probs).sum(axis=-1).mean(axis=0)
    epistemic = rel_entr(probs, mixture[None]).sum(axis=-1).mean(axis=0)
    return UncertaintyArrays(total=total, aleatoric=aleatoric, epistemic=epistemic)


def decompose(sample: PredictiveSample) -> UncertaintyTriple:
    """
    Total / aleatoric / epistemic split of one classification sample.

    Epistemic uncertainty is evaluated through the KL form (mean divergence of each
    particle from the mixture), not as a difference.

    Raises:
        SpecError: If the sample holds regression means.
    """
    if sample.probs is None:
        raise SpecError("decompose needs class probabilities; use regression_disagreement")
    return decompose_probs(sample.probs[:, None, :]).triples()[0]


def regression_disagreement(sample: PredictiveSample) -> tuple[float, float]:
    """
    Mean and population standard deviation of the particle means.

    Example:
        >>> regression_disagreement(PredictiveSample(means=np.array([-1.0, 1.0])))
        (0.0, 1.0)
    """
    if sample.means is None:
        raise SpecError("regression_disagreement needs particle means")
    return float(np.mean(sample.means)), float(np.std(sample.means))


def particle_probs(ps: ParticleSet, inputs: Matrix, threads: int = 1) -> Matrix:
    """n x B x K class probabilities of every particle."""
    return softmax(predict_all(ps, inputs, threads))


def predictive_probs(ps: ParticleSet, inputs: Matrix, threads: int = 1) -> Matrix:
    """B x K mixture predictive distribution."""
    return particle_probs(ps, inputs, threads).mean(axis=0)


def decompose_inputs(ps: ParticleSet, inputs: Matrix, threads: int = 1) -> UncertaintyArrays:
    """Per-input uncertainty arrays of a classification particle set."""
    return decompose_probs(particle_probs(ps, inputs, threads))


def decompose_batch(ps: ParticleSet, inputs: Matrix, threads: int = 1) -> list[UncertaintyTriple]:
    """
    Predict with every particle, apply softmax and decompose per input.

    Returns:
        One UncertaintyTriple per input row.
    """
    return decompose_inputs(ps, inputs, threads).triples()
