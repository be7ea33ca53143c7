"""
Repulsion kernels between particles.

Particles are rows of an n x m matrix: flattened parameters (parameter space) or
stacked outputs on a repulsion batch (function space). The kernel is

    k(v_i, v_j) = exp(-D(v_i, v_j) / nu)

with D one of L1, L2 or squared L2. The repulsion direction of particle i is

    r_i = sum_j grad_{v_i} k(v_i, v_j) / sum_j k(v_i, v_j) = grad_{v_i} log sum_j k(v_i, v_j)

with the other particles held constant. For squared L2 the self-gradient is exactly
zero; for the unsquared forms it is defined as zero.

The median heuristic sets nu = median(off-diagonal squared L2 distances) / log n.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import KernelError
from .models import BandwidthRule, Distance, KernelConfig, Matrix

COLLAPSED_BANDWIDTH = 1e-8
SINGLE_PARTICLE_BANDWIDTH = 1.0

_CDIST_METRIC = {
    Distance.L1: "cityblock",
    Distance.L2: "euclidean",
    Distance.SQ_L2: "sqeuclidean",
}


@dataclass
class KernelMatrix:
    """n x n kernel values and the bandwidth that produced them."""

    values: Matrix
    bandwidth_used: float


def pairwise_distances(vectors: Matrix, metric: Distance) -> Matrix:
    """
    All pairwise distances between rows.

    Example:
        >>> pairwise_distances(np.array([[0.0, 0.0], [3.0, 4.0]]), Distance.L2)[0, 1]
        5.0
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise KernelError(f"expected an n x m matrix with n >= 1, got shape {vectors.shape}")
    if np.isnan(vectors).any():
        raise KernelError("particle vectors contain NaN")
    return cdist(vectors, vectors, metric=_CDIST_METRIC[metric])


def median_bandwidth(sq_distances: Matrix, n: int) -> float:
    """
    Median heuristic on squared distances.

    Args:
        sq_distances: n x n squared L2 distances.
        n: Particle count (>= 2).

    Returns:
        median of the n(n-1)/2 off-diagonal entries divided by log n, or 1e-8 when the
        particles have collapsed onto one point.

    Raises:
        KernelError: If n < 2.
    """
    if n < 2:
        raise KernelError(f"median heuristic needs at least 2 particles, got {n}")
    upper = sq_distances[np.triu_indices(n, k=1)]
    median = float(np.median(upper))
    if median == 0.0:
        return COLLAPSED_BANDWIDTH
    return median / np.log(n)


def resolve_bandwidth(vectors: Matrix, config: KernelConfig) -> float:
    """Bandwidth for a particle set under the configured rule."""
    if config.bandwidth is BandwidthRule.FIXED:
        return config.nu
    n = vectors.shape[0]
    if n < 2:
        return SINGLE_PARTICLE_BANDWIDTH
    return median_bandwidth(pairwise_distances(vectors, Distance.SQ_L2), n)


def kernel_matrix(
    distances: Matrix, config: KernelConfig, sq_distances: Matrix | None = None
) -> KernelMatrix:
    """
    Kernel values exp(-D / nu).

    Args:
        distances: n x n distances computed with ``config.distance``.
        config: Kernel settings.
        sq_distances: Squared L2 distances for the median heuristic. Only needed when
            the kernel metric is L1; for L2 and squared L2 they are derived from
            ``distances``.

    Returns:
        KernelMatrix with unit diagonal and entries in (0, 1].

    Raises:
        KernelError: If the resolved bandwidth is not positive or the median heuristic
            cannot be evaluated.
    """
    n = distances.shape[0]
    if config.bandwidth is BandwidthRule.FIXED:
        nu = config.nu
    elif n < 2:
        nu = SINGLE_PARTICLE_BANDWIDTH
    else:
        if config.distance is Distance.SQ_L2:
            sq_distances = distances
        elif config.distance is Distance.L2:
            sq_distances = distances * distances
        elif sq_distances is None:
            raise KernelError("median heuristic with an L1 kernel needs squared L2 distances")
        nu = median_bandwidth(sq_distances, n)
    if not nu > 0:
        raise KernelError(f"bandwidth must be positive, got {nu}")
    return KernelMatrix(values=np.exp(-distances / nu), bandwidth_used=float(nu))


def kernel_matrix_from_vectors(vectors: Matrix, config: KernelConfig) -> KernelMatrix:
    """Distances, bandwidth and kernel in one call."""
    distances = pairwise_distances(vectors, config.distance)
    sq = None
    if config.bandwidth is BandwidthRule.MEDIAN and config.distance is Distance.L1:
        sq = pairwise_distances(vectors, Distance.SQ_L2)
    return kernel_matrix(distances, config, sq)


def repulsion_directions(vectors: Matrix, config: KernelConfig) -> tuple[Matrix, float]:
    """
    Repulsion directions of all particles at once.

    Args:
        vectors: n x m particle representations.
        config: Kernel settings.

    Returns:
        (n x m matrix whose row i is r_i, bandwidth used).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    kernel = kernel_matrix_from_vectors(vectors, config)
    k = kernel.values
    nu = kernel.bandwidth_used
    k_sum = k.sum(axis=1)[:, None]
    # Differences are translation invariant; shifting by row 0 makes coincident
    # particles exactly zero.
    shifted = vectors - vectors[0]

    if config.distance is Distance.SQ_L2:
        # sum_j k_ij (v_i - v_j) = v_i sum_j k_ij - (K v)_i
        pull = shifted * k_sum - k @ shifted
        grad = -2.0 / nu * pull
    elif config.distance is Distance.L2:
        d = pairwise_distances(vectors, Distance.L2)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(d > 0.0, k / d, 0.0)
        pull = shifted * w.sum(axis=1)[:, None] - w @ shifted
        grad = -1.0 / nu * pull
    else:
        grad = np.empty_like(vectors)
        for i in range(vectors.shape[0]):
            signs = np.sign(vectors[i] - vectors)
            grad[i] = -1.0 / nu * (k[i] @ signs)
    return grad / k_sum, nu


def repulsion_direction(i: int, vectors: Matrix, config: KernelConfig) -> Matrix:
    """
    Repulsion direction r_i = grad_{v_i} log sum_j k(v_i, v_j).

    A single particle, or a set of identical particles, gets the zero vector.
    """
    directions, _ = repulsion_directions(vectors, config)
    return directions[i]
