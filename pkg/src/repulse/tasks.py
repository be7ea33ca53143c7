"""
Dataset generators and experiment harnesses.

Generators cover the one-dimensional regression toy, two moons, Gaussian blobs (the
base of the synthetic ambiguous-class benchmark), far-region OOD boxes and ambiguous
mixtures. The harnesses evaluate OOD detection from uncertainty scores and run the
pool-based active-learning loop.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import numpy.typing as npt

from .engine import Method, TrainConfig, train
from .errors import PoolExhausted, SpecError
from .metrics import DEFAULT_ECE_BINS, EvalReport, accuracy, auroc, evaluate
from .models import Dataset, Matrix, ScoreKind
from .particles import ParticleRecipe, ParticleSet
from .sources import RepulsionSource
from .uncertainty import UncertaintyArrays, decompose_inputs, predictive_probs

logger = logging.getLogger(__name__)

REGRESSION_NOISE_STD = 0.1
MIX_LOW, MIX_HIGH = 0.4, 0.6

# Score kinds that come from the uncertainty decomposition
DECOMPOSED_SCORES = (ScoreKind.EPISTEMIC, ScoreKind.TOTAL, ScoreKind.ALEATORIC)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def toy_function(x: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Noise-free regression target sin(2x) + 0.1 x^3."""
    x = np.asarray(x, dtype=np.float64)
    return np.sin(2.0 * x) + 0.1 * x**3


def gen_regression_toy(seed: int, n_per_cluster: int) -> Dataset:
    """
    One-dimensional regression data in two disjoint clusters.

    Inputs are uniform on [-2, -1] and on [1, 2] (``n_per_cluster`` each), targets are
    ``toy_function(x)`` plus N(0, 0.1^2) noise.

    Example:
        >>> gen_regression_toy(0, 20).inputs.shape
        (40, 1)
    """
    if n_per_cluster < 1:
        raise SpecError(f"n_per_cluster must be >= 1, got {n_per_cluster}")
    rng = np.random.default_rng(seed)
    x = np.concatenate(
        [rng.uniform(-2.0, -1.0, n_per_cluster), rng.uniform(1.0, 2.0, n_per_cluster)]
    )
    y = toy_function(x) + rng.normal(0.0, REGRESSION_NOISE_STD, x.shape[0])
    return Dataset(inputs=x[:, None], targets=y, name="toy-regression")


def gen_two_moons(seed: int, n: int, noise_std: float = 0.1) -> Dataset:
    """
    Two interleaved half circles.

    The upper moon (label 0) is (cos t, sin t), the lower moon (label 1) is
    (1 - cos t, 0.5 - sin t), t uniform on [0, pi]. Isotropic Gaussian noise is added
    and the rows are shuffled. Class sizes differ by at most one.
    """
    if n < 2:
        raise SpecError(f"two moons needs n >= 2, got {n}")
    if noise_std < 0:
        raise SpecError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(seed)
    n_upper = (n + 1) // 2
    n_lower = n - n_upper
    t_upper = rng.uniform(0.0, np.pi, n_upper)
    t_lower = rng.uniform(0.0, np.pi, n_lower)
    upper = np.column_stack([np.cos(t_upper), np.sin(t_upper)])
    lower = np.column_stack([1.0 - np.cos(t_lower), 0.5 - np.sin(t_lower)])
    inputs = np.vstack([upper, lower])
    labels = np.concatenate([np.zeros(n_upper, np.int64), np.ones(n_lower, np.int64)])
    if noise_std > 0:
        inputs = inputs + rng.normal(0.0, noise_std, inputs.shape)
    order = rng.permutation(n)
    return Dataset(inputs=inputs[order], targets=labels[order], name="two-moons", num_classes=2)


def gen_gaussian_blobs(
    seed: int, n_per_class: int, n_classes: int = 8, radius: float = 4.0, std: float = 0.5
) -> Dataset:
    """
    Isotropic 2-D Gaussian blobs with centers evenly spaced on a circle.

    Class k is centered at radius * (cos 2 pi k/K, sin 2 pi k/K).
    """
    if n_per_class < 1 or n_classes < 1:
        raise SpecError("gaussian blobs need n_per_class >= 1 and n_classes >= 1")
    if std < 0:
        raise SpecError(f"std must be >= 0, got {std}")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), n_per_class)
    inputs = centers[labels] + rng.normal(0.0, std, (labels.shape[0], 2))
    order = rng.permutation(labels.shape[0])
    return Dataset(inputs=inputs[order], targets=labels[order], name="blobs", num_classes=n_classes)


def gen_far_box(seed: int, n: int, inner: float, outer: float, dim: int = 2) -> Dataset:
    """
    Uniform points whose max-norm lies in [inner, outer].

    Samples the cube [-outer, outer]^dim and rejects points inside the inner cube. The
    targets are placeholder zeros; the set is meant as unlabeled OOD data.
    """
    if n < 1 or dim < 1:
        raise SpecError("far box needs n >= 1 and dim >= 1")
    if not 0.0 <= inner < outer:
        raise SpecError(f"far box needs 0 <= inner < outer, got {inner}, {outer}")
    rng = np.random.default_rng(seed)
    kept: list[Matrix] = []
    count = 0
    while count < n:
        batch = rng.uniform(-outer, outer, (2 * n, dim))
        batch = batch[np.abs(batch).max(axis=1) >= inner]
        kept.append(batch)
        count += batch.shape[0]
    inputs = np.vstack(kept)[:n]
    return Dataset(inputs=inputs, targets=np.zeros(n, np.int64), name="far-box", num_classes=1)


def gen_ambiguous_mix(
    base: Dataset, ambiguous_fraction: float, rng: np.random.Generator
) -> Dataset:
    """
    Append ambiguous samples that belong to two classes.

    round(fraction * N) samples x = lam * x_a + (1 - lam) * x_b are built from pairs of
    base samples with distinct labels, lam ~ U(0.4, 0.6). Each label is drawn uniformly
    from the two source labels; ``ambiguous`` flags them and ``sources`` records both
    source classes (-1 for clean rows). A fraction of 0 returns ``base`` unchanged.

    Args:
        base: Classification dataset with at least two distinct labels.
        ambiguous_fraction: Ambiguous count relative to the base size (may exceed 1).
        rng: Random stream.

    Raises:
        SpecError: For a regression or single-class base, or a negative fraction.
    """
    if not base.is_classification:
        raise SpecError("ambiguous mixes need a classification dataset")
    if ambiguous_fraction < 0:
        raise SpecError(f"ambiguous fraction must be >= 0, got {ambiguous_fraction}")
    labels = np.asarray(base.targets, dtype=np.int64)
    if np.unique(labels).shape[0] < 2:
        raise SpecError("ambiguous mixes need at least two classes")
    count = int(round(ambiguous_fraction * base.size))
    if count == 0:
        return base

    first = rng.integers(0, base.size, count)
    second = np.empty(count, dtype=np.int64)
    for i, a in enumerate(first):
        others = np.flatnonzero(labels != labels[a])
        second[i] = others[rng.integers(0, others.shape[0])]
    lam = rng.uniform(MIX_LOW, MIX_HIGH, count)[:, None]
    mixed = lam * base.inputs[first] + (1.0 - lam) * base.inputs[second]
    pair = np.column_stack([labels[first], labels[second]])
    mixed_labels = pair[np.arange(count), rng.integers(0, 2, count)]

    clean_flags = np.zeros(base.size, bool) if base.ambiguous is None else base.ambiguous
    clean_sources = np.full((base.size, 2), -1, np.int64) if base.sources is None else base.sources
    logger.debug("mixed %d ambiguous samples into %d base samples", count, base.size)
    return Dataset(
        inputs=np.vstack([base.inputs, mixed]),
        targets=np.concatenate([labels, mixed_labels]),
        name=f"{base.name}-ambiguous",
        ambiguous=np.concatenate([clean_flags, np.ones(count, bool)]),
        num_classes=base.num_classes,
        sources=np.vstack([clean_sources, pair]),
    )


def gen_active_learning_pool(
    seed: int, n_clean: int, ambiguous_ratio: float = 60.0, n_classes: int = 8
) -> Dataset:
    """
    Clean Gaussian blobs plus ambiguous mixtures at a clean:ambiguous ratio of 1:ratio.

    Example:
        >>> gen_active_learning_pool(0, 16, ambiguous_ratio=2).size
        48
    """
    if n_clean < 2:
        raise SpecError(f"pool needs at least 2 clean samples, got {n_clean}")
    blob_seq, mix_seq = np.random.SeedSequence(seed).spawn(2)
    per_class = math.ceil(n_clean / n_classes)
    blobs = gen_gaussian_blobs(int(blob_seq.generate_state(1)[0]), per_class, n_classes)
    clean = blobs.subset(np.arange(n_clean), name="pool")
    return gen_ambiguous_mix(clean, ambiguous_ratio, np.random.default_rng(mix_seq))


# ---------------------------------------------------------------------------
# OOD detection
# ---------------------------------------------------------------------------


def score_values(arrays: UncertaintyArrays, kind: ScoreKind) -> npt.NDArray[np.float64]:
    """The per-input score of one decomposed kind."""
    if kind is ScoreKind.EPISTEMIC:
        return arrays.epistemic
    if kind is ScoreKind.TOTAL:
        return arrays.total
    if kind is ScoreKind.ALEATORIC:
        return arrays.aleatoric
    raise SpecError(f"{kind.value} is not a decomposed uncertainty score")


@dataclass
class OodReport:
    """
    OOD-detection results of one particle set.

    ``auroc`` maps (score kind, OOD set name) to the AUROC of separating ID test
    inputs (negatives) from that OOD set (positives). ``scores`` keeps the per-input
    uncertainty arrays of the ID set (key ``"id"``) and of every OOD set.
    """

    id_report: EvalReport
    auroc: dict[tuple[ScoreKind, str], float] = field(default_factory=dict)
    scores: dict[str, UncertaintyArrays] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float]]:
        """(ood set, score kind, auroc) rows in insertion order."""
        return [(name, kind.value, value) for (kind, name), value in self.auroc.items()]

    def score_rows(self) -> list[tuple[str, int, float, float, float]]:
        """(set, index, total, aleatoric, epistemic) per input."""
        return [
            (name, i, t.total, t.aleatoric, t.epistemic)
            for name, arrays in self.scores.items()
            for i, t in enumerate(arrays.triples())
        ]


def ood_eval(
    ps: ParticleSet,
    id_test: Dataset,
    ood_sets: list[Dataset],
    bins: int = DEFAULT_ECE_BINS,
    threads: int = 1,
) -> OodReport:
    """
    Evaluate ID metrics and OOD-detection AUROCs.

    Args:
        ps: Classification particle set.
        id_test: Labeled in-distribution test set.
        ood_sets: OOD sets (targets ignored), keyed by their names.
        bins: ECE bins for the ID report.
        threads: Worker threads for per-particle prediction.

    Returns:
        OodReport with one AUROC per (epistemic/total/aleatoric, OOD set).

    Raises:
        SpecError: If ``id_test`` is not a classification set or OOD names repeat.
    """
    if not id_test.is_classification:
        raise SpecError("OOD evaluation needs a labeled classification test set")
    names = [ds.name for ds in ood_sets]
    if "id" in names or len(set(names)) != len(names):
        raise SpecError(f"OOD set names must be unique and not 'id', got {names}")

    probs = predictive_probs(ps, id_test.inputs, threads)
    report = OodReport(id_report=evaluate(probs, id_test.targets, bins))
    report.scores["id"] = decompose_inputs(ps, id_test.inputs, threads)
    for ds in ood_sets:
        report.scores[ds.name] = decompose_inputs(ps, ds.inputs, threads)
    for kind in DECOMPOSED_SCORES:
        for ds in ood_sets:
            report.auroc[(kind, ds.name)] = auroc(
                score_values(report.scores["id"], kind), score_values(report.scores[ds.name], kind)
            )
    logger.info(
        "ID accuracy %.4f; epistemic AUROC %s",
        report.id_report.accuracy,
        ", ".join(f"{n}={report.auroc[(ScoreKind.EPISTEMIC, n)]:.4f}" for n in names),
    )
    return report


# ---------------------------------------------------------------------------
# Active learning
# ---------------------------------------------------------------------------


def _default_retrain() -> TrainConfig:
    return TrainConfig(step_size=1e-3, steps=500, train_batch_size=32, repulsion_batch_size=64)


def _default_recipe() -> ParticleRecipe:
    return ParticleRecipe(hidden=(64, 64), n=10, frozen_base=False)


@dataclass
class AcquisitionConfig:
    """
    Pool-based active-learning settings.

    Every round retrains a fresh particle set from ``recipe`` on the labeled set, then
    moves the ``acquire_per_round`` pool samples with the highest score into it.
    ``repulsion`` defaults to the whole (unlabeled) pool for function-space runs.
    ``ambiguous_ratio`` is the clean:ambiguous ratio 1:r of generated pools.
    """

    initial_labeled: int = 20
    acquire_per_round: int = 5
    rounds: int = 55
    score: ScoreKind = ScoreKind.EPISTEMIC
    retrain: TrainConfig = field(default_factory=_default_retrain)
    recipe: ParticleRecipe = field(default_factory=_default_recipe)
    repulsion: Optional[RepulsionSource] = None
    ambiguous_ratio: float = 60.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.initial_labeled < 1 or self.acquire_per_round < 1 or self.rounds < 1:
            raise SpecError("initial_labeled, acquire_per_round and rounds must be >= 1")
        if self.ambiguous_ratio < 0:
            raise SpecError(f"ambiguous_ratio must be >= 0, got {self.ambiguous_ratio}")

    @property
    def required_pool_size(self) -> int:
        return self.initial_labeled + self.rounds * self.acquire_per_round


@dataclass
class AcquisitionCurve:
    """Per-round results: labeled-set size, test accuracy and acquired pool indices."""

    score: ScoreKind
    labeled_sizes: list[int] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    acquired: list[npt.NDArray[np.int64]] = field(default_factory=list)

    HEADER = ("round", "labeled", "accuracy")

    def rows(self) -> list[tuple[int, int, float]]:
        return [
            (r, size, acc)
            for r, (size, acc) in enumerate(zip(self.labeled_sizes, self.accuracies, strict=True))
        ]

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[-1]


def select_top(scores: npt.NDArray[np.float64], k: int) -> npt.NDArray[np.int64]:
    """
    Positions of the k highest scores; ties go to the lower position.

    Example:
        >>> select_top(np.array([0.1, 0.5, 0.5, 0.2]), 2)
        array([1, 2])
    """
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:k]


def acquisition_scores(
    ps: ParticleSet, inputs: Matrix, kind: ScoreKind, threads: int = 1
) -> npt.NDArray[np.float64]:
    """Per-input acquisition scores (BALD, predictive entropy or expected entropy)."""
    return score_values(decompose_inputs(ps, inputs, threads), kind)


def _fit(
    labeled: Dataset, pool: Dataset, cfg: AcquisitionConfig, num_classes: int, seed: int
) -> ParticleSet:
    ps = cfg.recipe.build(labeled.dim, num_classes, seed)
    source = cfg.repulsion
    if source is None and cfg.retrain.method is Method.FUNCTION_REPULSION:
        source = RepulsionSource.train_inputs(pool.inputs)
    trained, _ = train(ps, labeled, source, replace(cfg.retrain, seed=seed, threads=cfg.threads))
    return trained


def active_learning_run(pool: Dataset, test: Dataset, cfg: AcquisitionConfig) -> AcquisitionCurve:
    """
    Pool-based active learning from scratch each round.

    Round r trains on ``initial_labeled + r * acquire_per_round`` samples and records
    test accuracy; after every round but the last the top-scoring unlabeled pool
    samples are acquired (uniformly at random for the Random score). The initial
    labeled set, random acquisitions and per-round training seeds come from independent
    child streams of ``SeedSequence(cfg.seed)``.

    Raises:
        PoolExhausted: If the pool cannot supply every round.
        SpecError: If pool or test set is not a classification set.
    """
    if not pool.is_classification or not test.is_classification:
        raise SpecError("active learning needs classification pool and test sets")
    if cfg.required_pool_size > pool.size:
        raise PoolExhausted(
            f"{cfg.rounds} rounds need {cfg.required_pool_size} pool samples, pool has {pool.size}"
        )
    num_classes = max(int(pool.num_classes or 0), int(test.num_classes or 0))
    select_seq, random_seq, train_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    random_rng = np.random.default_rng(random_seq)
    round_seeds = train_seq.generate_state(cfg.rounds + 1)

    is_labeled = np.zeros(pool.size, bool)
    select_rng = np.random.default_rng(select_seq)
    initial = select_rng.choice(pool.size, cfg.initial_labeled, replace=False)
    is_labeled[initial] = True
    curve = AcquisitionCurve(score=cfg.score)

    for r in range(cfg.rounds + 1):
        labeled_idx = np.flatnonzero(is_labeled)
        labeled = pool.subset(labeled_idx, name=f"labeled-{r}")
        ps = _fit(labeled, pool, cfg, num_classes, int(round_seeds[r]))
        acc = accuracy(predictive_probs(ps, test.inputs, cfg.threads), test.targets)
        curve.labeled_sizes.append(int(labeled_idx.shape[0]))
        curve.accuracies.append(acc)
        logger.info("round %d: %d labeled, test accuracy %.4f", r, labeled_idx.shape[0], acc)
        if r == cfg.rounds:
            break

        unlabeled = np.flatnonzero(~is_labeled)
        if cfg.score is ScoreKind.RANDOM:
            chosen = random_rng.choice(unlabeled.shape[0], cfg.acquire_per_round, replace=False)
        else:
            scores = acquisition_scores(ps, pool.inputs[unlabeled], cfg.score, cfg.threads)
            chosen = select_top(scores, cfg.acquire_per_round)
        picked = unlabeled[np.sort(chosen)]
        is_labeled[picked] = True
        curve.acquired.append(picked)
    return curve
