"""
Particle-optimization training engine.

Every particle theta_i follows the vector field

    theta_i <- theta_i + eps * [ grad log p(theta_i | D) - gamma * r_i ]

where the attraction term is a mini-batch estimate of the log-posterior gradient,

    grad [ (N / B) * log p(batch | theta_i) - ||theta_i||^2 / (2 sigma_p^2) ],

and r_i is the kernel repulsion direction. Parameter-space repulsion evaluates the
kernel on the flattened trainable parameters. Function-space repulsion evaluates it on
the particle outputs over a repulsion batch and pulls the direction back to the
parameters with one backward pass (other particles' outputs held constant). A plain
ensemble is the gamma = 0 case. All repulsion directions are computed from the
pre-step positions, so the update is synchronous.

With n = 1 the repulsion direction is exactly zero and training reduces to gradient
ascent on the log posterior (MAP).
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import numpy.typing as npt
from scipy.special import log_softmax
from scipy.special import softmax as _softmax

from .errors import EmptyPool, LabelOutOfRange, NumericError, SpecError
from .kernels import pairwise_distances, repulsion_directions
from .models import (
    Dataset,
    Distance,
    KernelConfig,
    Matrix,
    MlpSpec,
    ParamVector,
    ParticleMode,
    Representation,
    Space,
)
from .nn import DEFAULT_SPECTRAL_COEFF, SpectralNormalizer, backward, forward, split_network
from .particles import ParticleSet, base_features, init_particles, map_particles
from .sources import RepulsionSource, draw

logger = logging.getLogger(__name__)

DEFAULT_PRIOR_VARIANCE = 100.0
DEFAULT_NOISE_STD = 0.1
DEFAULT_BATCH_SIZE = 128


class LikelihoodKind(Enum):
    """Observation model."""

    CATEGORICAL = "categorical"
    GAUSSIAN = "gaussian"


class Method(Enum):
    """Particle update rule."""

    PLAIN = "plain"
    PARAM_REPULSION = "parameter"
    FUNCTION_REPULSION = "function"


@dataclass(frozen=True)
class Likelihood:
    """Categorical over logits, or Gaussian with fixed noise around a scalar mean."""

    kind: LikelihoodKind = LikelihoodKind.CATEGORICAL
    noise_std: float = DEFAULT_NOISE_STD

    def __post_init__(self) -> None:
        if self.kind is LikelihoodKind.GAUSSIAN and not self.noise_std > 0:
            raise SpecError(f"noise_std must be positive, got {self.noise_std}")


@dataclass
class TrainConfig:
    """
    Settings of one training run.

    ``steps`` counts optimizer steps; when ``epochs`` is set it takes precedence and
    each epoch is one pass over the data in mini-batches drawn without replacement.
    ``decay`` lists (step, multiplier) milestones: from that step on the step size is
    ``step_size * multiplier``.
    """

    step_size: float = 1e-3
    steps: int = 1000
    epochs: Optional[int] = None
    train_batch_size: int = DEFAULT_BATCH_SIZE
    repulsion_batch_size: int = DEFAULT_BATCH_SIZE
    repulsion_weight: float = 1.0
    prior_variance: float = DEFAULT_PRIOR_VARIANCE
    method: Method = Method.FUNCTION_REPULSION
    kernel: KernelConfig = field(default_factory=KernelConfig)
    likelihood: Likelihood = field(default_factory=Likelihood)
    seed: int = 0
    decay: tuple[tuple[int, float], ...] = ()
    spectral_norm: bool = False
    spectral_coeff: float = DEFAULT_SPECTRAL_COEFF
    momentum: float = 0.0
    log_every: int = 1
    threads: int = 1

    def __post_init__(self) -> None:
        if not self.step_size > 0:
            raise SpecError(f"step_size must be positive, got {self.step_size}")
        if self.train_batch_size < 1 or self.repulsion_batch_size < 1:
            raise SpecError("batch sizes must be >= 1")
        if self.repulsion_weight < 0:
            raise SpecError(f"repulsion_weight must be >= 0, got {self.repulsion_weight}")
        if not self.prior_variance > 0:
            raise SpecError(f"prior_variance must be positive, got {self.prior_variance}")
        if self.steps < 0 or (self.epochs is not None and self.epochs < 0):
            raise SpecError("steps and epochs must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise SpecError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.log_every < 1:
            raise SpecError(f"log_every must be >= 1, got {self.log_every}")

    @property
    def gamma(self) -> float:
        """Effective repulsion weight (zero for a plain ensemble)."""
        return 0.0 if self.method is Method.PLAIN else self.repulsion_weight

    def step_size_at(self, step: int) -> float:
        """Step size after applying the latest decay milestone <= step."""
        multiplier = 1.0
        for milestone, factor in sorted(self.decay):
            if step >= milestone:
                multiplier = factor
        return self.step_size * multiplier


@dataclass(frozen=True)
class LogEntry:
    """Diagnostics recorded after one training step."""

    step: int
    train_nll: float
    function_distance: float
    parameter_distance: float
    bandwidth: float


@dataclass
class TrainLog:
    """Recorded training diagnostics in step order."""

    entries: list[LogEntry] = field(default_factory=list)

    HEADER = ("step", "train_nll", "function_distance", "parameter_distance", "bandwidth")

    def append(self, entry: LogEntry) -> None:
        if self.entries and entry.step <= self.entries[-1].step:
            last = self.entries[-1].step
            raise SpecError(f"log steps must increase, got {entry.step} after {last}")
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def rows(self) -> list[tuple[int, float, float, float, float]]:
        return [
            (e.step, e.train_nll, e.function_distance, e.parameter_distance, e.bandwidth)
            for e in self.entries
        ]


@dataclass
class StepInfo:
    """What a single step observed, used to build log entries."""

    bandwidth: float = math.nan
    function_vectors: Optional[Matrix] = None


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------


def _check_targets(outputs: Matrix, targets: npt.ArrayLike, likelihood: Likelihood) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.shape[0] != outputs.shape[0]:
        raise SpecError(f"{outputs.shape[0]} outputs but {targets.shape[0]} targets")
    if likelihood.kind is LikelihoodKind.CATEGORICAL:
        labels = targets.astype(np.int64)
        if labels.min() < 0 or labels.max() >= outputs.shape[1]:
            raise LabelOutOfRange(f"labels must lie in [0, {outputs.shape[1]})")
        return labels
    if outputs.shape[1] != 1:
        raise SpecError(f"Gaussian likelihood needs a single output, got {outputs.shape[1]}")
    return targets.astype(np.float64).reshape(-1)


def log_likelihood(outputs: Matrix, targets: npt.ArrayLike, likelihood: Likelihood) -> float:
    """
    Batch log-likelihood in nats (summed over samples).

    Example:
        >>> round(log_likelihood(np.zeros((1, 10)), [0], Likelihood()), 6)
        -2.302585
    """
    targets = _check_targets(outputs, targets, likelihood)
    if likelihood.kind is LikelihoodKind.CATEGORICAL:
        return float(log_softmax(outputs, axis=1)[np.arange(targets.shape[0]), targets].sum())
    var = likelihood.noise_std**2
    residual = targets - outputs[:, 0]
    return float(np.sum(-residual * residual / (2.0 * var) - 0.5 * np.log(2.0 * np.pi * var)))


def output_cotangent(outputs: Matrix, targets: npt.ArrayLike, likelihood: Likelihood) -> Matrix:
    """Gradient of ``log_likelihood`` with respect to the network outputs."""
    targets = _check_targets(outputs, targets, likelihood)
    if likelihood.kind is LikelihoodKind.CATEGORICAL:
        cot = -_softmax(outputs, axis=1)
        cot[np.arange(targets.shape[0]), targets] += 1.0
        return cot
    return ((targets - outputs[:, 0]) / likelihood.noise_std**2)[:, None]


def attraction_gradient(
    params: ParamVector,
    spec: MlpSpec,
    inputs: Matrix,
    targets: npt.ArrayLike,
    *,
    likelihood: Likelihood,
    dataset_size: int,
    prior_variance: float,
) -> ParamVector:
    """
    Mini-batch estimate of the log-posterior gradient of one particle.

    Returns grad [ (N/B) log p(batch | params) - ||params||^2 / (2 prior_variance) ].
    In multi-head mode pass the head spec with base features as ``inputs``; the
    gradient and the prior then cover the head only.
    """
    outputs = forward(params, spec, inputs)
    scale = dataset_size / outputs.shape[0]
    cot = scale * output_cotangent(outputs, targets, likelihood)
    return backward(params, spec, inputs, cot) - params / prior_variance


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def _mean_pairwise(vectors: Matrix) -> float:
    n = vectors.shape[0]
    if n < 2:
        return 0.0
    d = pairwise_distances(vectors, Distance.L2)
    return float(d[np.triu_indices(n, k=1)].mean())


def _function_vectors(outputs: Matrix, representation: Representation) -> Matrix:
    if representation is Representation.PROBABILITIES:
        outputs = _softmax(outputs, axis=-1)
    return outputs.reshape(outputs.shape[0], -1)


def _pullback_cotangent(
    outputs: Matrix, direction: Matrix, representation: Representation
) -> Matrix:
    """Map a function-space direction on one particle's outputs back to logit space."""
    if representation is Representation.LOGITS:
        return direction
    probs = _softmax(outputs, axis=-1)
    return probs * (direction - np.sum(direction * probs, axis=-1, keepdims=True))


def _attraction_all(
    ps: ParticleSet, inputs: Matrix, targets: npt.ArrayLike, config: TrainConfig, dataset_size: int
) -> tuple[Matrix, Optional[ParamVector]]:
    """Attraction gradients for all heads/networks and, if trained, the shared base."""
    spec = ps.particle_spec
    kw = dict(
        likelihood=config.likelihood,
        dataset_size=dataset_size,
        prior_variance=config.prior_variance,
    )
    if ps.trains_base:
        assert ps.base_params is not None
        composed = ps.composed_spec
        n_base = ps.base_spec.parameter_count
        full = map_particles(
            lambda i: attraction_gradient(
                np.concatenate([ps.base_params, ps.particles[i]]), composed, inputs, targets, **kw
            ),
            ps.n,
            config.threads,
        )
        # Averaging keeps one prior term on the shared base
        base_grad = np.mean([g[:n_base] for g in full], axis=0)
        return np.stack([g[n_base:] for g in full]), base_grad

    shared = base_features(ps, inputs)
    grads = map_particles(
        lambda i: attraction_gradient(ps.particles[i], spec, shared, targets, **kw),
        ps.n,
        config.threads,
    )
    return np.stack(grads), None


def _apply_update(
    ps: ParticleSet,
    particle_grads: Matrix,
    base_grad: Optional[ParamVector],
    config: TrainConfig,
    velocity: Optional["_Velocity"],
) -> ParticleSet:
    eps = config.step_size_at(ps.step)
    update = eps * particle_grads
    base_update = None if base_grad is None else eps * base_grad
    if velocity is not None:
        update, base_update = velocity.push(update, base_update)
    particles = ps.particles + update
    base = None
    if base_update is not None:
        assert ps.base_params is not None
        base = ps.base_params + base_update
    if not np.isfinite(particles).all() or (base is not None and not np.isfinite(base).all()):
        raise NumericError(f"non-finite parameters after step {ps.step + 1}")
    return ps.with_particles(particles, base_params=base, step=ps.step + 1)


def povi_step_param(
    ps: ParticleSet,
    inputs: Matrix,
    targets: npt.ArrayLike,
    config: TrainConfig,
    dataset_size: Optional[int] = None,
    velocity: Optional["_Velocity"] = None,
) -> tuple[ParticleSet, StepInfo]:
    """
    One parameter-space (or plain-ensemble) update.

    theta_i <- theta_i + eps * [attraction_i - gamma * r_i] with r_i computed on the
    flattened trainable parameters of all particles before the step.

    Args:
        ps: Current particles.
        inputs: Training mini-batch inputs.
        targets: Training mini-batch targets.
        config: Training settings; method must be PLAIN or PARAM_REPULSION.
        dataset_size: N for likelihood rescaling (defaults to the batch size).

    Returns:
        (updated particles, step diagnostics)
    """
    if config.method is Method.FUNCTION_REPULSION:
        raise SpecError("povi_step_param needs a plain or parameter-space method")
    n_data = inputs.shape[0] if dataset_size is None else dataset_size
    grads, base_grad = _attraction_all(ps, inputs, targets, config, n_data)
    info = StepInfo()
    gamma = config.gamma
    if gamma > 0:
        directions, info.bandwidth = repulsion_directions(ps.particles, config.kernel)
        grads = grads - gamma * directions
    return _apply_update(ps, grads, base_grad, config, velocity), info


def povi_step_function(
    ps: ParticleSet,
    inputs: Matrix,
    targets: npt.ArrayLike,
    repulsion_inputs: Matrix,
    config: TrainConfig,
    dataset_size: Optional[int] = None,
    velocity: Optional["_Velocity"] = None,
) -> tuple[ParticleSet, StepInfo]:
    """
    One function-space update.

    1. u_i = flatten(f_i(repulsion batch)) as logits or probabilities.
    2. r_i = repulsion direction of u_i among {u_j}.
    3. g_i = backward(theta_i, repulsion batch, cotangent = r_i reshaped).
    4. theta_i <- theta_i + eps * [attraction_i - gamma * g_i].

    Raises:
        EmptyPool: If the repulsion batch is empty.
        DimensionMismatch: If its width differs from the network input width.
    """
    if config.method is not Method.FUNCTION_REPULSION:
        raise SpecError("povi_step_function needs the function-space method")
    repulsion_inputs = np.asarray(repulsion_inputs, dtype=np.float64)
    if repulsion_inputs.ndim != 2 or repulsion_inputs.shape[0] < 1:
        raise EmptyPool("repulsion batch is empty")
    n_data = inputs.shape[0] if dataset_size is None else dataset_size
    grads, base_grad = _attraction_all(ps, inputs, targets, config, n_data)
    info = StepInfo()
    gamma = config.gamma
    if gamma == 0:
        return _apply_update(ps, grads, base_grad, config, velocity), info

    representation = config.kernel.representation
    if ps.trains_base:
        assert ps.base_params is not None
        spec = ps.composed_spec
        thetas = [np.concatenate([ps.base_params, ps.particles[i]]) for i in range(ps.n)]
        rep_inputs = repulsion_inputs
    else:
        spec = ps.particle_spec
        thetas = list(ps.particles)
        rep_inputs = base_features(ps, repulsion_inputs)

    outputs = np.stack(
        map_particles(lambda i: forward(thetas[i], spec, rep_inputs), ps.n, config.threads)
    )
    vectors = _function_vectors(outputs, representation)
    directions, info.bandwidth = repulsion_directions(vectors, config.kernel)
    info.function_vectors = vectors

    def pull(i: int) -> ParamVector:
        direction = directions[i].reshape(outputs[i].shape)
        cotangent = _pullback_cotangent(outputs[i], direction, representation)
        return backward(thetas[i], spec, rep_inputs, cotangent)

    pulled = np.stack(map_particles(pull, ps.n, config.threads))
    if ps.trains_base:
        n_base = ps.base_spec.parameter_count
        assert base_grad is not None
        base_grad = base_grad - gamma * pulled[:, :n_base].mean(axis=0)
        pulled = pulled[:, n_base:]
    return _apply_update(ps, grads - gamma * pulled, base_grad, config, velocity), info


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class _Velocity:
    """Heavy-ball momentum buffers."""

    momentum: float
    particles: Optional[Matrix] = None
    base: Optional[ParamVector] = None

    def push(
        self, update: Matrix, base_update: Optional[ParamVector]
    ) -> tuple[Matrix, Optional[ParamVector]]:
        if self.particles is None:
            self.particles = update
        else:
            self.particles = self.momentum * self.particles + update
        if base_update is not None:
            if self.base is None:
                self.base = base_update
            else:
                self.base = self.momentum * self.base + base_update
        return self.particles, self.base if base_update is not None else None


def _spectral_layers(ps: ParticleSet) -> tuple[range, range]:
    """Feature-extractor layers to normalize: (per particle, shared base)."""
    if ps.mode is ParticleMode.FULL_ENSEMBLE:
        return range(ps.base_spec.n_layers - 1), range(0)
    if ps.trains_base:
        return range(0), range(ps.base_spec.n_layers)
    return range(0), range(0)


def _apply_spectral_norm(ps: ParticleSet, normalizer: SpectralNormalizer) -> ParticleSet:
    particle_layers, base_layers = _spectral_layers(ps)
    particles = ps.particles
    if len(particle_layers):
        spec = ps.particle_spec
        particles = np.stack(
            [normalizer.apply(particles[i], spec, i, particle_layers) for i in range(ps.n)]
        )
    base = ps.base_params
    if len(base_layers):
        assert base is not None
        base = normalizer.apply(base, ps.base_spec, -1, base_layers)
    return ps.with_particles(particles, base_params=base)


def _outputs(ps: ParticleSet, inputs: Matrix) -> Matrix:
    shared = base_features(ps, inputs)
    return np.stack([forward(ps.particles[i], ps.particle_spec, shared) for i in range(ps.n)])


def _mean_nll(
    ps: ParticleSet, inputs: Matrix, targets: npt.ArrayLike, likelihood: Likelihood
) -> float:
    outputs = _outputs(ps, inputs)
    return float(
        np.mean([-log_likelihood(out, targets, likelihood) / out.shape[0] for out in outputs])
    )


def _batches(n_data: int, batch_size: int, rng: np.random.Generator) -> list[npt.NDArray[np.int64]]:
    """One epoch of mini-batch index sets, sampled without replacement."""
    order = rng.permutation(n_data)
    return [order[i : i + batch_size] for i in range(0, n_data, batch_size)]


def total_steps(config: TrainConfig, dataset_size: int) -> int:
    """Number of optimizer steps a run will take."""
    if config.epochs is not None:
        return config.epochs * math.ceil(dataset_size / min(config.train_batch_size, dataset_size))
    return config.steps


def train(
    ps: ParticleSet,
    dataset: Dataset,
    repulsion_source: Optional[RepulsionSource],
    config: TrainConfig,
) -> tuple[ParticleSet, TrainLog]:
    """
    Run the configured number of steps.

    Each step samples a training mini-batch (without replacement within an epoch) and,
    for function-space repulsion, a fresh repulsion batch. Mini-batch order, repulsion
    batches and spectral-normalization vectors use independent child streams of
    ``SeedSequence(config.seed)``, so the trajectory is deterministic given the seed and
    does not depend on whether repulsion batches are drawn.

    Args:
        ps: Initial particles.
        dataset: Labeled training data.
        repulsion_source: Unlabeled inputs for function-space repulsion.
        config: Training settings.

    Returns:
        (trained particles, training log)

    Raises:
        EmptyPool: If the dataset is empty.
        SpecError: If a repulsion source is missing for function-space repulsion.
        NumericError: If parameters become non-finite.
    """
    if dataset.size < 1:
        raise EmptyPool("training dataset is empty")
    needs_source = config.method is Method.FUNCTION_REPULSION
    if needs_source and repulsion_source is None:
        raise SpecError("function-space repulsion needs a repulsion source")

    batch_stream, repulsion_stream, spectral_stream = np.random.SeedSequence(config.seed).spawn(3)
    batch_rng = np.random.default_rng(batch_stream)
    repulsion_rng = np.random.default_rng(repulsion_stream)
    normalizer = None
    if config.spectral_norm:
        spectral_seed = int(spectral_stream.generate_state(1)[0])
        normalizer = SpectralNormalizer(coeff=config.spectral_coeff, seed=spectral_seed)
    velocity = _Velocity(config.momentum) if config.momentum > 0 else None

    n_data = dataset.size
    batch_size = min(config.train_batch_size, n_data)
    steps = total_steps(config, n_data)
    log = TrainLog()
    pending: list[npt.NDArray[np.int64]] = []

    logger.info(
        "training %d %s particles for %d steps (%s, gamma=%g)",
        ps.n,
        ps.mode.value,
        steps,
        config.method.value,
        config.gamma,
    )
    for local_step in range(1, steps + 1):
        if not pending:
            pending = _batches(n_data, batch_size, batch_rng)
        index = pending.pop(0)
        inputs, targets = dataset.inputs[index], dataset.targets[index]

        if needs_source:
            assert repulsion_source is not None
            rep = draw(repulsion_source, repulsion_rng, config.repulsion_batch_size)
            ps, info = povi_step_function(ps, inputs, targets, rep, config, n_data, velocity)
        else:
            ps, info = povi_step_param(ps, inputs, targets, config, n_data, velocity)

        if normalizer is not None:
            ps = _apply_spectral_norm(ps, normalizer)

        if local_step % config.log_every == 0 or local_step == steps:
            entry = _log_entry(ps, inputs, targets, config, info)
            log.append(entry)
            logger.debug(
                "step %d nll=%.5f fdist=%.4g pdist=%.4g nu=%.4g",
                entry.step,
                entry.train_nll,
                entry.function_distance,
                entry.parameter_distance,
                entry.bandwidth,
            )
    if log.entries:
        logger.info("finished at step %d, train nll %.5f", ps.step, log.entries[-1].train_nll)
    return ps, log


def _log_entry(
    ps: ParticleSet, inputs: Matrix, targets: npt.ArrayLike, config: TrainConfig, info: StepInfo
) -> LogEntry:
    if info.function_vectors is not None:
        function_distance = _mean_pairwise(info.function_vectors)
    else:
        vectors = _function_vectors(_outputs(ps, inputs), config.kernel.representation)
        function_distance = _mean_pairwise(vectors)
    return LogEntry(
        step=ps.step,
        train_nll=_mean_nll(ps, inputs, targets, config.likelihood),
        function_distance=function_distance,
        parameter_distance=_mean_pairwise(ps.particles),
        bandwidth=info.bandwidth,
    )


def pretrain_base(
    dataset: Dataset,
    spec: MlpSpec,
    config: TrainConfig,
    seed: int,
    head_layers: int = 1,
) -> tuple[MlpSpec, ParamVector, MlpSpec, ParamVector, TrainLog]:
    """
    Train a single network (MAP) and split it into a base and a head.

    The run is a plain ensemble with n = 1 (momentum as configured); the resulting base
    is meant to be frozen for a subsequent last-layer particle run.

    Returns:
        (base_spec, base_params, head_spec, map_head_params, log)
    """
    single = init_particles(ParticleMode.FULL_ENSEMBLE, spec, 1, seed)
    plain = replace(config, method=Method.PLAIN, kernel=KernelConfig(space=Space.PARAMETER))
    trained, log = train(single, dataset, None, plain)
    base_spec, base, head_spec, head = split_network(trained.particles[0], spec, head_layers)
    return base_spec, base, head_spec, head, log
