"""
Particle sets: full ensembles or one shared base network with n heads.

In multi-head mode the base network maps inputs to features
``activation(base(x))`` of width d and each particle is a small head network on top.
With linear heads the trainable parameter count is (d*K + K)*n when the base is frozen.
"""

import logging
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, TypeVar

import numpy as np

from .errors import DimensionMismatch, SpecError
from .models import Activation, Matrix, MlpSpec, ParamVector, ParticleMode
from .nn import features, forward, init_params

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class ParticleSet:
    """
    n particles and, in multi-head mode, the shared base network.

    ``particles`` is an n x P matrix: full network parameters (full ensemble) or head
    parameters (multi-head), one row per particle in canonical flat order.
    """

    mode: ParticleMode
    base_spec: MlpSpec
    particles: Matrix
    head_spec: Optional[MlpSpec] = None
    base_params: Optional[ParamVector] = None
    frozen_base: bool = True
    seed: int = 0
    step: int = 0

    def __post_init__(self) -> None:
        self.particles = np.asarray(self.particles, dtype=np.float64)
        if self.particles.ndim != 2 or self.particles.shape[0] < 1:
            raise SpecError(
                f"particles must be an n x P matrix with n >= 1, got {self.particles.shape}"
            )
        if self.mode is ParticleMode.MULTI_HEAD:
            if self.head_spec is None or self.base_params is None:
                raise SpecError("multi-head particle sets need a head spec and base parameters")
            if self.head_spec.input_dim != self.base_spec.output_dim:
                raise SpecError(
                    f"head input width {self.head_spec.input_dim} does not match base "
                    f"feature width {self.base_spec.output_dim}"
                )
            if self.head_spec.activation is not self.base_spec.activation:
                raise SpecError("base and head networks must share one activation")
            self.base_params = np.asarray(self.base_params, dtype=np.float64)
            if self.base_params.shape != (self.base_spec.parameter_count,):
                raise DimensionMismatch(
                    f"base has {self.base_params.shape} parameters, expected "
                    f"{self.base_spec.parameter_count}"
                )
        elif self.head_spec is not None or self.base_params is not None:
            raise SpecError("full-ensemble particle sets take no head spec or base parameters")
        if self.particles.shape[1] != self.particle_spec.parameter_count:
            raise DimensionMismatch(
                f"particles have {self.particles.shape[1]} parameters, expected "
                f"{self.particle_spec.parameter_count}"
            )

    @property
    def n(self) -> int:
        return int(self.particles.shape[0])

    @property
    def particle_spec(self) -> MlpSpec:
        """Spec of the per-particle network (head or full network)."""
        if self.mode is ParticleMode.MULTI_HEAD:
            assert self.head_spec is not None
            return self.head_spec
        return self.base_spec

    @property
    def composed_spec(self) -> MlpSpec:
        """Spec of one particle's complete input-to-output network."""
        if self.mode is ParticleMode.MULTI_HEAD:
            assert self.head_spec is not None
            return MlpSpec(
                self.base_spec.layer_widths + self.head_spec.layer_widths[1:],
                self.base_spec.activation,
            )
        return self.base_spec

    @property
    def output_dim(self) -> int:
        return self.particle_spec.output_dim

    @property
    def trains_base(self) -> bool:
        return self.mode is ParticleMode.MULTI_HEAD and not self.frozen_base

    @property
    def trainable_parameter_count(self) -> int:
        """
        Number of trained scalars.

        Example:
            >>> base = MlpSpec((784, 512))
            >>> head = MlpSpec((512, 10))
            >>> ps = init_particles(ParticleMode.MULTI_HEAD, base, 10, 0, head_spec=head)
            >>> ps.trainable_parameter_count
            51300
        """
        count = self.particles.size
        if self.trains_base:
            count += self.base_spec.parameter_count
        return int(count)

    def with_particles(
        self,
        particles: Matrix,
        base_params: Optional[ParamVector] = None,
        step: Optional[int] = None,
    ) -> "ParticleSet":
        """Copy with new particle rows (and optionally a new base or step counter)."""
        return replace(
            self,
            particles=particles,
            base_params=self.base_params if base_params is None else base_params,
            step=self.step if step is None else step,
        )


def map_particles(fn: Callable[[int], T], n: int, threads: int = 1) -> list[T]:
    """
    Evaluate ``fn(i)`` for every particle index, optionally on a thread pool.

    Results are returned in index order regardless of ``threads``.
    """
    if threads <= 1 or n == 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def init_particles(
    mode: ParticleMode,
    base_spec: MlpSpec,
    n: int,
    seed: int,
    head_spec: Optional[MlpSpec] = None,
    base_params: Optional[ParamVector] = None,
    frozen_base: bool = True,
) -> ParticleSet:
    """
    Randomly initialize a particle set.

    Weights are uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero. The base
    and each particle get their own child stream of ``SeedSequence(seed)``, so heads
    receive distinct sub-seeds and the result is deterministic given ``seed``.

    Args:
        mode: Full ensemble or multi-head.
        base_spec: Full network spec, or the base network spec in multi-head mode.
        n: Particle count (>= 1).
        seed: Root seed.
        head_spec: Head spec (multi-head only).
        base_params: Pretrained base parameters; drawn at random when omitted.
        frozen_base: Keep the base fixed during training (multi-head only).

    Returns:
        A new ParticleSet.

    Raises:
        SpecError: If n < 1 or the specs are inconsistent.
    """
    if n < 1:
        raise SpecError(f"particle count must be >= 1, got {n}")
    children = np.random.SeedSequence(seed).spawn(n + 1)
    if mode is ParticleMode.MULTI_HEAD:
        if head_spec is None:
            raise SpecError("multi-head mode requires a head spec")
        if base_params is None:
            base_params = init_params(base_spec, np.random.default_rng(children[0]))
        particle_spec = head_spec
    else:
        particle_spec = base_spec
    particles = np.stack(
        [init_params(particle_spec, np.random.default_rng(child)) for child in children[1:]]
    )
    ps = ParticleSet(
        mode=mode,
        base_spec=base_spec,
        particles=particles,
        head_spec=head_spec if mode is ParticleMode.MULTI_HEAD else None,
        base_params=base_params if mode is ParticleMode.MULTI_HEAD else None,
        frozen_base=frozen_base,
        seed=seed,
    )
    logger.debug(
        "initialized %d %s particles (%d trainable parameters)",
        n,
        mode.value,
        ps.trainable_parameter_count,
    )
    return ps


def clone_from_map(
    map_params: ParamVector,
    n: int,
    *,
    base_spec: MlpSpec,
    head_spec: Optional[MlpSpec] = None,
    base_params: Optional[ParamVector] = None,
    frozen_base: bool = True,
    seed: int = 0,
) -> ParticleSet:
    """
    Initialize all n particles as identical copies of one trained network.

    Used for fine-tuning: the repulsion term is then solely responsible for separating
    the particles. Multi-head mode is selected when ``head_spec`` is given.

    Raises:
        DimensionMismatch: If ``map_params`` does not fit the particle spec.
    """
    if n < 1:
        raise SpecError(f"particle count must be >= 1, got {n}")
    mode = ParticleMode.FULL_ENSEMBLE if head_spec is None else ParticleMode.MULTI_HEAD
    spec = base_spec if head_spec is None else head_spec
    map_params = np.asarray(map_params, dtype=np.float64)
    if map_params.shape != (spec.parameter_count,):
        raise DimensionMismatch(
            f"MAP parameters have shape {map_params.shape}, expected ({spec.parameter_count},)"
        )
    return ParticleSet(
        mode=mode,
        base_spec=base_spec,
        particles=np.tile(map_params, (n, 1)),
        head_spec=head_spec,
        base_params=base_params,
        frozen_base=frozen_base,
        seed=seed,
    )


def base_features(ps: ParticleSet, inputs: Matrix) -> Matrix:
    """Shared feature matrix (multi-head) or the inputs themselves (full ensemble)."""
    if ps.mode is ParticleMode.MULTI_HEAD:
        assert ps.base_params is not None
        return features(ps.base_params, ps.base_spec, inputs)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != ps.base_spec.input_dim:
        raise DimensionMismatch(
            f"input shape {x.shape} does not match input width {ps.base_spec.input_dim}", layer=0
        )
    return x


def predict_all(ps: ParticleSet, inputs: Matrix, threads: int = 1) -> Matrix:
    """
    Outputs of every particle on a batch.

    In multi-head mode the base features are computed once and shared by all heads.

    Args:
        ps: Particle set.
        inputs: B x d_in matrix.
        threads: Worker threads for the per-particle loop.

    Returns:
        n x B x K array, particle order preserved.
    """
    shared = base_features(ps, inputs)
    spec = ps.particle_spec
    outputs = map_particles(lambda i: forward(ps.particles[i], spec, shared), ps.n, threads)
    return np.stack(outputs)


def member_params(ps: ParticleSet, index: int) -> ParamVector:
    """Flat parameters of particle ``index``'s complete network (base then head)."""
    if ps.mode is ParticleMode.MULTI_HEAD:
        assert ps.base_params is not None
        return np.concatenate([ps.base_params, ps.particles[index]])
    return ps.particles[index].copy()


def to_full_ensemble(ps: ParticleSet) -> ParticleSet:
    """Equivalent full ensemble with the base copied into every member."""
    if ps.mode is ParticleMode.FULL_ENSEMBLE:
        return replace(ps, particles=ps.particles.copy())
    return ParticleSet(
        mode=ParticleMode.FULL_ENSEMBLE,
        base_spec=ps.composed_spec,
        particles=np.stack([member_params(ps, i) for i in range(ps.n)]),
        seed=ps.seed,
        step=ps.step,
    )


def trainable_vectors(ps: ParticleSet) -> Matrix:
    """The n x P matrix the parameter-space kernel acts on (heads only in multi-head mode)."""
    return ps.particles


@dataclass(frozen=True)
class ParticleRecipe:
    """
    How to build a particle set for a given input and output width.

    In multi-head mode ``hidden`` describes the base network (its last width is the
    feature width d) and ``head_hidden`` the hidden widths of each head; linear heads
    have ``head_hidden = ()``. In full-ensemble mode every particle is a network with
    ``hidden`` hidden widths.
    """

    mode: ParticleMode = ParticleMode.MULTI_HEAD
    hidden: tuple[int, ...] = (128, 128, 128)
    head_hidden: tuple[int, ...] = ()
    n: int = 10
    activation: Activation = Activation.RELU
    frozen_base: bool = True

    def network_spec(self, input_dim: int, output_dim: int) -> MlpSpec:
        """Spec of one complete particle network."""
        return MlpSpec((input_dim, *self.hidden, *self.head_hidden, output_dim), self.activation)

    def specs(self, input_dim: int, output_dim: int) -> tuple[MlpSpec, Optional[MlpSpec]]:
        """(base or full spec, head spec or None)."""
        if self.mode is ParticleMode.FULL_ENSEMBLE:
            return self.network_spec(input_dim, output_dim), None
        if not self.hidden:
            raise SpecError("multi-head particles need at least one hidden base layer")
        base = MlpSpec((input_dim, *self.hidden), self.activation)
        head = MlpSpec((self.hidden[-1], *self.head_hidden, output_dim), self.activation)
        return base, head

    def build(
        self, input_dim: int, output_dim: int, seed: int, base_params: Optional[ParamVector] = None
    ) -> ParticleSet:
        """Randomly initialized particle set."""
        base_spec, head_spec = self.specs(input_dim, output_dim)
        return init_particles(
            self.mode,
            base_spec,
            self.n,
            seed,
            head_spec=head_spec,
            base_params=base_params,
            frozen_base=self.frozen_base,
        )
