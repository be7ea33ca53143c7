"""
Experiment configuration for repulse.

Configs are TOML documents. Each table maps onto a section dataclass with defaults;
keys that no section knows are rejected with the dotted key name. Enum-valued keys use
kebab-case strings such as ``"multi-head"`` or ``"sq-l2"``. Paths are resolved relative
to the config file and must exist when the config is loaded.
"""

import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Optional, TypeVar

from .engine import Likelihood, LikelihoodKind, Method, TrainConfig
from .errors import ConfigError, RepulseError
from .models import (
    Activation,
    BandwidthRule,
    Dataset,
    Distance,
    KernelConfig,
    ParticleMode,
    Representation,
    ScoreKind,
    Space,
    TargetKind,
)
from .particles import ParticleRecipe
from .sources import RepulsionSource, SourceKind
from .tasks import AcquisitionConfig

THREADS_ENV = "REPULSE_THREADS"

E = TypeVar("E", bound=Enum)
S = TypeVar("S")


def parse_enum(enum_cls: type[E], value: Any, key: str) -> E:
    """
    Look up an enum member by its kebab-case value.

    Example:
        >>> parse_enum(Distance, "sq-l2", "kernel.distance")
        <Distance.SQ_L2: 'sq-l2'>
    """
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(repr(m.value) for m in enum_cls)
        raise ConfigError(f"{key}: {value!r} is not one of {choices}") from None


@dataclass
class ExperimentSection:
    """Run identity and output location."""

    name: str = "experiment"
    seed: int = 0
    out_dir: str = "out"
    threads: int = 1


@dataclass
class DataSection:
    """
    Where data comes from: a generator or dataset files.

    ``generator`` is one of "regression-toy", "two-moons", "blobs" or
    "active-learning-pool"; leave it empty to read ``train_path`` / ``test_path``.
    """

    generator: str = ""
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    ood_paths: list[str] = field(default_factory=list)
    target_kind: Optional[str] = None
    n_train: int = 200
    n_test: int = 500
    n_ood: int = 500
    noise_std: float = 0.1
    n_classes: int = 8
    ambiguous_fraction: float = 0.0
    far_box: list[float] = field(default_factory=lambda: [3.0, 6.0])


@dataclass
class ParticleSection:
    """Particle set construction."""

    mode: str = "multi-head"
    n: int = 10
    hidden: list[int] = field(default_factory=lambda: [128, 128, 128])
    head_hidden: list[int] = field(default_factory=list)
    activation: str = "relu"
    frozen_base: bool = True
    init: str = "random"  # or "map-clone"

    def to_recipe(self) -> ParticleRecipe:
        return ParticleRecipe(
            mode=parse_enum(ParticleMode, self.mode, "particles.mode"),
            hidden=tuple(self.hidden),
            head_hidden=tuple(self.head_hidden),
            n=self.n,
            activation=parse_enum(Activation, self.activation, "particles.activation"),
            frozen_base=self.frozen_base,
        )


@dataclass
class KernelSection:
    """Repulsion kernel; the evaluation space follows ``train.method``."""

    distance: str = "sq-l2"
    bandwidth: str = "median"
    nu: float = 1.0
    representation: str = "logits"

    def to_kernel_config(self, space: Space) -> KernelConfig:
        return KernelConfig(
            space=space,
            distance=parse_enum(Distance, self.distance, "kernel.distance"),
            bandwidth=parse_enum(BandwidthRule, self.bandwidth, "kernel.bandwidth"),
            nu=self.nu,
            representation=parse_enum(Representation, self.representation, "kernel.representation"),
        )


@dataclass
class TrainSection:
    """Optimizer settings of the particle run."""

    method: str = "function"
    steps: int = 1000
    epochs: Optional[int] = None
    step_size: float = 1e-3
    train_batch_size: int = 128
    repulsion_batch_size: int = 128
    repulsion_weight: float = 1.0
    prior_variance: float = 100.0
    likelihood: str = "categorical"
    noise_std: float = 0.1
    decay: list[list[float]] = field(default_factory=list)
    spectral_norm: bool = False
    spectral_coeff: float = 3.0
    momentum: float = 0.0
    log_every: int = 10

    def to_train_config(self, kernel: KernelSection, seed: int, threads: int = 1) -> TrainConfig:
        method = parse_enum(Method, self.method, "train.method")
        space = Space.PARAMETER if method is not Method.FUNCTION_REPULSION else Space.FUNCTION
        if any(len(pair) != 2 for pair in self.decay):
            raise ConfigError("train.decay: entries must be [step, multiplier] pairs")
        return TrainConfig(
            step_size=self.step_size,
            steps=self.steps,
            epochs=self.epochs,
            train_batch_size=self.train_batch_size,
            repulsion_batch_size=self.repulsion_batch_size,
            repulsion_weight=self.repulsion_weight,
            prior_variance=self.prior_variance,
            method=method,
            kernel=kernel.to_kernel_config(space),
            likelihood=Likelihood(
                parse_enum(LikelihoodKind, self.likelihood, "train.likelihood"), self.noise_std
            ),
            seed=seed,
            decay=tuple((int(step), float(mult)) for step, mult in self.decay),
            spectral_norm=self.spectral_norm,
            spectral_coeff=self.spectral_coeff,
            momentum=self.momentum,
            log_every=self.log_every,
            threads=threads,
        )


@dataclass
class PretrainSection:
    """Optional MAP pretraining of the base network (two-stage pipeline)."""

    enabled: bool = False
    steps: int = 2000
    step_size: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 128

    def to_train_config(self, train: TrainSection, seed: int, threads: int = 1) -> TrainConfig:
        return TrainConfig(
            step_size=self.step_size,
            steps=self.steps,
            train_batch_size=self.batch_size,
            method=Method.PLAIN,
            kernel=KernelConfig(space=Space.PARAMETER),
            likelihood=Likelihood(
                parse_enum(LikelihoodKind, train.likelihood, "train.likelihood"), train.noise_std
            ),
            prior_variance=train.prior_variance,
            seed=seed,
            momentum=self.momentum,
            log_every=train.log_every,
            threads=threads,
        )


@dataclass
class RepulsionSection:
    """Source of the function-space repulsion batches."""

    source: str = "train-inputs"
    bounds: list[list[float]] = field(default_factory=lambda: [[-6.0, 6.0]])
    low: float = 0.0
    high: float = 1.0
    patch_side: int = 4
    image_shape: list[int] = field(default_factory=list)
    pool_path: Optional[str] = None

    @property
    def kind(self) -> SourceKind:
        return parse_enum(SourceKind, self.source, "repulsion.source")

    def to_source(self, train: Dataset, pool: Optional[Dataset] = None) -> RepulsionSource:
        """Build the configured source; ``pool`` backs the ood-pool kind."""
        kind = self.kind
        if kind is SourceKind.TRAIN_INPUTS:
            return RepulsionSource.train_inputs(train.inputs)
        if kind is SourceKind.OOD_POOL:
            if pool is None:
                raise ConfigError("repulsion.source = 'ood-pool' needs repulsion.pool_path")
            return RepulsionSource.ood_pool(pool.inputs)
        if kind is SourceKind.PATCH_SHUFFLE:
            if len(self.image_shape) != 3:
                raise ConfigError("repulsion.image_shape must be [height, width, channels]")
            height, width, channels = self.image_shape
            return RepulsionSource.patch_shuffle(
                train.inputs, self.patch_side, (height, width, channels)
            )
        if kind is SourceKind.UNIFORM_NOISE:
            return RepulsionSource.uniform_noise(self.low, self.high, train.dim)
        if len(self.bounds) == 1 and train.dim > 1:
            return RepulsionSource.uniform_domain(self.bounds * train.dim)
        return RepulsionSource.uniform_domain(self.bounds)


@dataclass
class MetricsSection:
    """Evaluation and display options."""

    ece_bins: int = 15
    percent: bool = False
    grid_low: float = -6.0
    grid_high: float = 6.0
    grid_points: int = 200


@dataclass
class AcquisitionSection:
    """Active-learning loop."""

    initial_labeled: int = 20
    acquire_per_round: int = 5
    rounds: int = 55
    scores: list[str] = field(default_factory=lambda: ["epistemic", "total", "random"])
    pool_clean: int = 100
    ambiguous_ratio: float = 60.0
    n_test: int = 1000

    def score_kinds(self) -> list[ScoreKind]:
        return [parse_enum(ScoreKind, s, "acquisition.scores") for s in self.scores]

    def to_acquisition_config(
        self,
        score: ScoreKind,
        retrain: TrainConfig,
        recipe: ParticleRecipe,
        seed: int,
        threads: int,
    ) -> AcquisitionConfig:
        return AcquisitionConfig(
            initial_labeled=self.initial_labeled,
            acquire_per_round=self.acquire_per_round,
            rounds=self.rounds,
            score=score,
            retrain=retrain,
            recipe=recipe,
            ambiguous_ratio=self.ambiguous_ratio,
            seed=seed,
            threads=threads,
        )


@dataclass
class ExperimentConfig:
    """Main configuration container."""

    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    particles: ParticleSection = field(default_factory=ParticleSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    repulsion: RepulsionSection = field(default_factory=RepulsionSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    acquisition: AcquisitionSection = field(default_factory=AcquisitionSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, path: str) -> Path:
        """A config path relative to the config file's directory."""
        candidate = Path(path).expanduser()
        return candidate if candidate.is_absolute() else self.base_dir / candidate

    def train_config(self, threads: int = 1) -> TrainConfig:
        return self.train.to_train_config(self.kernel, self.experiment.seed, threads)

    @property
    def target_kind(self) -> Optional[TargetKind]:
        if self.data.target_kind is None:
            return None
        return parse_enum(TargetKind, self.data.target_kind, "data.target_kind")


_SECTIONS = tuple(f.name for f in fields(ExperimentConfig) if f.name != "base_dir")


def _section(cls: type[S], data: Any, prefix: str) -> S:
    """Build one section dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"[{prefix}] must be a table")
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{prefix}.{key}'")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"[{prefix}]: {e}") from None


def _check_types(section: Any, prefix: str) -> None:
    defaults = type(section)()
    for f in fields(section):
        value, default = getattr(section, f.name), getattr(defaults, f.name)
        if default is None or value is None:
            continue
        expected: tuple[type, ...] = (type(default),)
        if isinstance(default, float):
            expected = (float, int)
        if isinstance(value, bool) and not isinstance(default, bool):
            raise ConfigError(f"{prefix}.{f.name}: expected {type(default).__name__}, got bool")
        if not isinstance(value, expected):
            raise ConfigError(
                f"{prefix}.{f.name}: expected {type(default).__name__}, got {type(value).__name__}"
            )


def _paths(config: ExperimentConfig) -> list[tuple[str, str]]:
    found = [("data.train_path", config.data.train_path), ("data.test_path", config.data.test_path)]
    found += [(f"data.ood_paths[{i}]", p) for i, p in enumerate(config.data.ood_paths)]
    found.append(("repulsion.pool_path", config.repulsion.pool_path))
    return [(key, p) for key, p in found if p is not None]


def validate(config: ExperimentConfig) -> None:
    """
    Check that every referenced path exists and every section builds.

    Raises:
        ConfigError: Naming the offending key.
    """
    if config.experiment.seed < 0:
        raise ConfigError(f"experiment.seed: must be >= 0, got {config.experiment.seed}")
    for key, path in _paths(config):
        if not config.resolve(path).exists():
            raise ConfigError(f"{key}: file not found: {path}")
    try:
        config.train_config()
        config.particles.to_recipe()
        _ = config.repulsion.kind, config.target_kind
        config.acquisition.score_kinds()
        if config.pretrain.enabled:
            config.pretrain.to_train_config(config.train, config.experiment.seed)
    except ConfigError:
        raise
    except RepulseError as e:
        raise ConfigError(str(e)) from None
    init = config.particles.init
    if init not in ("random", "map-clone"):
        raise ConfigError(f"particles.init: {init!r} is not 'random' or 'map-clone'")


def parse_config(data: dict[str, Any], base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from a parsed TOML document."""
    for key in data:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section '[{key}]'")
    sections = {}
    for name in _SECTIONS:
        cls = type(getattr(ExperimentConfig(), name))
        section = _section(cls, data.get(name, {}), name)
        _check_types(section, name)
        sections[name] = section
    config = ExperimentConfig(**sections, base_dir=base_dir or Path.cwd())
    validate(config)
    return config


def load_config(path: Optional[Path] = None) -> ExperimentConfig:
    """
    Load an experiment config.

    Returns defaults when ``path`` is None.

    Returns:
        ExperimentConfig with all settings.

    Raises:
        ConfigError: If the file is missing, is not valid TOML, holds unknown keys or
            values of the wrong type, or references missing files.

    Example:
        >>> config = load_config()
        >>> config.particles.mode
        'multi-head'
    """
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_config(data, base_dir=path.resolve().parent)


def resolve_threads(cli_threads: Optional[int], config_threads: int = 1) -> int:
    """
    Worker thread count: REPULSE_THREADS, then --threads, then the config value.

    Raises:
        ConfigError: If the environment variable or the resulting value is not >= 1.
    """
    env = os.environ.get(THREADS_ENV)
    if env is not None and env.strip():
        try:
            threads = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    elif cli_threads is not None:
        threads = cli_threads
    else:
        threads = config_threads
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    return threads
