"""Shared plumbing for experiment commands: settings, data and particle construction."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from rich.console import Console
from rich.table import Table

from ..config import ExperimentConfig, load_config, resolve_threads
from ..engine import LikelihoodKind, Method, TrainConfig, TrainLog, pretrain_base, train
from ..errors import ConfigError
from ..models import Dataset, ParticleMode
from ..particles import ParticleSet, clone_from_map, init_particles
from ..reports import write_csv
from ..sources import RepulsionSource
from ..storage import load_dataset
from ..tasks import (
    gen_active_learning_pool,
    gen_ambiguous_mix,
    gen_far_box,
    gen_gaussian_blobs,
    gen_regression_toy,
    gen_two_moons,
)

logger = logging.getLogger(__name__)

console = Console()

GENERATORS = ("regression-toy", "two-moons", "blobs", "active-learning-pool")


def child_seeds(seed: int, count: int) -> list[int]:
    """
    Independent integer seeds derived from one root seed.

    Example:
        >>> child_seeds(0, 3) == child_seeds(0, 3)
        True
    """
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


@dataclass
class RunContext:
    """Resolved settings of one command invocation."""

    config: ExperimentConfig
    seed: int
    out_dir: Path
    threads: int
    percent: bool = False
    seeds: dict[str, int] = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return self.config.train.to_train_config(
            self.config.kernel, self.seeds["train"], self.threads
        )

    def output(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name


def prepare(
    config_path: Optional[Path],
    seed: Optional[int] = None,
    out: Optional[Path] = None,
    threads: Optional[int] = None,
    percent: bool = False,
) -> RunContext:
    """
    Load the config and apply command-line overrides.

    ``--seed`` replaces ``[experiment].seed`` and ``--out`` replaces
    ``[experiment].out_dir``. Every random stream of the run is a child of the seed.
    """
    config = load_config(config_path)
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {seed}")
        config.experiment.seed = seed
    root = config.experiment.seed
    out_dir = out if out is not None else config.resolve(config.experiment.out_dir)
    names = ("data", "test", "ood", "init", "train", "pretrain", "acquisition")
    ctx = RunContext(
        config=config,
        seed=root,
        out_dir=Path(out_dir),
        threads=resolve_threads(threads, config.experiment.threads),
        percent=percent or config.metrics.percent,
        seeds=dict(zip(names, child_seeds(root, len(names)), strict=True)),
    )
    logger.debug("seed %d, %d thread(s), output to %s", root, ctx.threads, ctx.out_dir)
    return ctx


@dataclass
class ExperimentData:
    """Training data plus optional test and OOD sets."""

    train: Dataset
    test: Optional[Dataset] = None
    ood: list[Dataset] = field(default_factory=list)

    @property
    def evaluation(self) -> Dataset:
        return self.test if self.test is not None else self.train


def _blobs(seed: int, n: int, ctx: RunContext) -> Dataset:
    data = ctx.config.data
    per_class = max(1, math.ceil(n / data.n_classes))
    return gen_gaussian_blobs(seed, per_class, data.n_classes)


def _far_box(ctx: RunContext, dim: int) -> Dataset:
    data = ctx.config.data
    if len(data.far_box) != 2:
        raise ConfigError("data.far_box must be [inner, outer]")
    return gen_far_box(ctx.seeds["ood"], data.n_ood, data.far_box[0], data.far_box[1], dim)


def load_data(ctx: RunContext) -> ExperimentData:
    """
    Generate or read the datasets named by the ``[data]`` section.

    Raises:
        ConfigError: For an unknown generator or a missing train path.
    """
    data = ctx.config.data
    generator = data.generator
    if generator == "regression-toy":
        return ExperimentData(train=gen_regression_toy(ctx.seeds["data"], data.n_train))
    if generator == "two-moons":
        return ExperimentData(
            train=gen_two_moons(ctx.seeds["data"], data.n_train, data.noise_std),
            test=gen_two_moons(ctx.seeds["test"], data.n_test, data.noise_std),
            ood=[_far_box(ctx, 2)],
        )
    if generator == "blobs":
        mix_train, mix_test = (np.random.default_rng(s) for s in child_seeds(ctx.seeds["data"], 2))
        train_set = gen_ambiguous_mix(
            _blobs(ctx.seeds["data"], data.n_train, ctx), data.ambiguous_fraction, mix_train
        )
        test_set = gen_ambiguous_mix(
            _blobs(ctx.seeds["test"], data.n_test, ctx), data.ambiguous_fraction, mix_test
        )
        return ExperimentData(train=train_set, test=test_set, ood=[_far_box(ctx, 2)])
    if generator == "active-learning-pool":
        acq = ctx.config.acquisition
        pool = gen_active_learning_pool(
            ctx.seeds["data"], acq.pool_clean, acq.ambiguous_ratio, data.n_classes
        )
        return ExperimentData(train=pool, test=_blobs(ctx.seeds["test"], acq.n_test, ctx))
    if generator:
        raise ConfigError(f"data.generator: {generator!r} is not one of {', '.join(GENERATORS)}")

    if data.train_path is None:
        raise ConfigError("set data.generator or data.train_path")
    kind = ctx.config.target_kind
    train_set = load_dataset(ctx.config.resolve(data.train_path), kind)
    test_set = None
    if data.test_path is not None:
        test_set = load_dataset(ctx.config.resolve(data.test_path), kind)
    ood = [load_dataset(ctx.config.resolve(p)) for p in data.ood_paths]
    return ExperimentData(train=train_set, test=test_set, ood=ood)


def output_width(ctx: RunContext, dataset: Dataset) -> int:
    """Network output width for a dataset, checked against the likelihood."""
    likelihood = ctx.config.train.likelihood
    if dataset.is_classification:
        if likelihood != LikelihoodKind.CATEGORICAL.value:
            raise ConfigError("classification data needs train.likelihood = 'categorical'")
        assert dataset.num_classes is not None
        return dataset.num_classes
    if likelihood != LikelihoodKind.GAUSSIAN.value:
        raise ConfigError("regression data needs train.likelihood = 'gaussian'")
    return 1


def repulsion_source(ctx: RunContext, train_set: Dataset) -> Optional[RepulsionSource]:
    """The configured repulsion source, or None when the method draws no batches."""
    if ctx.train_config().method is not Method.FUNCTION_REPULSION:
        return None
    pool = None
    if ctx.config.repulsion.pool_path is not None:
        pool = load_dataset(ctx.config.resolve(ctx.config.repulsion.pool_path))
    return ctx.config.repulsion.to_source(train_set, pool)


def build_particles(ctx: RunContext, train_set: Dataset) -> tuple[ParticleSet, Optional[TrainLog]]:
    """
    Initialize particles, pretraining a MAP network first when configured.

    With pretraining, multi-head particles sit on the pretrained base; ``init =
    "map-clone"`` copies the MAP head (or the whole MAP network in full-ensemble mode)
    into every particle.

    Raises:
        ConfigError: For map-clone without pretraining, or a random full ensemble
            combined with pretraining.
    """
    config = ctx.config
    recipe = config.particles.to_recipe()
    clone = config.particles.init == "map-clone"
    width = output_width(ctx, train_set)
    init_seed = ctx.seeds["init"]

    if not config.pretrain.enabled:
        if clone:
            raise ConfigError("particles.init = 'map-clone' needs [pretrain] enabled = true")
        return recipe.build(train_set.dim, width, init_seed), None

    spec = recipe.network_spec(train_set.dim, width)
    pre_config = config.pretrain.to_train_config(config.train, ctx.seeds["pretrain"], ctx.threads)
    if recipe.mode is ParticleMode.FULL_ENSEMBLE:
        if not clone:
            raise ConfigError("pretraining a full ensemble needs particles.init = 'map-clone'")
        single = init_particles(ParticleMode.FULL_ENSEMBLE, spec, 1, init_seed)
        trained, log = train(single, train_set, None, pre_config)
        ps = clone_from_map(trained.particles[0], recipe.n, base_spec=spec, seed=init_seed)
        return ps, log

    head_layers = len(recipe.head_hidden) + 1
    base_spec, base_params, head_spec, head_params, log = pretrain_base(
        train_set, spec, pre_config, init_seed, head_layers
    )
    if clone:
        ps = clone_from_map(
            head_params,
            recipe.n,
            base_spec=base_spec,
            head_spec=head_spec,
            base_params=base_params,
            frozen_base=recipe.frozen_base,
            seed=init_seed,
        )
    else:
        ps = init_particles(
            ParticleMode.MULTI_HEAD,
            base_spec,
            recipe.n,
            init_seed,
            head_spec=head_spec,
            base_params=base_params,
            frozen_base=recipe.frozen_base,
        )
    return ps, log


def fit(ctx: RunContext, train_set: Dataset) -> tuple[ParticleSet, TrainLog, Optional[TrainLog]]:
    """Build and train particles: (particles, train log, pretrain log or None)."""
    ps, pre_log = build_particles(ctx, train_set)
    with console.status(f"Training {ps.n} particles..."):
        ps, log = train(ps, train_set, repulsion_source(ctx, train_set), ctx.train_config())
    return ps, log, pre_log


def write_trainlog(path: Path, log: TrainLog) -> None:
    write_csv(path, TrainLog.HEADER, log.rows())


def show_metrics(title: str, rows: list[tuple[str, float, int]], percent: bool) -> None:
    """Print an EvalReport; NLL and ECE are scaled by 100 with ``percent``."""
    table = Table(title=title)
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right")
    table.add_column("N", justify="right", style="dim")
    for name, value, count in rows:
        if name == "accuracy":
            shown = f"{value:.2%}"
        elif percent and name in ("nll", "ece"):
            shown = f"{100 * value:.3f}"
        else:
            shown = f"{value:.5f}"
        table.add_row(name, shown, str(count))
    console.print(table)


def show_written(paths: list[Path]) -> None:
    for path in paths:
        console.print(f"[green]Wrote[/green] {path}")
