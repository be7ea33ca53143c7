"""Training commands: the two toy experiments and generic training."""

from pathlib import Path
from typing import Optional

import numpy as np
import typer
from rich.table import Table

from ..errors import ConfigError
from ..particles import predict_all
from ..plots import plot_regression_bands, plot_uncertainty_histogram, save_svg
from ..reports import write_csv
from ..storage import save_checkpoint
from ..tasks import ood_eval
from .common import (
    console,
    fit,
    load_data,
    prepare,
    show_metrics,
    show_written,
    write_trainlog,
)

CONFIG_OPTION = typer.Option(..., "--config", "-c", help="Experiment config (TOML)")
SEED_OPTION = typer.Option(None, "--seed", help="Root seed (overrides [experiment].seed)")
OUT_OPTION = typer.Option(None, "--out", "-o", help="Output directory")
THREADS_OPTION = typer.Option(None, "--threads", help="Worker threads (REPULSE_THREADS wins)")
PERCENT_OPTION = typer.Option(False, "--percent", help="Show NLL and ECE multiplied by 100")

# Training-region and far-region masks of the regression grid
NEAR_RADIUS = 2.0
FAR_RADIUS = 3.0


def toy_regression_cmd(
    config: Path = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
):
    """
    Fit particles to the 1-D regression toy and plot their spread.

    Writes bands.svg, particles.csv, trainlog.csv and checkpoint.rpve.
    """
    ctx = prepare(config, seed, out, threads)
    data = load_data(ctx)
    if data.train.is_classification or data.train.dim != 1:
        raise ConfigError("toy-regression needs one-dimensional regression data")

    ps, log, _ = fit(ctx, data.train)
    metrics = ctx.config.metrics
    grid = np.linspace(metrics.grid_low, metrics.grid_high, metrics.grid_points)
    preds = predict_all(ps, grid[:, None], ctx.threads)[:, :, 0]
    mean, std = preds.mean(axis=0), preds.std(axis=0)

    svg = plot_regression_bands(
        grid, preds, data.train.inputs[:, 0], data.train.targets, title=ctx.config.experiment.name
    )
    paths = [ctx.output("bands.svg"), ctx.output("particles.csv")]
    save_svg(paths[0], svg)
    header = ["x", *(f"particle_{i}" for i in range(ps.n)), "mean", "std"]
    rows = [(x, *preds[:, g], mean[g], std[g]) for g, x in enumerate(grid)]
    write_csv(paths[1], header, rows)
    paths.append(ctx.output("trainlog.csv"))
    write_trainlog(paths[-1], log)
    paths.append(ctx.output("checkpoint.rpve"))
    save_checkpoint(ps, paths[-1])

    near = np.abs(grid) <= NEAR_RADIUS
    far = np.abs(grid) >= FAR_RADIUS
    table = Table(title="Particle spread")
    table.add_column("Region", style="cyan")
    table.add_column("Mean std", justify="right")
    if near.any():
        table.add_row(f"|x| <= {NEAR_RADIUS:g}", f"{std[near].mean():.5f}")
    if far.any():
        table.add_row(f"|x| >= {FAR_RADIUS:g}", f"{std[far].mean():.5f}")
    console.print(table)
    show_written(paths)


def toy_classification_cmd(
    config: Path = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    percent: bool = PERCENT_OPTION,
):
    """
    Train classification particles and evaluate calibration and OOD detection.

    Writes metrics.csv, ood.csv, scores.csv, trainlog.csv, uncertainty.svg and
    checkpoint.rpve.
    """
    ctx = prepare(config, seed, out, threads, percent)
    data = load_data(ctx)
    if not data.train.is_classification:
        raise ConfigError("toy-classification needs class labels")

    ps, log, _ = fit(ctx, data.train)
    evaluation = data.evaluation
    report = ood_eval(ps, evaluation, data.ood, ctx.config.metrics.ece_bins, ctx.threads)

    paths = [ctx.output(name) for name in ("metrics.csv", "ood.csv", "scores.csv")]
    write_csv(paths[0], ("metric", "value", "count"), report.id_report.as_rows())
    write_csv(paths[1], ("ood_set", "score", "auroc"), report.rows())
    write_csv(paths[2], ("set", "index", "total", "aleatoric", "epistemic"), report.score_rows())
    paths.append(ctx.output("trainlog.csv"))
    write_trainlog(paths[-1], log)
    groups = {name: (a.aleatoric, a.epistemic) for name, a in report.scores.items()}
    paths.append(ctx.output("uncertainty.svg"))
    save_svg(paths[-1], plot_uncertainty_histogram(groups, title=ctx.config.experiment.name))
    paths.append(ctx.output("checkpoint.rpve"))
    save_checkpoint(ps, paths[-1])

    show_metrics(f"In-distribution ({evaluation.name})", report.id_report.as_rows(), ctx.percent)
    if report.auroc:
        table = Table(title="OOD detection AUROC")
        table.add_column("OOD set", style="cyan")
        table.add_column("Score")
        table.add_column("AUROC", justify="right")
        for name, score, value in report.rows():
            table.add_row(name, score, f"{value:.4f}")
        console.print(table)
    show_written(paths)


def train_cmd(
    config: Path = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
):
    """
    Train a particle set from a config and save a checkpoint.

    With [pretrain] enabled a single MAP network is trained first; its base becomes
    the shared (by default frozen) base of the particle heads. Writes checkpoint.rpve,
    trainlog.csv and, when pretraining, pretrain_trainlog.csv.
    """
    ctx = prepare(config, seed, out, threads)
    data = load_data(ctx)
    ps, log, pre_log = fit(ctx, data.train)

    paths = [ctx.output("checkpoint.rpve"), ctx.output("trainlog.csv")]
    save_checkpoint(ps, paths[0])
    write_trainlog(paths[1], log)
    if pre_log is not None:
        paths.append(ctx.output("pretrain_trainlog.csv"))
        write_trainlog(paths[-1], pre_log)

    final = log.entries[-1] if log.entries else None
    console.print(
        f"[bold]{ps.n}[/bold] {ps.mode.value} particles, step {ps.step}, "
        f"{ps.trainable_parameter_count} trainable parameters"
    )
    if final is not None:
        console.print(f"[dim]final train NLL {final.train_nll:.5f}[/dim]")
    show_written(paths)
