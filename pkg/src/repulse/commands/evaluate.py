"""Commands that evaluate a saved checkpoint."""

from pathlib import Path
from typing import Optional

import numpy as np
import typer
from rich.table import Table

from ..errors import ConfigError
from ..models import Dataset
from ..particles import ParticleSet
from ..plots import plot_uncertainty_histogram, save_svg
from ..reports import write_csv
from ..storage import load_checkpoint
from ..tasks import ood_eval
from ..uncertainty import UncertaintyArrays, decompose_inputs
from .common import console, load_data, prepare, show_metrics, show_written
from .experiments import CONFIG_OPTION, OUT_OPTION, PERCENT_OPTION, SEED_OPTION, THREADS_OPTION

CHECKPOINT_OPTION = typer.Option(..., "--checkpoint", "-k", help="Checkpoint file (.rpve)")


def _check_outputs(ps: ParticleSet, dataset: Dataset) -> None:
    if dataset.num_classes is not None and dataset.num_classes > ps.output_dim:
        raise ConfigError(
            f"checkpoint predicts {ps.output_dim} classes, {dataset.name} has {dataset.num_classes}"
        )


def _groups(
    ps: ParticleSet, evaluation: Dataset, ood: list[Dataset], threads: int
) -> dict[str, UncertaintyArrays]:
    """Uncertainty arrays for clean and ambiguous test inputs and every OOD set."""
    arrays = decompose_inputs(ps, evaluation.inputs, threads)
    groups: dict[str, UncertaintyArrays] = {}
    if evaluation.ambiguous is not None and evaluation.ambiguous.any():
        for name, mask in (("clean", ~evaluation.ambiguous), ("ambiguous", evaluation.ambiguous)):
            if mask.any():
                groups[name] = UncertaintyArrays(
                    arrays.total[mask], arrays.aleatoric[mask], arrays.epistemic[mask]
                )
    else:
        groups[evaluation.name] = arrays
    for ds in ood:
        groups[ds.name] = decompose_inputs(ps, ds.inputs, threads)
    return groups


def decompose_cmd(
    checkpoint: Path = CHECKPOINT_OPTION,
    config: Path = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
):
    """
    Split predictive uncertainty into aleatoric and epistemic parts.

    Test inputs are grouped into clean and ambiguous samples when the data carries
    ambiguity flags; OOD sets form their own groups. Writes uncertainty.csv and
    uncertainty.svg.
    """
    ctx = prepare(config, seed, out, threads)
    ps = load_checkpoint(checkpoint)
    data = load_data(ctx)
    evaluation = data.evaluation
    _check_outputs(ps, evaluation)
    groups = _groups(ps, evaluation, data.ood, ctx.threads)

    rows = [
        (name, i, t.total, t.aleatoric, t.epistemic)
        for name, arrays in groups.items()
        for i, t in enumerate(arrays.triples())
    ]
    paths = [ctx.output("uncertainty.csv"), ctx.output("uncertainty.svg")]
    write_csv(paths[0], ("group", "index", "total", "aleatoric", "epistemic"), rows)
    hist = {name: (a.aleatoric, a.epistemic) for name, a in groups.items()}
    save_svg(paths[1], plot_uncertainty_histogram(hist, title=ctx.config.experiment.name))

    table = Table(title="Mean uncertainty (nats)")
    table.add_column("Group", style="cyan")
    table.add_column("N", justify="right", style="dim")
    for column in ("Total", "Aleatoric", "Epistemic"):
        table.add_column(column, justify="right")
    for name, a in groups.items():
        table.add_row(
            name,
            str(a.total.shape[0]),
            f"{np.mean(a.total):.5f}",
            f"{np.mean(a.aleatoric):.5f}",
            f"{np.mean(a.epistemic):.5f}",
        )
    console.print(table)
    show_written(paths)


def ood_eval_cmd(
    checkpoint: Path = CHECKPOINT_OPTION,
    config: Path = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    percent: bool = PERCENT_OPTION,
):
    """
    Evaluate ID metrics and OOD-detection AUROC of a checkpoint.

    Writes metrics.csv, ood.csv (one AUROC per OOD set and score kind) and scores.csv.
    """
    ctx = prepare(config, seed, out, threads, percent)
    ps = load_checkpoint(checkpoint)
    data = load_data(ctx)
    if not data.ood:
        raise ConfigError("no OOD sets configured (data.ood_paths or a generator)")
    _check_outputs(ps, data.evaluation)
    report = ood_eval(ps, data.evaluation, data.ood, ctx.config.metrics.ece_bins, ctx.threads)

    paths = [ctx.output(name) for name in ("metrics.csv", "ood.csv", "scores.csv")]
    write_csv(paths[0], ("metric", "value", "count"), report.id_report.as_rows())
    write_csv(paths[1], ("ood_set", "score", "auroc"), report.rows())
    write_csv(paths[2], ("set", "index", "total", "aleatoric", "epistemic"), report.score_rows())

    show_metrics("In-distribution", report.id_report.as_rows(), ctx.percent)
    table = Table(title="OOD detection AUROC")
    table.add_column("OOD set", style="cyan")
    for kind in ("epistemic", "total", "aleatoric"):
        table.add_column(kind, justify="right")
    by_set: dict[str, dict[str, float]] = {}
    for name, score, value in report.rows():
        by_set.setdefault(name, {})[score] = value
    for name, values in by_set.items():
        table.add_row(name, *(f"{values[k]:.4f}" for k in ("epistemic", "total", "aleatoric")))
    console.print(table)
    show_written(paths)


def info_cmd(checkpoint: Path = CHECKPOINT_OPTION):
    """Show the mode, particle count, network specs and step counter of a checkpoint."""
    ps = load_checkpoint(checkpoint)
    table = Table(title=str(checkpoint), show_header=False)
    table.add_column("Field", style="cyan")
    table.add_column("Value")
    table.add_row("mode", ps.mode.value)
    table.add_row("particles", str(ps.n))
    label = "base" if ps.head_spec is not None else "network"
    table.add_row(label, "-".join(map(str, ps.base_spec.layer_widths)))
    if ps.head_spec is not None:
        table.add_row("head", "-".join(map(str, ps.head_spec.layer_widths)))
        table.add_row("frozen base", "yes" if ps.frozen_base else "no")
    table.add_row("activation", ps.base_spec.activation.value)
    table.add_row("trainable parameters", str(ps.trainable_parameter_count))
    table.add_row("seed", str(ps.seed))
    table.add_row("step", str(ps.step))
    console.print(table)
