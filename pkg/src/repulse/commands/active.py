"""Active-learning command."""

from pathlib import Path
from typing import Optional

from rich.table import Table

from ..errors import ConfigError
from ..plots import plot_accuracy_curves, save_svg
from ..reports import write_csv
from ..tasks import AcquisitionCurve, active_learning_run
from .common import console, load_data, prepare, show_written
from .experiments import CONFIG_OPTION, OUT_OPTION, SEED_OPTION, THREADS_OPTION


def active_learn_cmd(
    config: Path = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
):
    """
    Run pool-based active learning once per configured acquisition score.

    Every score uses the same initial labeled set and training seeds, so curves
    differ only by what they acquire. Writes curve.csv and curve.svg.
    """
    ctx = prepare(config, seed, out, threads)
    data = load_data(ctx)
    if data.test is None:
        raise ConfigError("active-learn needs a test set")

    acq = ctx.config.acquisition
    recipe = ctx.config.particles.to_recipe()
    retrain = ctx.train_config()
    curves: dict[str, AcquisitionCurve] = {}
    acq_seed = ctx.seeds["acquisition"]
    for kind in acq.score_kinds():
        cfg = acq.to_acquisition_config(kind, retrain, recipe, acq_seed, ctx.threads)
        with console.status(f"Acquiring by {kind.value} ({cfg.rounds} rounds)..."):
            curves[kind.value] = active_learning_run(data.train, data.test, cfg)

    rows = [(name, *row) for name, curve in curves.items() for row in curve.rows()]
    paths = [ctx.output("curve.csv"), ctx.output("curve.svg")]
    write_csv(paths[0], ("score", *AcquisitionCurve.HEADER), rows)
    plotted = {name: (c.labeled_sizes, c.accuracies) for name, c in curves.items()}
    save_svg(paths[1], plot_accuracy_curves(plotted, title=ctx.config.experiment.name))

    table = Table(title="Final test accuracy")
    table.add_column("Score", style="cyan")
    table.add_column("Labeled", justify="right")
    table.add_column("Accuracy", justify="right")
    for name, curve in curves.items():
        table.add_row(name, str(curve.labeled_sizes[-1]), f"{curve.final_accuracy:.2%}")
    console.print(table)
    show_written(paths)
