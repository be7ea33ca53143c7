"""CLI entry point for repulse."""

import logging
import sys
from collections.abc import Sequence
from typing import Optional

import typer

try:  # typer >= 0.26 raises from its vendored click, not the standalone package
    import typer._click.exceptions as _click_exceptions
except ImportError:
    import click.exceptions as _click_exceptions
from rich.console import Console
from rich.logging import RichHandler

from .errors import EXIT_OK, EXIT_USAGE, RepulseError, exit_code_for

# Create main app
app = typer.Typer(
    name="repulse",
    help="Repulse - repulsive particle ensembles with uncertainty decomposition",
    no_args_is_help=True,
    rich_markup_mode="rich",
    pretty_exceptions_enable=False,
)

console = Console()
err_console = Console(stderr=True)


def setup_logging(verbose: bool = False) -> None:
    """Route library logging through rich on stderr."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False, markup=False)],
        force=True,
    )


@app.callback()
def main_callback(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log every recorded step"),
):
    """Configure logging before any command runs."""
    setup_logging(verbose)


# Import and register commands after app is created to avoid circular imports
def register_commands():
    """Register all command modules."""
    from .commands import active, evaluate, experiments

    # Experiments
    app.command("toy-regression")(experiments.toy_regression_cmd)
    app.command("toy-classification")(experiments.toy_classification_cmd)
    app.command("train")(experiments.train_cmd)

    # Checkpoint evaluation
    app.command("decompose")(evaluate.decompose_cmd)
    app.command("ood-eval")(evaluate.ood_eval_cmd)
    app.command("info")(evaluate.info_cmd)

    # Active learning
    app.command("active-learn")(active.active_learn_cmd)


# Register commands
register_commands()


def report_error(error: BaseException, code: int) -> None:
    """One machine-parsable line on stderr: ``error[<code>]: <Class>: <message>``."""
    message = " ".join(str(error).split())
    typer.echo(f"error[{code}]: {type(error).__name__}: {message}", err=True)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run the CLI and return its exit code instead of exiting.

    Exit codes: 0 success, 2 usage errors, 3 configuration and file-format errors,
    4 numeric failures.

    Example:
        >>> run(["info", "--checkpoint", "out/checkpoint.rpve"])  # doctest: +SKIP
        0
    """
    args = list(argv) if argv is not None else sys.argv[1:]
    try:
        result = app(args=args, prog_name="repulse", standalone_mode=False)
    except _click_exceptions.UsageError as e:
        e.show()
        report_error(e, EXIT_USAGE)
        return EXIT_USAGE
    except _click_exceptions.ClickException as e:
        e.show()
        return e.exit_code
    except _click_exceptions.Exit as e:
        return e.exit_code
    except _click_exceptions.Abort:
        err_console.print("[red]Aborted.[/red]")
        return 1
    except (RepulseError, FloatingPointError) as e:
        code = exit_code_for(e)
        logging.getLogger(__name__).debug("command failed", exc_info=e)
        report_error(e, code)
        return code
    return result if isinstance(result, int) else EXIT_OK


def main():
    """Entry point for the CLI."""
    sys.exit(run())


if __name__ == "__main__":
    main()
