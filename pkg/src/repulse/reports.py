"""CSV reports for experiment artifacts."""

import csv
import logging
import math
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from .errors import SpecError
from .storage import format_float

logger = logging.getLogger(__name__)

Cell = str | int | float | bool | np.integer | np.floating


def format_cell(value: Cell) -> str:
    """
    Render one CSV cell.

    Floats get 17 significant digits; integers and strings are written as is.

    Example:
        >>> format_cell(0.1)
        '0.10000000000000001'
    """
    if isinstance(value, bool | np.bool_):
        return "1" if value else "0"
    if isinstance(value, int | np.integer):
        return str(int(value))
    if isinstance(value, float | np.floating):
        if math.isnan(value):
            return "nan"
        return format_float(value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Cell]]) -> int:
    """
    Write a rectangular UTF-8 CSV report.

    Args:
        path: Output file; parent directories are created.
        header: Column names.
        rows: Data rows in output order.

    Returns:
        Number of data rows written.

    Raises:
        SpecError: If a row's length differs from the header.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise SpecError(
                    f"{path.name}: row {count + 1} has {len(row)} cells, "
                    f"header has {len(header)}"
                )
            writer.writerow([format_cell(v) for v in row])
            count += 1
    logger.debug("wrote %s (%d rows)", path, count)
    return count


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    """Header and raw string rows of a report."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        return [], []
    return rows[0], rows[1:]
