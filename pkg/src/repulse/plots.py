"""
Deterministic SVG plots.

Every figure is built as an ElementTree on a fixed 800 x 480 canvas with fixed colors
and fixed coordinate precision, so identical inputs give byte-identical documents.
Polylines are reserved for data curves: axes and ticks are drawn with ``<line>``.
"""

import logging
import xml.etree.ElementTree as ET
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt

from .errors import SpecError

logger = logging.getLogger(__name__)

WIDTH, HEIGHT = 800, 480
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 64, 24, 40, 48
HISTOGRAM_BINS = 30

PARTICLE_COLOR = "#9ecae1"
MEAN_COLOR = "#08519c"
BAND_COLOR = "#6baed6"
POINT_COLOR = "#d94801"
AXIS_COLOR = "#333333"
# Cycled for histogram groups and accuracy curves
PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d")

Array = npt.NDArray[np.float64]


def _add(parent: ET.Element, tag: str, text: str | None = None, **attrs: str) -> ET.Element:
    """Append a child element; underscores in attribute names become hyphens."""
    child = ET.SubElement(parent, tag, {k.replace("_", "-"): v for k, v in attrs.items()})
    if text is not None:
        child.text = text
    return child


def _num(value: float) -> str:
    return f"{value:.2f}"


def _points(xs: Array, ys: Array) -> str:
    return " ".join(f"{_num(x)},{_num(y)}" for x, y in zip(xs, ys, strict=True))


def _color(i: int) -> str:
    return PALETTE[i % len(PALETTE)]


@dataclass(frozen=True)
class _Frame:
    """Data-to-pixel mapping of one plotting panel."""

    left: float
    top: float
    width: float
    height: float
    x_range: tuple[float, float]
    y_range: tuple[float, float]

    @property
    def bottom(self) -> float:
        return self.top + self.height

    def x(self, values: npt.ArrayLike) -> Array:
        lo, hi = self.x_range
        return self.left + (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) * self.width

    def y(self, values: npt.ArrayLike) -> Array:
        lo, hi = self.y_range
        scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
        return self.bottom - scaled * self.height


def _padded(lo: float, hi: float, pad: float = 0.05) -> tuple[float, float]:
    if hi <= lo:
        span = abs(lo) if lo != 0 else 1.0
        return lo - 0.5 * span, hi + 0.5 * span
    extra = (hi - lo) * pad
    return lo - extra, hi + extra


def _full_frame(x_range: tuple[float, float], y_range: tuple[float, float]) -> _Frame:
    return _Frame(
        left=MARGIN_LEFT,
        top=MARGIN_TOP,
        width=WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
        height=HEIGHT - MARGIN_TOP - MARGIN_BOTTOM,
        x_range=x_range,
        y_range=y_range,
    )


def _document(title: str) -> ET.Element:
    svg = ET.Element("svg")
    svg.attrib.update(
        {
            "xmlns": "http://www.w3.org/2000/svg",
            "width": str(WIDTH),
            "height": str(HEIGHT),
            "viewBox": f"0 0 {WIDTH} {HEIGHT}",
            "font-family": "sans-serif",
            "font-size": "12",
        }
    )
    _add(svg, "rect", x="0", y="0", width=str(WIDTH), height=str(HEIGHT), fill="#ffffff")
    if title:
        _add(svg, "text", title, x=_num(WIDTH / 2), y="24", text_anchor="middle", font_size="16")
    return svg


def _axes(svg: ET.Element, frame: _Frame, x_label: str, y_label: str, ticks: int = 5) -> None:
    lines = _add(svg, "g", stroke=AXIS_COLOR, stroke_width="1")
    labels = _add(svg, "g", fill=AXIS_COLOR)
    left, bottom = _num(frame.left), _num(frame.bottom)
    _add(lines, "line", x1=left, y1=bottom, x2=_num(frame.left + frame.width), y2=bottom)
    _add(lines, "line", x1=left, y1=_num(frame.top), x2=left, y2=bottom)

    for value in np.linspace(*frame.x_range, ticks):
        px = _num(float(frame.x(value)))
        _add(lines, "line", x1=px, y1=bottom, x2=px, y2=_num(frame.bottom + 4))
        _add(labels, "text", f"{value:.3g}", x=px, y=_num(frame.bottom + 18), text_anchor="middle")
    for value in np.linspace(*frame.y_range, ticks):
        py = float(frame.y(value))
        _add(lines, "line", x1=_num(frame.left - 4), y1=_num(py), x2=left, y2=_num(py))
        tx, ty = _num(frame.left - 8), _num(py + 4)
        _add(labels, "text", f"{value:.3g}", x=tx, y=ty, text_anchor="end")

    if x_label:
        cx = _num(frame.left + frame.width / 2)
        _add(labels, "text", x_label, x=cx, y=_num(frame.bottom + 38), text_anchor="middle")
    if y_label:
        cx, cy = _num(frame.left - 48), _num(frame.top + frame.height / 2)
        rotate = f"rotate(-90 {cx} {cy})"
        _add(labels, "text", y_label, x=cx, y=cy, text_anchor="middle", transform=rotate)


def _legend(svg: ET.Element, names: Sequence[str], left: float, top: float) -> None:
    group = _add(svg, "g", font_size="11")
    for i, name in enumerate(names):
        y = top + 16 * i
        _add(group, "rect", x=_num(left), y=_num(y - 9), width="10", height="10", fill=_color(i))
        _add(group, "text", name, x=_num(left + 14), y=_num(y))


def to_string(svg: ET.Element) -> str:
    """Serialize with a fixed XML declaration and trailing newline."""
    body = ET.tostring(svg, encoding="unicode")
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + body + "\n"


def plot_regression_bands(
    grid_x: npt.ArrayLike,
    predictions: npt.ArrayLike,
    train_x: npt.ArrayLike,
    train_y: npt.ArrayLike,
    title: str = "",
) -> str:
    """
    Particle predictions, their mean and a +-1 std band over a 1-D grid.

    Draws one thin polyline per particle, one mean polyline, one shaded band path and
    the training points as circles.

    Args:
        grid_x: G grid inputs (G >= 2).
        predictions: n x G particle predictions.
        train_x: Training inputs.
        train_y: Training targets.
        title: Optional heading.

    Returns:
        The SVG document as a string.

    Raises:
        SpecError: On NaN predictions or inconsistent shapes.
    """
    grid = np.asarray(grid_x, dtype=np.float64).ravel()
    preds = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    tx = np.asarray(train_x, dtype=np.float64).ravel()
    ty = np.asarray(train_y, dtype=np.float64).ravel()
    if grid.shape[0] < 2:
        raise SpecError(f"regression bands need at least 2 grid points, got {grid.shape[0]}")
    if preds.shape[1] != grid.shape[0]:
        raise SpecError(f"predictions {preds.shape} do not match {grid.shape[0]} grid points")
    if np.isnan(preds).any():
        raise SpecError("predictions contain NaN")
    if tx.shape != ty.shape:
        raise SpecError("train inputs and targets differ in length")

    mean = preds.mean(axis=0)
    std = preds.std(axis=0)
    y_values = np.concatenate([preds.ravel(), mean - std, mean + std, ty])
    frame = _full_frame(
        _padded(float(grid.min()), float(grid.max()), 0.0),
        _padded(float(y_values.min()), float(y_values.max())),
    )
    svg = _document(title)
    _axes(svg, frame, "x", "y")

    px = frame.x(grid)
    upper, lower = frame.y(mean + std), frame.y(mean - std)
    outline = [f"M{_num(px[0])},{_num(upper[0])}"]
    outline += [f"L{_num(x)},{_num(y)}" for x, y in zip(px[1:], upper[1:], strict=True)]
    outline += [f"L{_num(x)},{_num(y)}" for x, y in zip(px[::-1], lower[::-1], strict=True)]
    band = " ".join(outline) + " Z"
    _add(svg, "path", d=band, fill=BAND_COLOR, fill_opacity="0.35", stroke="none")

    particles = _add(svg, "g", fill="none", stroke=PARTICLE_COLOR, stroke_width="0.8")
    for row in preds:
        _add(particles, "polyline", points=_points(px, frame.y(row)))
    mean_points = _points(px, frame.y(mean))
    _add(svg, "polyline", points=mean_points, fill="none", stroke=MEAN_COLOR, stroke_width="2")

    scatter = _add(svg, "g", fill=POINT_COLOR)
    for x, y in zip(frame.x(tx), frame.y(ty), strict=True):
        _add(scatter, "circle", cx=_num(x), cy=_num(y), r="2.5")
    return to_string(svg)


def _step_outline(frame: _Frame, heights: Array, edges: Array) -> str:
    xs, ys = frame.x(edges), frame.y(heights)
    base = _num(frame.bottom)
    parts = [f"M{_num(xs[0])},{base}"]
    parts += [f"L{_num(xs[i])},{_num(y)} L{_num(xs[i + 1])},{_num(y)}" for i, y in enumerate(ys)]
    parts.append(f"L{_num(xs[-1])},{base} Z")
    return " ".join(parts)


def plot_uncertainty_histogram(
    groups: Mapping[str, tuple[npt.ArrayLike, npt.ArrayLike]], title: str = ""
) -> str:
    """
    Side-by-side histograms of aleatoric (left) and epistemic (right) uncertainty.

    Each group (for example clean, ambiguous and OOD inputs) is drawn as a step
    outline of its normalized histogram, in the order given.

    Args:
        groups: name -> (aleatoric values, epistemic values).
        title: Optional heading.
    """
    if not groups:
        raise SpecError("histogram needs at least one group")
    svg = _document(title)
    panel_width = (WIDTH - 2 * MARGIN_LEFT - 2 * MARGIN_RIGHT) / 2
    for panel, label in enumerate(("aleatoric (nats)", "epistemic (nats)")):
        values = {
            name: np.asarray(pair[panel], dtype=np.float64).ravel() for name, pair in groups.items()
        }
        if any(v.size == 0 or np.isnan(v).any() for v in values.values()):
            raise SpecError("histogram groups must be non-empty and free of NaN")
        hi = max(float(v.max()) for v in values.values())
        edges = np.linspace(0.0, hi if hi > 0 else 1.0, HISTOGRAM_BINS + 1)
        shares = {name: np.histogram(v, bins=edges)[0] / v.size for name, v in values.items()}
        peak = max(float(s.max()) for s in shares.values())
        frame = _Frame(
            left=MARGIN_LEFT + panel * (panel_width + MARGIN_LEFT + MARGIN_RIGHT),
            top=MARGIN_TOP,
            width=panel_width,
            height=HEIGHT - MARGIN_TOP - MARGIN_BOTTOM,
            x_range=(0.0, float(edges[-1])),
            y_range=(0.0, peak if peak > 0 else 1.0),
        )
        _axes(svg, frame, label, "fraction" if panel == 0 else "")
        for i, share in enumerate(shares.values()):
            d = _step_outline(frame, share, edges)
            _add(svg, "path", d=d, fill=_color(i), fill_opacity="0.25", stroke=_color(i))
    _legend(svg, list(groups), WIDTH - 150, MARGIN_TOP + 12)
    return to_string(svg)


def plot_accuracy_curves(
    curves: Mapping[str, tuple[Sequence[int], Sequence[float]]], title: str = ""
) -> str:
    """
    Test accuracy against labeled-set size, one polyline per acquisition score.

    Args:
        curves: name -> (labeled sizes, accuracies).
        title: Optional heading.
    """
    if not curves:
        raise SpecError("accuracy plot needs at least one curve")
    sizes = np.concatenate([np.asarray(s, dtype=np.float64) for s, _ in curves.values()])
    accs = np.concatenate([np.asarray(a, dtype=np.float64) for _, a in curves.values()])
    if sizes.size == 0 or sizes.shape != accs.shape or np.isnan(accs).any():
        raise SpecError("accuracy curves must be non-empty, aligned and free of NaN")
    frame = _full_frame(
        _padded(float(sizes.min()), float(sizes.max()), 0.0),
        _padded(float(accs.min()), float(accs.max())),
    )
    svg = _document(title)
    _axes(svg, frame, "labeled samples", "test accuracy")
    for i, (s, a) in enumerate(curves.values()):
        points = _points(frame.x(s), frame.y(a))
        _add(svg, "polyline", points=points, fill="none", stroke=_color(i), stroke_width="2")
    _legend(svg, list(curves), WIDTH - 150, frame.bottom - 16 * len(curves))
    return to_string(svg)


def save_svg(path: Path, document: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(document, encoding="utf-8")
    logger.debug("wrote %s", path)
