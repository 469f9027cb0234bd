"""Static SVG line plots of metrics CSVs (per-seed or aggregate)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from coirl.errors import SchemaError  # noqa: E402
from coirl.harness.metrics import METRIC_COLUMNS  # noqa: E402

AGGREGATE_PREFIX = ("step", "n_seeds")
PLOTTABLE = ("loss", "rel_value", "accuracy")

# Fixed SVG hash salt so output bytes depend only on the data.
matplotlib.rcParams["svg.hashsalt"] = "coirl"
matplotlib.rcParams["svg.fonttype"] = "none"


def read_metrics(path):
    """Parse a per-seed or aggregate metrics CSV into ``(kind, header, rows)``.

    Raises ``SchemaError`` naming the first column that does not belong.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = list(reader)
    if header is None:
        return "empty", [], []
    if header[: len(AGGREGATE_PREFIX)] == list(AGGREGATE_PREFIX):
        expected = list(AGGREGATE_PREFIX) + [f"{c}_{s}" for c in ("n_demos",) + PLOTTABLE for s in ("mean", "std")]
        kind = "aggregate"
    else:
        expected = list(METRIC_COLUMNS)
        kind = "seed"
    for i, name in enumerate(header):
        if i >= len(expected) or name != expected[i]:
            raise SchemaError(f"{path}: unexpected column {name!r} at position {i}")
    if len(header) != len(expected):
        raise SchemaError(f"{path}: missing column {expected[len(header)]!r}")
    for line, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}: line {line} has {len(row)} fields, expected {len(header)}")
    return kind, header, rows


def _column(header, rows, name):
    j = header.index(name)
    return np.array([float(r[j]) if r[j] != "" else np.nan for r in rows])


def emit_plot(csv_paths, out_path, metric="rel_value", title=None, labels=None):
    """Draw one line per CSV; aggregate CSVs also get a shaded ±1 std band.

    Band patches carry the SVG id ``band-<i>`` and lines ``line-<i>``.  An
    empty CSV (or one with no values for ``metric``) yields empty axes with a
    warning annotation.
    """
    if metric not in PLOTTABLE:
        raise SchemaError(f"unknown metric {metric!r}; expected one of {PLOTTABLE}")
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = 0
    for i, path in enumerate(csv_paths):
        kind, header, rows = read_metrics(path)
        if not rows:
            continue
        label = labels[i] if labels else Path(path).stem
        x = _column(header, rows, "step")
        if kind == "aggregate":
            mean = _column(header, rows, f"{metric}_mean")
            std = _column(header, rows, f"{metric}_std")
            n_seeds = _column(header, rows, "n_seeds")
            ok = ~np.isnan(mean)
            if not ok.any():
                continue
            (line,) = ax.plot(x[ok], mean[ok], label=label)
            line.set_gid(f"line-{i}")
            if np.nanmax(n_seeds) > 1:
                band = ax.fill_between(x[ok], (mean - std)[ok], (mean + std)[ok], alpha=0.25, color=line.get_color())
                band.set_gid(f"band-{i}")
        else:
            y = _column(header, rows, metric)
            ok = ~np.isnan(y)
            if not ok.any():
                continue
            (line,) = ax.plot(x[ok], y[ok], label=label)
            line.set_gid(f"line-{i}")
        drawn += 1
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    if title:
        ax.set_title(title)
    if drawn:
        ax.legend(loc="best")
    else:
        ax.text(0.5, 0.5, "warning: no data to plot", transform=ax.transAxes, ha="center", va="center", gid="empty-warning")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path
