"""Bit-stable output: snapshots, time-series CSV, and the JSON report.

Floats are rendered with ``repr`` (shortest round-trip form), so identical
runs produce byte-identical files and snapshots parse back exactly.
"""

import csv
import json

import numpy as np

from .errors import ConfigError
from .grid import Grid2D, ScalarField, make_grid

__all__ = [
    "write_snapshot",
    "read_snapshot",
    "write_timeseries",
    "TIMESERIES_COLUMNS",
]

TIMESERIES_COLUMNS = [
    "t", "entropy_term", "interaction_term", "dirichlet_term", "mass_term",
    "energy_total", "wasserstein_sq", "l2_residual_sq", "mass", "moment2",
    "fisher", "max_density",
]


def _fmt(x) -> str:
    return repr(float(x))


def write_snapshot(path, field: ScalarField, time: float):
    grid = field.grid
    lines = [f"# half_width={_fmt(grid.half_width)} n={grid.cells_per_axis} time={_fmt(time)}"]
    lines.extend(_fmt(v) for v in field.values.ravel())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_snapshot(path, grid: Grid2D | None = None):
    """Parse a snapshot; returns (field, time).  Exact round-trip."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# "):
            raise ConfigError(f"{path}: missing snapshot header")
        fields = dict(part.split("=", 1) for part in header[2:].split())
        half_width = float(fields["half_width"])
        n = int(fields["n"])
        time = float(fields["time"])
        values = np.array([float(line) for line in fh if line.strip()])
    if values.size != n * n:
        raise ConfigError(f"{path}: expected {n * n} values, found {values.size}")
    file_grid = make_grid(half_width, n)
    if grid is not None and grid != file_grid:
        raise ConfigError(f"{path}: snapshot grid {file_grid} does not match {grid}")
    return ScalarField(file_grid, values.reshape(n, n)), time


def write_timeseries(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TIMESERIES_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in TIMESERIES_COLUMNS])


def write_json(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
