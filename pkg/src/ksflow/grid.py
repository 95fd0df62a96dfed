"""Uniform cell-centred grid on the square box [-L, L]^2 and the discrete
calculus every other module builds on.

Conventions, fixed once here:

* fields live at cell centres ``(-L + (i+1/2)dx, -L + (j+1/2)dx)`` and are
  stored as ``(n, n)`` float arrays, axis 0 = x, axis 1 = y;
* quadrature is the midpoint rule, ``integrate(f) = cell_area * sum(f)``;
* the Laplacian is the 5-point stencil closed with zero-flux (Neumann)
  ghost cells, so it is symmetric and annihilates constants exactly;
* the gradient is centred in the interior and one-sided on the boundary
  layer, consistent with the zero-flux convention.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "Grid2D",
    "ScalarField",
    "VectorField",
    "make_grid",
    "integrate",
    "gradient",
    "laplacian",
    "dirichlet_energy",
    "l2_norm_sq",
    "inner",
]


@dataclass(frozen=True)
class Grid2D:
    half_width: float
    cells_per_axis: int

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.cells_per_axis

    @property
    def cell_area(self) -> float:
        return self.spacing ** 2

    @cached_property
    def axis(self) -> np.ndarray:
        """Cell-centre coordinates along one axis."""
        n, dx = self.cells_per_axis, self.spacing
        return -self.half_width + (np.arange(n) + 0.5) * dx

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.axis, self.axis, indexing="ij")

    @cached_property
    def radius_sq(self) -> np.ndarray:
        X, Y = self.mesh
        return X ** 2 + Y ** 2

    def shape(self) -> tuple[int, int]:
        n = self.cells_per_axis
        return (n, n)


@dataclass(frozen=True)
class ScalarField:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape():
            raise ValueError(
                f"field shape {self.values.shape} does not match grid {self.grid.shape()}"
            )

    def validate(self) -> "ScalarField":
        if not np.isfinite(self.values).all():
            raise ValueError("scalar field contains non-finite values")
        return self


@dataclass(frozen=True)
class VectorField:
    grid: Grid2D
    x_values: np.ndarray
    y_values: np.ndarray

    def __post_init__(self):
        shape = self.grid.shape()
        if self.x_values.shape != shape or self.y_values.shape != shape:
            raise ValueError("vector field components do not match grid shape")

    def validate(self) -> "VectorField":
        if not (np.isfinite(self.x_values).all() and np.isfinite(self.y_values).all()):
            raise ValueError("vector field contains non-finite values")
        return self

    def magnitude_sq(self) -> np.ndarray:
        return self.x_values ** 2 + self.y_values ** 2


def make_grid(half_width: float, cells_per_axis: int) -> Grid2D:
    if not half_width > 0:
        raise ValueError(f"half_width must be positive, got {half_width}")
    if int(cells_per_axis) != cells_per_axis or cells_per_axis < 2:
        raise ValueError(f"cells_per_axis must be an integer >= 2, got {cells_per_axis}")
    return Grid2D(float(half_width), int(cells_per_axis))


def integrate(f: ScalarField) -> float:
    return float(f.grid.cell_area * f.values.sum())


def gradient(f: ScalarField) -> VectorField:
    v = f.values
    dx = f.grid.spacing
    gx = np.empty_like(v)
    gy = np.empty_like(v)
    gx[1:-1, :] = (v[2:, :] - v[:-2, :]) / (2 * dx)
    gx[0, :] = (v[1, :] - v[0, :]) / dx
    gx[-1, :] = (v[-1, :] - v[-2, :]) / dx
    gy[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2 * dx)
    gy[:, 0] = (v[:, 1] - v[:, 0]) / dx
    gy[:, -1] = (v[:, -1] - v[:, -2]) / dx
    return VectorField(f.grid, gx, gy)


def laplacian(f: ScalarField) -> ScalarField:
    v = f.values
    out = np.zeros_like(v)
    out[1:-1, :] += v[2:, :] + v[:-2, :] - 2 * v[1:-1, :]
    out[0, :] += v[1, :] - v[0, :]
    out[-1, :] += v[-2, :] - v[-1, :]
    out[:, 1:-1] += v[:, 2:] + v[:, :-2] - 2 * v[:, 1:-1]
    out[:, 0] += v[:, 1] - v[:, 0]
    out[:, -1] += v[:, -2] - v[:, -1]
    return ScalarField(f.grid, out / f.grid.spacing ** 2)


def dirichlet_energy(f: ScalarField) -> float:
    """integral |grad f|^2 as the quadratic form <f, -Lap f>.

    Uses face (forward) differences, which is exactly the form the Neumann
    5-point Laplacian derives from; the elliptic substep minimises this
    quantity, so the energy bookkeeping must use the same discretisation.
    """
    v = f.values
    fx = v[1:, :] - v[:-1, :]
    fy = v[:, 1:] - v[:, :-1]
    # (diff/dx)^2 * dx^2 = diff^2
    return float((fx ** 2).sum() + (fy ** 2).sum())


def l2_norm_sq(f: ScalarField) -> float:
    return float(f.grid.cell_area * (f.values ** 2).sum())


def inner(f: ScalarField, g: ScalarField) -> float:
    if f.grid != g.grid:
        raise ValueError("fields live on different grids")
    return float(f.grid.cell_area * (f.values * g.values).sum())
