"""Free energy of the chemotaxis system and the functional inequalities used
as runtime diagnostics.

The energy of a pair (rho, phi) is

    E = (1/chi) * int rho log rho  -  int rho phi
        + 1/2 * int |grad phi|^2   +  alpha/2 * int phi^2

with the convention 0 log 0 = 0.  The Dirichlet term is evaluated through the
face-difference quadratic form of the Neumann Laplacian so that the elliptic
substep of the scheme is its exact minimiser; see ``grid.dirichlet_energy``.
"""

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import (
    Grid2D,
    ScalarField,
    dirichlet_energy,
    gradient,
    integrate,
    l2_norm_sq,
)

__all__ = [
    "SchemeParams",
    "Density",
    "Potential",
    "EnergyBreakdown",
    "AnalysisContext",
    "LowerBoundReport",
    "OnofriReport",
    "CarlemanReport",
    "BhnReport",
    "free_energy",
    "auxiliary_functional",
    "energy_lower_bound",
    "onofri_check",
    "carleman_bound",
    "bhn_check",
    "entropy",
    "entropy_abs",
    "log_ratio_field",
    "random_bump_field",
    "random_density",
    "MASS_TOL",
]

EIGHT_PI = 8.0 * math.pi

#: densities must integrate to 1 within this absolute tolerance
MASS_TOL = 1e-9

#: cells with rho below this fraction of the max count as vacuum for grad(rho)/rho
RHO_FLOOR_FRACTION = 1e-14


@dataclass(frozen=True)
class SchemeParams:
    """Parameters of one solver configuration.

    chi, tau, alpha are the model constants; step is the time step h;
    entropic_eps the transport regularisation; the remaining fields control
    the inner solvers.
    """

    chi: float
    tau: float
    alpha: float
    step: float
    entropic_eps: float
    inner_tol: float = 1e-7
    sinkhorn_tol: float = 1e-7
    max_inner_iters: int = 2000

    def __post_init__(self):
        for name in ("chi", "tau", "alpha", "step", "entropic_eps",
                     "inner_tol", "sinkhorn_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.max_inner_iters < 1:
            raise ValueError("max_inner_iters must be >= 1")

    @property
    def subcritical(self) -> bool:
        return self.chi < EIGHT_PI

    @property
    def accept_slack(self) -> float:
        """Slack allowed in the one-step dissipation inequality."""
        return 10.0 * (self.sinkhorn_tol + self.inner_tol)

    def with_step(self, step: float) -> "SchemeParams":
        return SchemeParams(self.chi, self.tau, self.alpha, step, self.entropic_eps,
                            self.inner_tol, self.sinkhorn_tol, self.max_inner_iters)


def default_entropic_eps(grid: Grid2D, step: float) -> float:
    """Default coupling of the transport blur to grid and step size."""
    return max(grid.spacing ** 2, step * (2.0 * grid.half_width) ** 2 * 1e-2)


@dataclass(frozen=True)
class Density:
    field: ScalarField

    @property
    def grid(self) -> Grid2D:
        return self.field.grid

    @cached_property
    def mass(self) -> float:
        return integrate(self.field)

    def validate(self) -> "Density":
        self.field.validate()
        if self.field.values.min() < 0:
            raise ValueError(f"density has negative cells (min {self.field.values.min():g})")
        if abs(self.mass - 1.0) > MASS_TOL:
            raise ValueError(f"density mass {self.mass!r} deviates from 1 beyond {MASS_TOL}")
        return self

    @staticmethod
    def normalized(field: ScalarField) -> "Density":
        vals = field.values
        if vals.min() < 0:
            raise ValueError("cannot normalise a field with negative values into a density")
        total = vals.sum() * field.grid.cell_area
        if not total > 0:
            raise ValueError("cannot normalise a field with zero mass")
        return Density(ScalarField(field.grid, vals / total))


@dataclass(frozen=True)
class Potential:
    field: ScalarField

    @property
    def grid(self) -> Grid2D:
        return self.field.grid

    def validate(self) -> "Potential":
        self.field.validate()
        return self

    def h1_norm(self) -> float:
        return math.sqrt(dirichlet_energy(self.field) + l2_norm_sq(self.field))


@dataclass(frozen=True)
class EnergyBreakdown:
    entropy_term: float
    interaction_term: float
    dirichlet_term: float
    mass_term: float

    @property
    def total(self) -> float:
        return self.entropy_term + self.interaction_term + self.dirichlet_term + self.mass_term


def entropy(rho: Density) -> float:
    """int rho log rho with 0 log 0 = 0."""
    v = rho.field.values
    pos = v > 0
    return float(rho.grid.cell_area * np.sum(v[pos] * np.log(v[pos])))


def entropy_abs(rho: Density) -> float:
    """int rho |log rho|."""
    v = rho.field.values
    pos = v > 0
    return float(rho.grid.cell_area * np.sum(v[pos] * np.abs(np.log(v[pos]))))


def _require_same_grid(rho: Density, phi: Potential):
    if rho.grid != phi.grid:
        raise ValueError("density and potential live on different grids")


def free_energy(rho: Density, phi: Potential, params: SchemeParams) -> EnergyBreakdown:
    _require_same_grid(rho, phi)
    w = rho.grid.cell_area
    interaction = -float(w * np.sum(rho.field.values * phi.field.values))
    dirichlet = 0.5 * dirichlet_energy(phi.field)
    mass_term = 0.5 * params.alpha * l2_norm_sq(phi.field)
    return EnergyBreakdown(entropy(rho) / params.chi, interaction, dirichlet, mass_term)


def auxiliary_functional(rho: Density, phi: Potential, params: SchemeParams) -> float:
    """(1/chi) int rho log rho + (tau/2) int (|grad phi|^2 + alpha phi^2)."""
    _require_same_grid(rho, phi)
    phi_part = dirichlet_energy(phi.field) + params.alpha * l2_norm_sq(phi.field)
    return entropy(rho) / params.chi + 0.5 * params.tau * phi_part


class AnalysisContext:
    """Caches the Onofri weight H(x) = 1/(pi (1+|x|^2)^2) on a grid."""

    def __init__(self, grid: Grid2D):
        self.grid = grid
        H = 1.0 / (math.pi * (1.0 + grid.radius_sq) ** 2)
        self.onofri_weight = ScalarField(grid, H)
        self.weight_mass = integrate(self.onofri_weight)
        #: mass of H lost to the box truncation; reported, added to slacks
        self.deficit = max(0.0, 1.0 - self.weight_mass)
        self.log_weight = ScalarField(grid, np.log(H))


@dataclass(frozen=True)
class LowerBoundReport:
    applicable: bool
    nu: float
    c1: float
    lhs: float
    rhs: float
    holds: bool


def energy_lower_bound(rho: Density, phi: Potential, params: SchemeParams,
                       ctx: AnalysisContext | None = None) -> LowerBoundReport:
    """Subcritical lower bound on the free energy.

    With nu = (8 pi - chi) / (16 pi + 2 chi) and
    C1 = (8 pi - chi)/(8 pi e chi) + (8 pi + chi)/(4 alpha chi) * |H|_2^2,
    every pair must satisfy

        E >= (8pi-chi)/(16 pi chi) int rho|log rho|
             + nu (|grad phi|^2 + alpha |phi|^2)
             + 3/(2 chi) int rho log H  -  C1.

    Supercritical chi returns a not-applicable report instead of failing.
    """
    _require_same_grid(rho, phi)
    chi, alpha = params.chi, params.alpha
    if not params.subcritical:
        return LowerBoundReport(False, 0.0, 0.0, 0.0, 0.0, True)
    if ctx is None:
        ctx = AnalysisContext(rho.grid)
    nu = (EIGHT_PI - chi) / (16.0 * math.pi + 2.0 * chi)
    h_l2_sq = l2_norm_sq(ctx.onofri_weight)
    c1 = (EIGHT_PI - chi) / (EIGHT_PI * math.e * chi) \
        + (EIGHT_PI + chi) / (4.0 * alpha * chi) * h_l2_sq
    w = rho.grid.cell_area
    rho_log_h = float(w * np.sum(rho.field.values * ctx.log_weight.values))
    phi_part = dirichlet_energy(phi.field) + alpha * l2_norm_sq(phi.field)
    rhs = (EIGHT_PI - chi) / (16.0 * math.pi * chi) * entropy_abs(rho) \
        + nu * phi_part + 1.5 / chi * rho_log_h - c1
    lhs = free_energy(rho, phi, params).total
    slack = 1e-9 * (1.0 + abs(lhs) + abs(rhs))
    return LowerBoundReport(True, nu, c1, lhs, rhs, lhs >= rhs - slack)


@dataclass(frozen=True)
class OnofriReport:
    lhs: float
    rhs: float
    holds: bool
    deficit: float
    overflow: bool = False
    max_exponent: float = 0.0


def onofri_check(psi: ScalarField, ctx: AnalysisContext) -> OnofriReport:
    """int e^psi H  <=  exp( int psi H + (1/16 pi) int |grad psi|^2 )."""
    if psi.grid != ctx.grid:
        raise ValueError("test function and context live on different grids")
    max_psi = float(psi.values.max())
    if max_psi > 700.0:
        return OnofriReport(math.inf, math.inf, False, ctx.deficit, True, max_psi)
    w = psi.grid.cell_area
    lhs = float(w * np.sum(np.exp(psi.values) * ctx.onofri_weight.values))
    mean = float(w * np.sum(psi.values * ctx.onofri_weight.values))
    grad_sq = dirichlet_energy(psi)
    rhs = math.exp(mean + grad_sq / (16.0 * math.pi))
    slack = 1e-6 + ctx.deficit
    return OnofriReport(lhs, rhs, lhs <= rhs * (1.0 + slack), ctx.deficit)


@dataclass(frozen=True)
class CarlemanReport:
    lhs: float
    rhs: float
    holds: bool


def carleman_bound(rho: Density, ctx: AnalysisContext) -> CarlemanReport:
    """int rho|log rho|  <=  int rho log rho + 2/e - 2 int rho log H."""
    if rho.grid != ctx.grid:
        raise ValueError("density and context live on different grids")
    w = rho.grid.cell_area
    rho_log_h = float(w * np.sum(rho.field.values * ctx.log_weight.values))
    lhs = entropy_abs(rho)
    rhs = entropy(rho) + 2.0 / math.e - 2.0 * rho_log_h
    slack = (1e-6 + ctx.deficit) * max(1.0, abs(lhs), abs(rhs))
    return CarlemanReport(lhs, rhs, lhs <= rhs + slack)


@dataclass(frozen=True)
class BhnReport:
    lhs: float
    rhs: float
    l_eps: float
    holds: bool
    fisher: float = 0.0
    entropy_abs: float = 0.0


def log_ratio_field(rho: Density):
    """grad(rho)/rho componentwise, zero where rho is (numerically) vacuum."""
    v = rho.field.values
    floor = RHO_FLOOR_FRACTION * v.max()
    g = gradient(rho.field)
    mask = v > floor
    safe = np.maximum(v, floor)
    gx = np.where(mask, g.x_values / safe, 0.0)
    gy = np.where(mask, g.y_values / safe, 0.0)
    return gx, gy, mask


def fisher_information(rho: Density) -> float:
    """int |grad rho / rho|^2 rho with the zero-on-vacuum convention."""
    gx, gy, _ = log_ratio_field(rho)
    w = rho.grid.cell_area
    return float(w * np.sum((gx ** 2 + gy ** 2) * rho.field.values))


# Gagliardo-Nirenberg constant over-estimate used to calibrate the BHN
# checker; the cutoff level N(eps) = exp(C/eps) makes C/log N = eps.
BHN_GN_CONSTANT = 2.0


def bhn_check(rho: Density, eps: float) -> BhnReport:
    """|rho|_2^2 <= eps |grad rho/rho|^2_{L2(rho)} |rho log rho|_1 + L_eps |rho|_1."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    C = BHN_GN_CONSTANT
    exponent = 2.0 * C / eps
    l_eps = math.inf if exponent > 700.0 else C * math.exp(exponent)
    w = rho.grid.cell_area
    lhs = float(w * np.sum(rho.field.values ** 2))
    fisher = fisher_information(rho)
    ent_abs = entropy_abs(rho)
    rhs = eps * fisher * ent_abs + l_eps * rho.mass
    return BhnReport(lhs, rhs, l_eps, lhs <= rhs * (1.0 + 1e-9), fisher, ent_abs)


def random_bump_field(grid: Grid2D, rng: np.random.Generator,
                      max_bumps: int = 5) -> ScalarField:
    """Sum of up to five Gaussian bumps; the randomised test-function family.

    Centres in [-L/2, L/2]^2, widths in [0.2, 2], amplitudes in [-3, 3].
    """
    X, Y = grid.mesh
    L = grid.half_width
    out = np.zeros(grid.shape())
    for _ in range(int(rng.integers(1, max_bumps + 1))):
        cx, cy = rng.uniform(-L / 2, L / 2, size=2)
        width = rng.uniform(0.2, 2.0)
        amp = rng.uniform(-3.0, 3.0)
        out += amp * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2.0 * width ** 2))
    return ScalarField(grid, out)


def random_density(grid: Grid2D, rng: np.random.Generator,
                   max_bumps: int = 5) -> Density:
    """Squared-and-normalised bump field; smooth, nonnegative, unit mass."""
    f = random_bump_field(grid, rng, max_bumps)
    sq = f.values ** 2
    if sq.sum() == 0.0:
        sq = np.exp(-grid.radius_sq)
    return Density.normalized(ScalarField(grid, sq))
