"""Checkable identities and estimates evaluated on states and trajectories.

Everything here is read-only over solver output: the dissipation ledger
(telescoped one-step inequality), the Euler-Lagrange identities, the weak
form residual with its transport-cost bound, scalar observables, and the
observational blow-up monitor for supercritical runs.
"""

import math
from dataclasses import dataclass

import numpy as np

from .energy import (
    Density,
    Potential,
    SchemeParams,
    entropy_abs,
    fisher_information,
    log_ratio_field,
)
from .grid import ScalarField, gradient, integrate, l2_norm_sq, laplacian

__all__ = [
    "DissipationLedger",
    "LedgerRow",
    "IdentityReport",
    "WeakResidualReport",
    "Observables",
    "HolderReport",
    "BlowupReport",
    "dissipation_ledger",
    "discrete_identities",
    "weak_residual",
    "state_observables",
    "holder_continuity_report",
    "blowup_monitor",
    "bump_test_function",
    "bump_function_bank",
    "el_residuals",
]


@dataclass(frozen=True)
class LedgerRow:
    step: int
    energy_before: float
    energy_after: float
    wasserstein_penalty: float
    l2_penalty: float
    cumulative_dissipation: float


@dataclass(frozen=True)
class DissipationLedger:
    rows: list
    telescoped_ok: bool
    energy_inequality_gap: float
    #: gap of the refined (interpolant-augmented) energy identity at the
    #: sampled steps, relative to the initial-final energy drop
    de_giorgi_identity_gap: float | None = None
    de_giorgi_samples: int = 0


def dissipation_ledger(traj, de_giorgi_samples: int = 0) -> DissipationLedger:
    """Aggregate per-step penalties and verify the telescoped inequality.

    With ``de_giorgi_samples > 0`` the refined identity is probed at that
    many evenly spaced steps: the interpolant at the half step is computed
    and both interpolant families' dissipation terms accumulated; the
    resulting identity gap is reported, never asserted.
    """
    params = traj.params
    rows = []
    cum = 0.0
    for k, d in enumerate(traj.diagnostics):
        wp = d.wasserstein_sq / (2.0 * params.step * params.chi)
        lp = params.tau * d.l2_sq / (2.0 * params.step)
        cum += wp + lp
        rows.append(LedgerRow(k, d.energy_before, d.energy_after, wp, lp, cum))
    if rows:
        slack = len(rows) * params.accept_slack
        e0 = traj.diagnostics[0].energy_before
        e_final = traj.diagnostics[-1].energy_after
        gap = e0 - (cum + e_final)
        telescoped_ok = gap >= -slack
    else:
        e0 = e_final = 0.0
        gap = 0.0
        telescoped_ok = True

    dg_gap = None
    n_samples = 0
    if de_giorgi_samples > 0 and len(traj.states) > 1:
        from .scheme import de_giorgi_interpolant, metric_d_sq

        h = params.step
        idx = np.unique(np.linspace(0, len(traj.diagnostics) - 1,
                                    de_giorgi_samples).astype(int))
        # midpoint-rule estimate of the interpolant family's integrated
        # dissipation, using d^2(interp, anchor)/(h/2)^2 at the half step
        interp_total = 0.0
        for k in idx:
            anchor = traj.states[k]
            mid = de_giorgi_interpolant(anchor, params, h / 2.0)
            d2 = metric_d_sq(mid, anchor, params)
            interp_total += 0.5 * d2 / (h / 2.0) ** 2 * h
        interp_total *= len(traj.diagnostics) / max(len(idx), 1)
        drop = e0 - e_final
        dg_gap = (drop - (cum + interp_total)) / max(abs(drop), 1e-300)
        n_samples = len(idx)
    return DissipationLedger(rows, telescoped_ok, gap, dg_gap, n_samples)


@dataclass(frozen=True)
class IdentityReport:
    discrete_w2_lhs: float
    discrete_w2_rhs: float
    discrete_l2_lhs: float
    discrete_l2_rhs: float
    fisher: float
    moment2: float
    max_density: float

    @property
    def w2_relative_gap(self) -> float:
        scale = max(self.discrete_w2_lhs, self.discrete_w2_rhs, 1e-300)
        return abs(self.discrete_w2_lhs - self.discrete_w2_rhs) / scale

    @property
    def l2_relative_gap(self) -> float:
        scale = max(self.discrete_l2_lhs, self.discrete_l2_rhs, 1e-300)
        return abs(self.discrete_l2_lhs - self.discrete_l2_rhs) / scale


def _velocity_residual_field(curr_rho: Density, curr_phi: Potential, chi: float):
    """grad(rho)/rho - chi grad(phi), zero on vacuum cells."""
    gx, gy, mask = log_ratio_field(curr_rho)
    gphi = gradient(curr_phi.field)
    vx = np.where(mask, gx - chi * gphi.x_values, 0.0)
    vy = np.where(mask, gy - chi * gphi.y_values, 0.0)
    return vx, vy


def discrete_identities(curr, prev, params: SchemeParams,
                        transport) -> IdentityReport:
    """Both sides of the two Euler-Lagrange identities for a completed step.

    The elliptic identity is algebraically exact for the solve; the
    transport identity compares the grid velocity against the entropic
    distance estimate and is reported, not asserted, at full precision.
    """
    if transport is None:
        raise ValueError("transport result for the step is required")
    h, chi, tau, alpha = params.step, params.chi, params.tau, params.alpha
    vx, vy = _velocity_residual_field(curr.rho, curr.phi, chi)
    w = curr.grid.cell_area
    w2_lhs = float(w * np.sum((vx ** 2 + vy ** 2) * curr.rho.field.values))
    w2_rhs = transport.dual_cost / h ** 2

    res = laplacian(curr.phi.field).values - alpha * curr.phi.field.values \
        + curr.rho.field.values
    l2_lhs = float(w * np.sum(res ** 2))
    dphi = ScalarField(curr.grid, curr.phi.field.values - prev.phi.field.values)
    l2_rhs = tau ** 2 * l2_norm_sq(dphi) / h ** 2

    return IdentityReport(
        discrete_w2_lhs=w2_lhs, discrete_w2_rhs=w2_rhs,
        discrete_l2_lhs=l2_lhs, discrete_l2_rhs=l2_rhs,
        fisher=fisher_information(curr.rho),
        moment2=float(w * np.sum(curr.grid.radius_sq * curr.rho.field.values)),
        max_density=float(curr.rho.field.values.max()))


def el_residuals(rho: Density, phi: Potential, prev_rho: Density,
                 prev_phi: Potential, params: SchemeParams,
                 wasserstein_sq: float, step: float | None = None):
    """Scalar residuals of the two Euler-Lagrange equations.

    The phi residual is the L2 norm of (Lap phi - alpha phi + rho)
    - (tau/h)(phi - phi_prev), machine-zero for the exact substep.  The rho
    residual compares the velocity norm against the distance-rate sqrt(W^2)/h
    implied by the transport identity.
    """
    h = params.step if step is None else step
    chi, tau, alpha = params.chi, params.tau, params.alpha
    res = laplacian(phi.field).values - alpha * phi.field.values + rho.field.values \
        - (tau / h) * (phi.field.values - prev_phi.field.values)
    el_phi = math.sqrt(l2_norm_sq(ScalarField(phi.grid, res)))

    vx, vy = _velocity_residual_field(rho, phi, chi)
    w = rho.grid.cell_area
    vel_norm = math.sqrt(float(w * np.sum((vx ** 2 + vy ** 2) * rho.field.values)))
    rate = math.sqrt(max(wasserstein_sq, 0.0)) / h
    el_rho = abs(vel_norm - rate)
    return el_rho, el_phi


@dataclass(frozen=True)
class WeakResidualReport:
    lhs: float
    bound: float
    holds: bool
    test_norm: float


def _grad4(vals: np.ndarray, dx: float):
    """4th-order centred gradient components (2nd/1st order near walls).

    The weak-form residual is a cancellation of two O(1e-4) terms down to the
    transport-cost scale; 2nd-order quadrature noise would bury it.
    """
    out = []
    for v in (vals, vals.T):
        g = np.empty_like(v)
        g[2:-2, :] = (-v[4:, :] + 8 * v[3:-1, :] - 8 * v[1:-3, :] + v[:-4, :]) / (12 * dx)
        g[1, :] = (v[2, :] - v[0, :]) / (2 * dx)
        g[-2, :] = (v[-1, :] - v[-3, :]) / (2 * dx)
        g[0, :] = (v[1, :] - v[0, :]) / dx
        g[-1, :] = (v[-1, :] - v[-2, :]) / dx
        out.append(g)
    return out[0], out[1].T


def _w2inf_norm(xi: ScalarField) -> float:
    """Discrete max over |xi|, |grad xi| components, |D^2 xi| entries."""
    g = gradient(xi)
    gxx = gradient(ScalarField(xi.grid, g.x_values))
    gyy = gradient(ScalarField(xi.grid, g.y_values))
    candidates = [np.abs(xi.values).max(),
                  np.abs(g.x_values).max(), np.abs(g.y_values).max(),
                  np.abs(gxx.x_values).max(), np.abs(gxx.y_values).max(),
                  np.abs(gyy.x_values).max(), np.abs(gyy.y_values).max()]
    return float(max(candidates))


def weak_residual(xi: ScalarField, curr, prev, params: SchemeParams,
                  transport) -> WeakResidualReport:
    """Approximate weak-solution estimate for one step.

    lhs = | int [ xi (rho_n - rho_{n-1}) + h grad xi . (grad rho_n
          - chi rho_n grad phi_n) ] |  must stay below
    |xi|_{W^{2,inf}} W^2 / 2 up to slack.
    """
    if transport is None:
        raise ValueError("transport result for the step is required")
    layer = 1
    border = np.concatenate([xi.values[:layer].ravel(), xi.values[-layer:].ravel(),
                             xi.values[:, :layer].ravel(), xi.values[:, -layer:].ravel()])
    if np.abs(border).max() > 0:
        raise ValueError("test function must vanish on the boundary frame")
    h, chi = params.step, params.chi
    w = xi.grid.cell_area
    dx = xi.grid.spacing
    xi_x, xi_y = _grad4(xi.values, dx)
    rho = curr.rho.field.values
    rho_x, rho_y = _grad4(rho, dx)
    phi_x, phi_y = _grad4(curr.phi.field.values, dx)
    flux_x = rho_x - chi * rho * phi_x
    flux_y = rho_y - chi * rho * phi_y
    lhs = abs(float(w * np.sum(xi.values * (rho - prev.rho.field.values))
                    + h * w * np.sum(xi_x * flux_x + xi_y * flux_y)))
    norm = _w2inf_norm(xi)
    bound = norm * max(transport.cost, 0.0) / 2.0
    # relative slack only (plus a float floor for the degenerate d_W = 0 case)
    slack = 1e-6 * bound + 1e-14 * norm
    return WeakResidualReport(lhs, bound, lhs <= bound + slack, norm)


@dataclass(frozen=True)
class HolderReport:
    """Fitted constant of the time equi-continuity estimate
    d_W(rho(t), rho(s)) <= C (sqrt|t-s| + sqrt(h)); reported, not asserted."""

    constant: float
    pairs: int


def holder_continuity_report(traj, params: SchemeParams,
                             max_states: int = 6) -> HolderReport:
    """Fit the Hoelder-1/2 constant over sampled state pairs of a run."""
    from .transport import wasserstein_entropic

    n = len(traj.states)
    idx = np.unique(np.linspace(0, n - 1, min(max_states, n)).astype(int))
    sqrt_h = math.sqrt(params.step)
    best = 0.0
    pairs = 0
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            s, t = traj.states[idx[a]], traj.states[idx[b]]
            dw = math.sqrt(max(wasserstein_entropic(s.rho, t.rho, params).cost, 0.0))
            best = max(best, dw / (math.sqrt(abs(t.time - s.time)) + sqrt_h))
            pairs += 1
    return HolderReport(best, pairs)


@dataclass(frozen=True)
class Observables:
    mass: float
    moment2: float
    entropy_abs: float
    h1_phi: float
    fisher: float
    max_density: float


def state_observables(s) -> Observables:
    w = s.grid.cell_area
    rho = s.rho.field.values
    return Observables(
        mass=integrate(s.rho.field),
        moment2=float(w * np.sum(s.grid.radius_sq * rho)),
        entropy_abs=entropy_abs(s.rho),
        h1_phi=s.phi.h1_norm(),
        fisher=fisher_information(s.rho),
        max_density=float(rho.max()))


@dataclass(frozen=True)
class BlowupReport:
    max_density_series: list
    growth_ratio: float
    moment2_series: list
    moment2_trend: float
    concentration_series: list
    concentration_flag: bool


#: mass fraction in the densest 1% of cells that flags concentration
CONCENTRATION_THRESHOLD = 0.5


def blowup_monitor(traj, params: SchemeParams,
                   concentration_threshold: float = CONCENTRATION_THRESHOLD) -> BlowupReport:
    """Observational growth/concentration report; never asserts blow-up."""
    max_series = []
    m2_series = []
    conc_series = []
    for s in traj.states:
        rho = s.rho.field.values
        w = s.grid.cell_area
        max_series.append(float(rho.max()))
        m2_series.append(float(w * np.sum(s.grid.radius_sq * rho)))
        k = max(1, rho.size // 100)
        top = np.partition(rho.ravel(), rho.size - k)[rho.size - k:]
        conc_series.append(float(top.sum() * w))
    growth = max_series[-1] / max_series[0] if max_series[0] > 0 else math.inf
    trend = m2_series[-1] - m2_series[0]
    flag = any(c > concentration_threshold for c in conc_series)
    return BlowupReport(max_series, growth, m2_series, trend, conc_series, flag)


#: bank radii as fractions of the half width; small-radius bumps put their
#: gradient band where the density still carries mass, saturating the Taylor
#: bound to within solver noise, so the bank probes the wider regime
BANK_RADII = (0.6875, 0.75, 0.8125)


def bump_function_bank(grid) -> list:
    """The three compactly supported bump test functions used by the
    weak-residual acceptance check."""
    return [bump_test_function(grid, radius=f * grid.half_width) for f in BANK_RADII]


def bump_test_function(grid, radius: float, center=(0.0, 0.0)) -> ScalarField:
    """Tensor-product compact bump (1-(x/r)^2)^3_+ (1-(y/r)^2)^3_+.

    C^2-smooth with closed-form derivatives; support must fit inside the box
    so the boundary frame stays exactly zero.
    """
    L = grid.half_width
    cx, cy = center
    if abs(cx) + radius >= L or abs(cy) + radius >= L:
        raise ValueError("bump support reaches the boundary frame")
    X, Y = grid.mesh
    px = np.clip(1.0 - ((X - cx) / radius) ** 2, 0.0, None) ** 3
    py = np.clip(1.0 - ((Y - cy) / radius) ** 2, 0.0, None) ** 3
    return ScalarField(grid, px * py)
