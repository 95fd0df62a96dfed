"""Implicit variational time stepping.

One step from (rho_n, phi_n) minimises

    F(rho, phi) = (1/2h) [ (1/chi) W^2(rho, rho_n) + tau |phi - phi_n|_2^2 ]
                  + E(rho, phi)

by alternating exact partial minimisations: the phi-problem is a Helmholtz
solve (DCT-diagonalised, machine-precision residual), the rho-problem is a
debiased entropic proximal step solved by scaling iterations whose
rho-marginal update is a pointwise exponential in closed form.

The debiased transport surrogate matters twice.  It removes the blur bias
that would otherwise pollute the dynamics (a raw entropic step adds eps/h of
spurious diffusion), and it vanishes at the anchor, so monotone decrease of
the surrogate objective across sweeps yields the discrete one-step

    E_after + (1/2h) d^2(u_after, u_before) <= E_before + slack

certificate at every accepted step.  The self-transport term is concave in
rho; freezing its potential between refresh rounds is a tangent
majorisation, so each round genuinely decreases the surrogate.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.fft import dctn, idctn

from .energy import Density, Potential, SchemeParams, free_energy
from .errors import BoundaryMassError, SinkhornDivergedError, StepRejectedError
from .grid import Grid2D, ScalarField, l2_norm_sq
from .transport import (
    NEG_INF,
    EntropicWorkspace,
    TransportResult,
    get_workspace,
    wasserstein_entropic,
)

__all__ = [
    "State",
    "StepDiagnostics",
    "Trajectory",
    "phi_substep",
    "rho_substep",
    "jko_step",
    "run",
    "de_giorgi_interpolant",
    "metric_d_sq",
    "helmholtz_neumann_solve",
    "boundary_layer_mass",
]

#: width (in cells) of the frame monitored for escaping mass
BOUNDARY_LAYER_CELLS = 2

#: abort threshold for mass in the boundary layer during a run
BOUNDARY_MASS_ABORT = 1e-4

#: tiny positive floor applied to anchor masses so vacuum cells can refill
MASS_FLOOR = 1e-300

_DCT_CACHE: dict[tuple, np.ndarray] = {}


@dataclass(frozen=True)
class State:
    rho: Density
    phi: Potential
    time: float = 0.0

    def __post_init__(self):
        if self.rho.grid != self.phi.grid:
            raise ValueError("rho and phi live on different grids")

    @property
    def grid(self) -> Grid2D:
        return self.rho.grid


@dataclass(frozen=True)
class StepDiagnostics:
    wasserstein_sq: float
    l2_sq: float
    penalized_value: float
    inner_iterations: int
    energy_before: float
    energy_after: float
    el_residual_rho: float
    el_residual_phi: float
    sweeps: int = 0
    sharp_wasserstein_sq: float = 0.0
    marginal_error: float = 0.0
    mass_drift: float = 0.0
    lower_bound_holds: bool | None = None
    boundary_mass: float = 0.0

    @property
    def dissipation_gap(self) -> float:
        """lhs - rhs of the one-step inequality; must stay <= accept_slack."""
        return self.penalized_value - self.energy_before


@dataclass
class Trajectory:
    states: list
    diagnostics: list
    params: SchemeParams
    mode: str = "full"

    def times(self):
        return [s.time for s in self.states]

    def state_at(self, t: float) -> State:
        """Piecewise-constant interpolant: the step state for t in ((n-1)h, nh]."""
        t0 = self.states[0].time
        if t <= t0:
            return self.states[0]
        n = int(math.ceil((t - t0) / self.params.step - 1e-12))
        if n >= len(self.states):
            raise ValueError(f"t={t} lies beyond the trajectory horizon")
        return self.states[n]

    def interpolant_at(self, t: float) -> State:
        """Variational interpolant at time t (solves the fractional-step
        problem from the step anchor; coincides with state_at at step nodes)."""
        t0 = self.states[0].time
        if t <= t0:
            return self.states[0]
        h = self.params.step
        n = int(math.ceil((t - t0) / h - 1e-12))
        if n >= len(self.states):
            raise ValueError(f"t={t} lies beyond the trajectory horizon")
        anchor = self.states[n - 1]
        offset = t - anchor.time
        if offset >= h * (1 - 1e-12):
            return self.states[n]
        return de_giorgi_interpolant(anchor, self.params, offset)


def _dct_eigenvalues(grid: Grid2D) -> np.ndarray:
    key = (grid.half_width, grid.cells_per_axis)
    lam = _DCT_CACHE.get(key)
    if lam is None:
        n, dx = grid.cells_per_axis, grid.spacing
        lam1 = 2.0 * (np.cos(np.pi * np.arange(n) / n) - 1.0) / dx ** 2
        lam = lam1[:, None] + lam1[None, :]
        _DCT_CACHE[key] = lam
    return lam


def helmholtz_neumann_solve(grid: Grid2D, coeff: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (coeff - Lap) u = rhs with the zero-flux 5-point Laplacian.

    DCT-II diagonalises the Neumann stencil exactly, so the residual is at
    machine precision; requires coeff > 0.
    """
    if not coeff > 0:
        raise ValueError("coeff must be positive for a well-posed Neumann solve")
    lam = _dct_eigenvalues(grid)
    return idctn(dctn(rhs, norm="ortho") / (coeff - lam), norm="ortho")


def phi_substep(rho: Density, phi_prev: Potential, params: SchemeParams) -> Potential:
    """Exact minimiser of F in phi at fixed rho.

    Solves (tau/h + alpha - Lap) phi = (tau/h) phi_prev + rho, which is the
    discrete Euler-Lagrange equation of the phi-problem rearranged.
    """
    if rho.grid != phi_prev.grid:
        raise ValueError("rho and phi_prev live on different grids")
    h, tau, alpha = params.step, params.tau, params.alpha
    rhs = (tau / h) * phi_prev.field.values + rho.field.values
    sol = helmholtz_neumann_solve(rho.grid, tau / h + alpha, rhs)
    return Potential(ScalarField(rho.grid, sol))


class _ProxCarry:
    """Warm-start data threaded through steps: potentials of the previous
    step's plan and the self potential / self plan cost of its endpoint."""

    def __init__(self, U, V, D_end, cost_end):
        self.U = U
        self.V = V
        self.D_end = D_end
        self.cost_end = cost_end


def _self_plan_cost(ws: EntropicWorkspace, D: np.ndarray, m: np.ndarray) -> float:
    """Transport cost <C, plan> of the symmetric self plan given its potential."""
    eps = ws.eps
    X, Y = ws.grid.mesh
    shift = ws.grid.axis.min() - 1.0
    cost = 2.0 * float(np.sum(m * (X ** 2 + Y ** 2)))
    for coord in (X, Y):
        Wf = D / eps + np.log(coord - shift)
        num = np.exp(ws.kern(Wf) + D / eps)
        num[D == NEG_INF] = 0.0
        cost -= 2.0 * float(np.sum(coord * (num + m * shift)))
    return cost


def _floored_log(m: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(m, MASS_FLOOR))


def _prox(ws, logp, p, phi_vals, params, step, U, V, D, max_rounds=3):
    """Debiased entropic proximal step for the rho-problem at fixed phi.

    Minimises (1/(2 step chi)) S_eps(q, p) + (1/chi) sum q log(q/w) - <phi, q>
    over probability vectors q.  Returns the new log-masses together with the
    final potentials and the iteration count.
    """
    eps = ws.eps
    w = ws.grid.cell_area
    chi = params.chi
    tol = params.sinkhorn_tol
    denom = eps + 2.0 * step
    drift = 2.0 * step * (math.log(w) - 1.0 + chi * phi_vals)
    logq = None
    total_iters = 0
    resid = math.inf
    for _ in range(max_rounds):
        it = 0
        while True:
            Sv = ws.smooth(V)
            Unew = np.where(logp == NEG_INF, NEG_INF, eps * logp - Sv)
            resid = ws._pair_residual(p, U, Unew, eps)
            U = Unew
            if it > 0 and resid <= tol:
                break
            Su = ws.smooth(U)
            logq = (Su + D + drift) / denom
            m = logq.max()
            logq -= m + math.log(np.exp(logq - m).sum())
            V = eps * logq - Su
            it += 1
            if total_iters + it >= params.max_inner_iters:
                raise SinkhornDivergedError(
                    f"rho prox stalled at marginal residual {resid:.3e} > {tol:.3e}",
                    resid, total_iters + it)
        total_iters += it
        D_old = D
        D, d_its, _ = ws.sym_potential(logq, np.exp(logq), init=D, tol=tol, maxit=8)
        total_iters += d_its
        if float(np.abs(np.where(np.isfinite(D) & np.isfinite(D_old),
                                 D - D_old, 0.0)).max()) <= 10.0 * tol * eps:
            break
    return logq, U, V, D, total_iters, resid


def _step_impl(prev: State, params: SchemeParams, carry: _ProxCarry | None,
               diffusion_only: bool, step: float):
    """One implicit step; returns (state, diagnostics, transport, carry)."""
    grid = prev.grid
    ws = get_workspace(grid, params.entropic_eps)
    w = grid.cell_area
    p = prev.rho.field.values * w
    logp = _floored_log(p)
    sub_params = params if step == params.step else params.with_step(step)

    if carry is None:
        D_p, _, _ = ws.sym_potential(logp, p, tol=params.sinkhorn_tol,
                                     maxit=params.max_inner_iters)
        cost_pp = _self_plan_cost(ws, D_p, p)
        carry = _ProxCarry(D_p.copy(), D_p.copy(), D_p, cost_pp)
    D_p = carry.D_end
    cost_pp = carry.cost_end
    U, V, D = carry.V.copy(), carry.V.copy(), carry.D_end.copy()

    E_before = free_energy(prev.rho, prev.phi, params).total
    phi_anchor = prev.phi
    zero_phi = np.zeros(grid.shape())

    best = None  # (F, logq, U, V, D, phi, S_dual, l2, iters)
    F_prev = E_before
    rho_current = prev.rho
    total_iters = 0
    sweeps = 0
    max_sweeps = params.max_inner_iters
    resid = 0.0

    while sweeps < max_sweeps:
        sweeps += 1
        if diffusion_only:
            phi = phi_anchor
            phi_vals = zero_phi
        else:
            phi = phi_substep(rho_current, phi_anchor, sub_params)
            phi_vals = phi.field.values
        logq, U, V, D, iters, resid = _prox(ws, logp, p, phi_vals, params, step, U, V, D)
        total_iters += iters
        q = np.exp(logq)
        S_dual = float(np.sum(np.where(p > 0, p * (U - D_p), 0.0))
                       + np.sum(q * (V - D)))
        l2 = 0.0 if diffusion_only else l2_norm_sq(
            ScalarField(grid, phi.field.values - phi_anchor.field.values))
        rho_current = Density(ScalarField(grid, q / w))
        E_now = free_energy(rho_current, phi, params).total
        F_now = E_now + (S_dual / params.chi + params.tau * l2) / (2.0 * step)
        if best is not None and F_now > best[0] + 1e-13 * (1.0 + abs(best[0])):
            # numerical noise at a fixed point: keep the best iterate
            logq, U, V, D, phi, S_dual, l2 = best[1:8]
            rho_current = Density(ScalarField(grid, np.exp(logq) / w))
            break
        best = (F_now, logq, U, V, D, phi, S_dual, l2, total_iters)
        if sweeps >= 2 and F_prev - F_now < params.inner_tol:
            break
        F_prev = F_now

    logq, U, V, D, phi, S_dual, l2 = best[1:8]
    q = np.exp(logq)
    rho_new = Density(ScalarField(grid, q / w))

    # trailing phi solve so the recorded pair satisfies the phi identity
    # exactly; an exact partial minimisation, so F cannot increase
    if not diffusion_only:
        phi = phi_substep(rho_new, phi_anchor, sub_params)
        l2 = l2_norm_sq(ScalarField(grid, phi.field.values - phi_anchor.field.values))

    mass_drift = abs(float(q.sum()) - 1.0)
    q_norm = q / q.sum()
    rho_new = Density(ScalarField(grid, q_norm / w))

    E_after = free_energy(rho_new, phi, params).total
    F_final = E_after + (S_dual / params.chi + params.tau * l2) / (2.0 * step)
    gap = F_final - E_before
    if gap > params.accept_slack:
        raise StepRejectedError(
            f"one-step dissipation violated by {gap:.3e} (slack {params.accept_slack:.3e}); "
            "check entropic_eps / tolerance configuration", gap)

    # sharp (plan-cost) divergence and the barycentric map, for reporting
    cost_pq, T1, T2, rowm = ws.plan_cost_and_map(U, V, q_norm)
    cost_qq = _self_plan_cost(ws, D, q_norm)
    sharp = cost_pq - 0.5 * (cost_pp + cost_qq)
    marginal_error = float(np.abs(rowm - p).max())
    from .diagnostics import el_residuals  # deferred: diagnostics imports scheme types

    el_rho, el_phi = el_residuals(rho_new, phi, prev.rho, prev.phi,
                                  params, S_dual, step)
    if diffusion_only:
        el_phi = 0.0  # the potential equation is not part of this mode
    transport = TransportResult(
        cost=float(sharp), plan_kind="entropic-potentials",
        marginal_error=marginal_error,
        barycentric_map=_vector_field(grid, T1, T2),
        dual_cost=float(S_dual), iterations=total_iters, grid=grid,
        mu_values=prev.rho.field.values)

    diag = StepDiagnostics(
        wasserstein_sq=float(S_dual), l2_sq=float(l2),
        penalized_value=float(F_final), inner_iterations=total_iters,
        energy_before=float(E_before), energy_after=float(E_after),
        el_residual_rho=float(el_rho), el_residual_phi=float(el_phi),
        sweeps=sweeps, sharp_wasserstein_sq=float(sharp),
        marginal_error=marginal_error, mass_drift=mass_drift,
        boundary_mass=boundary_layer_mass(rho_new))
    state = State(rho_new, phi, prev.time + step)
    carry_out = _ProxCarry(U, V, D, cost_qq)
    return state, diag, transport, carry_out


def _vector_field(grid, x_vals, y_vals):
    from .grid import VectorField

    return VectorField(grid, x_vals, y_vals)


def rho_substep(rho_prev: Density, phi: Potential, params: SchemeParams):
    """Minimiser over rho of the penalised functional at fixed phi.

    Returns the new density and the transport result of the proximal plan.
    """
    if rho_prev.grid != phi.grid:
        raise ValueError("rho_prev and phi live on different grids")
    grid = rho_prev.grid
    ws = get_workspace(grid, params.entropic_eps)
    w = grid.cell_area
    p = rho_prev.field.values * w
    logp = _floored_log(p)
    D_p, _, _ = ws.sym_potential(logp, p, tol=params.sinkhorn_tol,
                                 maxit=params.max_inner_iters)
    cost_pp = _self_plan_cost(ws, D_p, p)
    logq, U, V, D, iters, resid = _prox(ws, logp, p, phi.field.values, params,
                                        params.step, D_p.copy(), D_p.copy(), D_p.copy())
    q = np.exp(logq)
    S_dual = float(np.sum(np.where(p > 0, p * (U - D_p), 0.0)) + np.sum(q * (V - D)))
    mass_drift = abs(float(q.sum()) - 1.0)
    q /= q.sum()
    cost_pq, T1, T2, rowm = ws.plan_cost_and_map(U, V, q)
    cost_qq = _self_plan_cost(ws, D, q)
    sharp = cost_pq - 0.5 * (cost_pp + cost_qq)
    result = TransportResult(
        cost=float(sharp), plan_kind="entropic-potentials",
        marginal_error=float(np.abs(rowm - p).max()),
        barycentric_map=_vector_field(grid, T1, T2),
        dual_cost=float(S_dual), iterations=iters, grid=grid,
        mu_values=rho_prev.field.values)
    return Density(ScalarField(grid, q / w)), result


def jko_step(prev: State, params: SchemeParams):
    """One implicit step of the scheme; returns (state, diagnostics)."""
    state, diag, _, _ = _step_impl(prev, params, None, False, params.step)
    return state, diag


def run(initial: State, params: SchemeParams, horizon: float,
        diffusion_only: bool = False, lower_bound_ctx=None,
        progress=None) -> Trajectory:
    """Iterate the scheme up to time `horizon` (ceil(horizon/step) steps)."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    initial.rho.validate()
    initial.phi.validate()
    from .energy import AnalysisContext, energy_lower_bound

    n_steps = int(math.ceil(horizon / params.step - 1e-12)) if horizon > 0 else 0
    traj = Trajectory([initial], [], params,
                      mode="diffusion_only" if diffusion_only else "full")
    if n_steps == 0:
        return traj
    ctx = lower_bound_ctx
    if ctx is None and params.subcritical:
        ctx = AnalysisContext(initial.grid)
    carry = None
    state = initial
    for k in range(n_steps):
        try:
            state, diag, _, carry = _step_impl(state, params, carry,
                                               diffusion_only, params.step)
        except (StepRejectedError, SinkhornDivergedError) as exc:
            exc.step_index = k
            exc.trajectory = traj
            raise
        if params.subcritical and not diffusion_only:
            lb = energy_lower_bound(state.rho, state.phi, params, ctx)
            diag = replace(diag, lower_bound_holds=lb.holds)
        traj.states.append(state)
        traj.diagnostics.append(diag)
        if diag.boundary_mass > BOUNDARY_MASS_ABORT:
            raise BoundaryMassError(
                f"boundary layer holds {diag.boundary_mass:.2e} mass at t={state.time:g}; "
                "enlarge the box", trajectory=traj)
        if progress is not None:
            progress(k, n_steps, state, diag)
    return traj


def de_giorgi_interpolant(prev_anchor: State, params: SchemeParams,
                          offset: float) -> State:
    """Minimiser of the one-step problem with step size `offset` <= h."""
    if not 0 < offset <= params.step:
        raise ValueError(f"offset must lie in (0, step], got {offset}")
    state, _, _, _ = _step_impl(prev_anchor, params, None, False, offset)
    return state


def boundary_layer_mass(rho: Density, layer: int = BOUNDARY_LAYER_CELLS) -> float:
    """Mass within `layer` cells of the box wall."""
    v = rho.field.values
    inner = v[layer:-layer, layer:-layer]
    return float((v.sum() - inner.sum()) * rho.grid.cell_area)


def metric_d_sq(a: State, b: State, params: SchemeParams) -> float:
    """Squared product metric d^2 = (1/chi) W^2 + tau |phi_a - phi_b|_2^2."""
    if a.grid != b.grid:
        raise ValueError("states live on different grids")
    cost = wasserstein_entropic(a.rho, b.rho, params).cost
    l2 = l2_norm_sq(ScalarField(a.grid, a.phi.field.values - b.phi.field.values))
    return cost / params.chi + params.tau * l2
