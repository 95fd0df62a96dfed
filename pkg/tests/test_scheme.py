import math

import numpy as np
import pytest

from ksflow.energy import Density, Potential, SchemeParams, free_energy
from ksflow.grid import ScalarField, laplacian, l2_norm_sq, make_grid
from ksflow.scheme import (
    State,
    boundary_layer_mass,
    de_giorgi_interpolant,
    helmholtz_neumann_solve,
    jko_step,
    metric_d_sq,
    phi_substep,
    rho_substep,
    run,
)


def gaussian_density(grid, sigma=1.0, center=(0.0, 0.0)):
    X, Y = grid.mesh
    vals = np.exp(-((X - center[0]) ** 2 + (Y - center[1]) ** 2) / (2 * sigma ** 2))
    return Density.normalized(ScalarField(grid, vals))


def zero_potential(grid):
    return Potential(ScalarField(grid, np.zeros(grid.shape())))


def make_params(grid, *, chi=4 * math.pi, tau=1.0, alpha=1.0, step=1e-3, **kw):
    return SchemeParams(chi=chi, tau=tau, alpha=alpha, step=step,
                        entropic_eps=grid.spacing ** 2, **kw)


@pytest.fixture(scope="module")
def grid64():
    return make_grid(8.0, 64)


class TestPhiSubstep:
    def test_zero_source_gives_zero(self, grid64):
        sol = helmholtz_neumann_solve(grid64, 1.0 + 1e3, np.zeros(grid64.shape()))
        assert np.abs(sol).max() == 0.0

    def test_constant_source_constant_mode(self, grid64):
        # rho = c constant: phi = c h / (tau + alpha h), the constant mode
        tau, alpha, h = 1.3, 0.7, 1e-3
        params = SchemeParams(chi=1.0, tau=tau, alpha=alpha, step=h, entropic_eps=1e-2)
        c = 1.0 / (2 * grid64.half_width) ** 2
        rho = Density(ScalarField(grid64, np.full(grid64.shape(), c)))
        phi = phi_substep(rho, zero_potential(grid64), params)
        assert np.allclose(phi.field.values, c * h / (tau + alpha * h), rtol=1e-12)

    def test_elliptic_identity_exact(self, grid64):
        # discrete identity |Lap phi - alpha phi + rho|^2 = tau^2 |phi - phi_prev|^2 / h^2
        params = make_params(grid64, tau=2.0, alpha=0.5, step=2e-3)
        rho = gaussian_density(grid64)
        rng = np.random.default_rng(0)
        phi_prev = Potential(ScalarField(grid64, 0.1 * rng.standard_normal(grid64.shape())))
        phi = phi_substep(rho, phi_prev, params)
        res = laplacian(phi.field).values - params.alpha * phi.field.values \
            + rho.field.values
        lhs = l2_norm_sq(ScalarField(grid64, res))
        dphi = ScalarField(grid64, phi.field.values - phi_prev.field.values)
        rhs = params.tau ** 2 * l2_norm_sq(dphi) / params.step ** 2
        assert lhs == pytest.approx(rhs, rel=1e-8)


class TestRhoSubstep:
    def test_heat_moment_identity(self, grid64):
        # one entropic step at phi = 0 approximates the heat semigroup:
        # the second moment grows by ~4h
        params = make_params(grid64, chi=1.0, step=1e-3)
        rho = gaussian_density(grid64)
        out, result = rho_substep(rho, zero_potential(grid64), params)
        w = grid64.cell_area
        m2_in = float(np.sum(grid64.radius_sq * rho.field.values) * w)
        m2_out = float(np.sum(grid64.radius_sq * out.field.values) * w)
        assert m2_out - m2_in == pytest.approx(4 * params.step, rel=0.10)
        assert result.cost >= 0.0
        assert out.mass == pytest.approx(1.0, abs=1e-12)

    def test_vanishing_step_freezes(self, grid64):
        rho = gaussian_density(grid64)
        costs = []
        for h in (1e-2, 1e-3, 1e-4):
            params = make_params(grid64, chi=1.0, step=h)
            out, result = rho_substep(rho, zero_potential(grid64), params)
            costs.append(result.cost)
        assert costs[0] > costs[1] > costs[2]
        l1 = np.abs(out.field.values - rho.field.values).sum() * grid64.cell_area
        assert l1 < 5e-3

    def test_drift_direction(self, grid64):
        # linear-in-x potential ramp in the bulk: barycenter moves along grad(phi)
        X, _ = grid64.mesh
        window = np.exp(-grid64.radius_sq / (2 * 3.0 ** 2))
        phi = Potential(ScalarField(grid64, 0.5 * X * window))
        params = make_params(grid64, chi=20.0, step=5e-3)
        rho = gaussian_density(grid64)
        out, _ = rho_substep(rho, phi, params)
        w = grid64.cell_area
        bary_before = float(np.sum(X * rho.field.values) * w)
        bary_after = float(np.sum(X * out.field.values) * w)
        assert bary_after > bary_before + 1e-4


class TestJkoStep:
    def test_energy_monotone(self, grid64):
        params = make_params(grid64)
        rho = gaussian_density(grid64)
        phi0 = Potential(ScalarField(
            grid64, helmholtz_neumann_solve(grid64, params.alpha, rho.field.values)))
        state, diag = jko_step(State(rho, phi0, 0.0), params)
        assert diag.energy_after <= diag.energy_before
        assert diag.dissipation_gap <= params.accept_slack

    def test_reminimisation_fixed_point(self, grid64):
        # re-running the one-step problem from the same anchor returns the
        # same state up to the inner tolerance
        params = make_params(grid64)
        rho = gaussian_density(grid64)
        phi0 = Potential(ScalarField(
            grid64, helmholtz_neumann_solve(grid64, params.alpha, rho.field.values)))
        anchor = State(rho, phi0, 0.0)
        s1, _ = jko_step(anchor, params)
        s2, _ = jko_step(anchor, params)
        assert np.abs(s1.rho.field.values - s2.rho.field.values).max() <= 10 * params.inner_tol
        assert np.abs(s1.phi.field.values - s2.phi.field.values).max() <= 10 * params.inner_tol
        # the entropic metric itself has a ~1e-10 noise floor on equal pairs
        assert metric_d_sq(s1, s2, params) <= 1e-9

    def test_penalized_value_bookkeeping(self, grid64):
        params = make_params(grid64)
        rho = gaussian_density(grid64)
        state, diag = jko_step(State(rho, zero_potential(grid64), 0.0), params)
        recomputed = diag.energy_after + (diag.wasserstein_sq / params.chi
                                          + params.tau * diag.l2_sq) / (2 * params.step)
        assert diag.penalized_value == pytest.approx(recomputed, rel=1e-10)

    def test_elliptic_residual_at_step(self, grid64):
        params = make_params(grid64)
        rho = gaussian_density(grid64)
        state, diag = jko_step(State(rho, zero_potential(grid64), 0.0), params)
        assert diag.el_residual_phi <= 1e-8


class TestRun:
    def test_zero_horizon(self, grid64):
        params = make_params(grid64)
        initial = State(gaussian_density(grid64), zero_potential(grid64), 0.0)
        traj = run(initial, params, 0.0)
        assert len(traj.states) == 1
        assert traj.states[0] is initial

    def test_short_subcritical_run(self, grid64):
        params = make_params(grid64)
        initial = State(gaussian_density(grid64), zero_potential(grid64), 0.0)
        traj = run(initial, params, 5e-3)
        assert len(traj.states) == 6
        times = traj.times()
        assert np.allclose(np.diff(times), params.step)
        for s in traj.states:
            assert abs(s.rho.mass - 1.0) <= 1e-7
        for d in traj.diagnostics:
            assert d.dissipation_gap <= params.accept_slack
            assert d.lower_bound_holds

    def test_diffusion_moment_slope(self, grid64):
        params = make_params(grid64, chi=1.0)
        initial = State(gaussian_density(grid64), zero_potential(grid64), 0.0)
        traj = run(initial, params, 0.02, diffusion_only=True)
        w = grid64.cell_area
        m2 = [float(np.sum(grid64.radius_sq * s.rho.field.values) * w)
              for s in traj.states]
        slope = np.polyfit(traj.times(), m2, 1)[0]
        assert slope == pytest.approx(4.0, rel=0.05)

    def test_boundary_abort(self):
        from ksflow.errors import BoundaryMassError

        g = make_grid(3.0, 48)
        rho = gaussian_density(g, sigma=1.4)  # heavy tails for this box
        params = make_params(g, chi=1.0)
        assert boundary_layer_mass(rho) > 1e-4
        with pytest.raises(BoundaryMassError) as exc:
            run(State(rho, zero_potential(g), 0.0), params, 2e-3)
        assert exc.value.trajectory is not None


class TestDeGiorgiInterpolant:
    def test_full_offset_matches_step(self, grid64):
        params = make_params(grid64)
        rho = gaussian_density(grid64)
        anchor = State(rho, zero_potential(grid64), 0.0)
        s_step, _ = jko_step(anchor, params)
        s_interp = de_giorgi_interpolant(anchor, params, params.step)
        d2 = metric_d_sq(s_step, s_interp, params)
        assert d2 <= max((10 * params.inner_tol) ** 2, 1e-9)

    def test_vanishing_offset_freezes(self, grid64):
        params = make_params(grid64)
        rho = gaussian_density(grid64)
        anchor = State(rho, zero_potential(grid64), 0.0)
        h = params.step
        dists = []
        for offset in (h, h / 4, h / 16):
            s = de_giorgi_interpolant(anchor, params, offset)
            dists.append(metric_d_sq(s, anchor, params))
        assert dists[0] > dists[1] > dists[2]

    def test_offset_validation(self, grid64):
        params = make_params(grid64)
        anchor = State(gaussian_density(grid64), zero_potential(grid64), 0.0)
        for bad in (0.0, -1e-3, params.step * 1.5):
            with pytest.raises(ValueError):
                de_giorgi_interpolant(anchor, params, bad)
