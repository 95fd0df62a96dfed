"""Command-line interface.

Subcommands:

* ``run <config.json>``          execute a configured run and export artifacts
* ``check-inequalities``         seeded property suites for the inequality checkers
* ``oracle-compare``             exact LP vs entropic solver on random pairs
* ``diagnose <directory>``       recompute ledgers/observables from stored output
"""

import argparse
import os
import sys
from dataclasses import asdict, dataclass
from types import SimpleNamespace

import numpy as np

from .config import RunConfig, build_initial, load_config
from .diagnostics import discrete_identities, dissipation_ledger, state_observables
from .energy import (
    AnalysisContext,
    Density,
    SchemeParams,
    bhn_check,
    carleman_bound,
    free_energy,
    onofri_check,
    random_bump_field,
    random_density,
)
from .errors import BoundaryMassError, ConfigError, SinkhornDivergedError, StepRejectedError
from .grid import ScalarField, integrate, laplacian, make_grid
from .io import TIMESERIES_COLUMNS, read_snapshot, write_json, write_snapshot, write_timeseries
from .scheme import Trajectory, run as scheme_run
from .transport import wasserstein_entropic, wasserstein_exact

__all__ = ["main", "run_and_export", "check_inequalities", "oracle_compare", "diagnose"]


@dataclass
class ExitReport:
    status: str
    steps_completed: int
    directory: str
    telescoped_ok: bool | None = None
    energy_inequality_gap: float | None = None
    error: str | None = None


def _l2_residual_sq(state, params) -> float:
    res = laplacian(state.phi.field).values - params.alpha * state.phi.field.values \
        + state.rho.field.values
    return float(state.grid.cell_area * (res ** 2).sum())


def _timeseries_row(state, diag, params):
    e = free_energy(state.rho, state.phi, params)
    obs = state_observables(state)
    return {
        "t": state.time,
        "entropy_term": e.entropy_term,
        "interaction_term": e.interaction_term,
        "dirichlet_term": e.dirichlet_term,
        "mass_term": e.mass_term,
        "energy_total": e.total,
        "wasserstein_sq": diag.wasserstein_sq if diag else 0.0,
        "l2_residual_sq": _l2_residual_sq(state, params),
        "mass": obs.mass,
        "moment2": obs.moment2,
        "fisher": obs.fisher,
        "max_density": obs.max_density,
    }


def _identity_payload(traj: Trajectory, sample_count: int = 8):
    """Identity reports at evenly spaced steps, from recorded diagnostics."""
    if not traj.diagnostics:
        return []
    idx = np.unique(np.linspace(0, len(traj.diagnostics) - 1,
                                min(sample_count, len(traj.diagnostics))).astype(int))
    out = []
    for k in idx:
        curr, prev = traj.states[k + 1], traj.states[k]
        diag = traj.diagnostics[k]
        shim = SimpleNamespace(cost=diag.sharp_wasserstein_sq,
                               dual_cost=diag.wasserstein_sq)
        rep = discrete_identities(curr, prev, traj.params, shim)
        out.append({"step": int(k), **asdict(rep),
                    "w2_relative_gap": rep.w2_relative_gap,
                    "l2_relative_gap": rep.l2_relative_gap})
    return out


def run_and_export(config: RunConfig) -> ExitReport:
    """Execute the configured run; write time series, snapshots, and report."""
    outdir = config.output_directory
    os.makedirs(outdir, exist_ok=True)
    initial = build_initial(config)
    params = config.params
    error = None
    try:
        traj = scheme_run(initial, params, config.horizon,
                          diffusion_only=(config.mode == "diffusion_only"))
        status = "ok"
    except (StepRejectedError, SinkhornDivergedError, BoundaryMassError) as exc:
        traj = getattr(exc, "trajectory", None) or Trajectory([initial], [], params)
        status = "failed"
        error = str(exc)

    rows = [_timeseries_row(initial, None, params)]
    for state, diag in zip(traj.states[1:], traj.diagnostics):
        rows.append(_timeseries_row(state, diag, params))
    if "csv" in config.formats:
        write_timeseries(os.path.join(outdir, "timeseries.csv"), rows)

    last = len(traj.states) - 1
    for k, state in enumerate(traj.states):
        if k % config.snapshot_stride == 0 or k == last:
            write_snapshot(os.path.join(outdir, f"density_{k:06d}.txt"),
                           state.rho.field, state.time)
            write_snapshot(os.path.join(outdir, f"potential_{k:06d}.txt"),
                           state.phi.field, state.time)

    ledger = dissipation_ledger(traj)
    if "json" in config.formats:
        payload = {
            "status": status,
            "error": error,
            "mode": traj.mode,
            "params": asdict(params),
            "grid": {"half_width": config.grid.half_width,
                     "cells_per_axis": config.grid.cells_per_axis},
            "seed": config.seed,
            "ledger": {
                "rows": [asdict(r) for r in ledger.rows],
                "telescoped_ok": ledger.telescoped_ok,
                "energy_inequality_gap": ledger.energy_inequality_gap,
            },
            "identity_reports": _identity_payload(traj),
            "per_step": [
                {"step": k, "dissipation_gap": d.dissipation_gap,
                 "lower_bound_holds": d.lower_bound_holds,
                 "el_residual_phi": d.el_residual_phi,
                 "inner_iterations": d.inner_iterations,
                 "sweeps": d.sweeps}
                for k, d in enumerate(traj.diagnostics)
            ],
        }
        write_json(os.path.join(outdir, "report.json"), payload)

    report = ExitReport(status=status, steps_completed=len(traj.diagnostics),
                        directory=outdir, telescoped_ok=ledger.telescoped_ok,
                        energy_inequality_gap=ledger.energy_inequality_gap,
                        error=error)
    write_json(os.path.join(outdir, "exit_report.json"), asdict(report))
    return report


def check_inequalities(seed: int, count: int, half_width: float = 16.0,
                       cells: int = 256, verbose=print):
    """Seeded randomized suites for the Onofri, Carleman, and BHN checkers."""
    grid = make_grid(half_width, cells)
    ctx = AnalysisContext(grid)
    rng = np.random.default_rng(seed)
    failures = {"onofri": 0, "carleman": 0, "bhn": 0}
    for _ in range(count):
        psi = random_bump_field(grid, rng)
        if not onofri_check(psi, ctx).holds:
            failures["onofri"] += 1
        rho = random_density(grid, rng)
        if not carleman_bound(rho, ctx).holds:
            failures["carleman"] += 1
        eps = float(rng.uniform(0.25, 1.0))
        if not bhn_check(rho, eps).holds:
            failures["bhn"] += 1
    for name, bad in failures.items():
        verbose(f"{name}: {count - bad}/{count} hold")
    return failures


def oracle_compare(grid_n: int, pairs: int, seed: int = 0,
                   half_width: float = 8.0, verbose=print):
    """Exact LP vs debiased entropic cost on random density pairs."""
    grid = make_grid(half_width, grid_n)
    eps = 1e-3 * (2.0 * half_width) ** 2
    params = SchemeParams(chi=1.0, tau=1.0, alpha=1.0, step=1e-3,
                          entropic_eps=eps, sinkhorn_tol=1e-9,
                          max_inner_iters=20000)
    rng = np.random.default_rng(seed)
    rel_errors = []
    for k in range(pairs):
        mu = _separated_pair_density(grid, rng, side=-1)
        nu = _separated_pair_density(grid, rng, side=+1)
        exact = wasserstein_exact(mu, nu)
        ent = wasserstein_entropic(mu, nu, params)
        rel = abs(ent.cost - exact.cost) / exact.cost
        rel_errors.append(rel)
        verbose(f"pair {k}: exact={exact.cost:.6f} entropic={ent.cost:.6f} rel={rel:.4%}")
    verbose(f"max relative error: {max(rel_errors):.4%}")
    return rel_errors


def _separated_pair_density(grid, rng, side: int) -> Density:
    """Random bump cluster biased to one half of the box.

    Pairs drawn with opposite sides keep the exact cost well above the
    entropic bias floor, so the 1%-agreement check is meaningful.
    """
    X, Y = grid.mesh
    L = grid.half_width
    vals = np.zeros(grid.shape())
    for _ in range(int(rng.integers(2, 5))):
        cx = side * rng.uniform(0.15 * L, 0.5 * L)
        cy = rng.uniform(-0.5 * L, 0.5 * L)
        s = rng.uniform(0.08 * L, 0.25 * L)
        amp = rng.uniform(0.3, 1.0)
        vals += amp * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * s * s))
    vals = vals ** 2 + 1e-6 * vals.max() ** 2
    return Density.normalized(ScalarField(grid, vals))


def diagnose(directory: str, verbose=print):
    """Recompute ledgers and observables from a run directory."""
    ts_path = os.path.join(directory, "timeseries.csv")
    import csv as _csv

    rows = []
    if os.path.exists(ts_path):
        with open(ts_path) as fh:
            rows = [dict(zip(TIMESERIES_COLUMNS, map(float, r)))
                    for r in list(_csv.reader(fh))[1:]]
    snapshots = sorted(f for f in os.listdir(directory)
                       if f.startswith("density_") and f.endswith(".txt"))
    observables = []
    for name in snapshots:
        field, time = read_snapshot(os.path.join(directory, name))
        rho = Density(field)
        w = field.grid.cell_area
        observables.append({
            "snapshot": name, "time": time,
            "mass": integrate(field),
            "moment2": float(w * np.sum(field.grid.radius_sq * field.values)),
            "max_density": float(field.values.max()),
        })
    payload = {"directory": directory, "observables": observables}
    if rows:
        # coarse dissipation check from the stored energy column
        e = [r["energy_total"] for r in rows]
        monotone_violations = sum(1 for a, b in zip(e, e[1:]) if b > a + 1e-9)
        payload["energy_monotone_violations"] = monotone_violations
        payload["energy_drop"] = e[0] - e[-1]
        verbose(f"energy drop {e[0] - e[-1]:.6g}, "
                f"monotone violations {monotone_violations}/{len(e) - 1}")
    out = os.path.join(directory, "diagnose.json")
    write_json(out, payload)
    verbose(f"wrote {out}")
    return payload


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ksflow",
                                     description="Keller-Segel variational solver")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a configured run")
    p_run.add_argument("config", help="path to the JSON run configuration")

    p_chk = sub.add_parser("check-inequalities", help="randomized inequality suites")
    p_chk.add_argument("--seed", type=int, default=0)
    p_chk.add_argument("--count", type=int, default=100)
    p_chk.add_argument("--half-width", type=float, default=16.0)
    p_chk.add_argument("--cells", type=int, default=256)

    p_cmp = sub.add_parser("oracle-compare", help="exact vs entropic transport")
    p_cmp.add_argument("--grid", type=int, default=16)
    p_cmp.add_argument("--pairs", type=int, default=5)
    p_cmp.add_argument("--seed", type=int, default=0)

    p_diag = sub.add_parser("diagnose", help="recompute ledgers from a run directory")
    p_diag.add_argument("directory")

    args = parser.parse_args(argv)
    if args.command == "run":
        try:
            config = load_config(args.config)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        report = run_and_export(config)
        print(f"status={report.status} steps={report.steps_completed} "
              f"dir={report.directory}")
        if report.error:
            print(report.error, file=sys.stderr)
        return 0 if report.status == "ok" else 1
    if args.command == "check-inequalities":
        failures = check_inequalities(args.seed, args.count, args.half_width, args.cells)
        return 0 if not any(failures.values()) else 1
    if args.command == "oracle-compare":
        errors = oracle_compare(args.grid, args.pairs, args.seed)
        return 0 if max(errors) <= 0.01 else 1
    if args.command == "diagnose":
        diagnose(args.directory)
        return 0
    return 2  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
