"""Run configuration: strict JSON parsing, initial-condition presets, and
the phi0 policy.

Config schema (all keys optional unless marked; unknown keys are fatal):

    {
      "grid":    {"half_width": 8.0, "cells_per_axis": 128},      (required)
      "params":  {"chi": 12.566, "tau": 1.0, "alpha": 1.0,        (required)
                  "step": 1e-3,
                  "entropic_eps": 0.015625,        # default: coupling rule
                  "inner_tol": 1e-7, "sinkhorn_tol": 1e-7,
                  "max_inner_iters": 2000},
      "horizon": 0.25,                                            (required)
      "initial": {"preset": "gaussian", "center": [0,0], "sigma": 1.0},
      "phi0":    {"policy": "elliptic"},     # zero | elliptic | from_file
      "output":  {"directory": "out", "snapshot_stride": 50,
                  "formats": ["csv", "json"]},
      "seed":    0,
      "mode":    "full"                      # full | diffusion_only
    }

Presets: gaussian(center, sigma), two_bumps(centers, sigmas),
ring(radius, width), uniform_disk(radius).
"""

import json
from dataclasses import dataclass

import numpy as np

from .energy import Density, Potential, SchemeParams, default_entropic_eps
from .errors import ConfigError
from .grid import Grid2D, ScalarField, make_grid
from .scheme import BOUNDARY_LAYER_CELLS, State, helmholtz_neumann_solve

__all__ = ["RunConfig", "load_config", "parse_config", "build_initial"]

#: mass allowed in the boundary frame of the initial condition
INITIAL_BOUNDARY_MASS = 1e-6


@dataclass(frozen=True)
class RunConfig:
    grid: Grid2D
    params: SchemeParams
    horizon: float
    preset: str
    preset_args: dict
    phi0_policy: str
    phi0_path: str | None
    output_directory: str
    snapshot_stride: int
    formats: tuple
    seed: int
    mode: str


_PRESETS = {
    "gaussian": {"center", "sigma"},
    "two_bumps": {"centers", "sigmas"},
    "ring": {"radius", "width"},
    "uniform_disk": {"radius"},
}


def _check_keys(obj: dict, allowed: set, where: str):
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def _need(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"missing required key '{key}' in {where}")
    return obj[key]


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(doc, {"grid", "params", "horizon", "initial", "phi0",
                      "output", "seed", "mode"}, "config root")

    gdoc = _need(doc, "grid", "config root")
    _check_keys(gdoc, {"half_width", "cells_per_axis"}, "grid")
    try:
        grid = make_grid(float(_need(gdoc, "half_width", "grid")),
                         int(_need(gdoc, "cells_per_axis", "grid")))
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc

    pdoc = dict(_need(doc, "params", "config root"))
    _check_keys(pdoc, {"chi", "tau", "alpha", "step", "entropic_eps",
                       "inner_tol", "sinkhorn_tol", "max_inner_iters"}, "params")
    step = float(_need(pdoc, "step", "params"))
    if "entropic_eps" not in pdoc:
        pdoc["entropic_eps"] = default_entropic_eps(grid, step)
    try:
        params = SchemeParams(
            chi=float(_need(pdoc, "chi", "params")),
            tau=float(_need(pdoc, "tau", "params")),
            alpha=float(_need(pdoc, "alpha", "params")),
            step=step,
            entropic_eps=float(pdoc["entropic_eps"]),
            inner_tol=float(pdoc.get("inner_tol", 1e-7)),
            sinkhorn_tol=float(pdoc.get("sinkhorn_tol", 1e-7)),
            max_inner_iters=int(pdoc.get("max_inner_iters", 2000)))
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from exc

    horizon = float(_need(doc, "horizon", "config root"))
    if horizon < 0:
        raise ConfigError("horizon: must be nonnegative")

    idoc = dict(doc.get("initial", {"preset": "gaussian"}))
    preset = idoc.pop("preset", "gaussian")
    if preset not in _PRESETS:
        raise ConfigError(f"initial.preset: unknown preset '{preset}'")
    _check_keys(idoc, _PRESETS[preset], f"initial ({preset})")
    preset_args = _validate_preset(preset, idoc, grid)

    phidoc = doc.get("phi0", {"policy": "zero"})
    _check_keys(phidoc, {"policy", "path"}, "phi0")
    policy = phidoc.get("policy", "zero")
    if policy not in ("zero", "elliptic", "from_file"):
        raise ConfigError(f"phi0.policy: unknown policy '{policy}'")
    phi0_path = phidoc.get("path")
    if policy == "from_file" and not phi0_path:
        raise ConfigError("phi0.path: required for policy 'from_file'")

    odoc = doc.get("output", {})
    _check_keys(odoc, {"directory", "snapshot_stride", "formats"}, "output")
    stride = int(odoc.get("snapshot_stride", 1))
    if stride < 1:
        raise ConfigError("output.snapshot_stride: must be >= 1")
    formats = tuple(odoc.get("formats", ["csv", "json"]))
    for f in formats:
        if f not in ("csv", "json"):
            raise ConfigError(f"output.formats: unknown format '{f}'")

    mode = doc.get("mode", "full")
    if mode not in ("full", "diffusion_only"):
        raise ConfigError(f"mode: must be 'full' or 'diffusion_only', got '{mode}'")

    return RunConfig(grid=grid, params=params, horizon=horizon, preset=preset,
                     preset_args=preset_args, phi0_policy=policy,
                     phi0_path=phi0_path,
                     output_directory=odoc.get("directory", "ksflow-out"),
                     snapshot_stride=stride, formats=formats,
                     seed=int(doc.get("seed", 0)), mode=mode)


def _validate_preset(preset: str, args: dict, grid: Grid2D) -> dict:
    L = grid.half_width
    out = dict(args)
    if preset == "gaussian":
        out.setdefault("center", [0.0, 0.0])
        out.setdefault("sigma", 1.0)
        sigma = float(out["sigma"])
        cx, cy = (float(v) for v in out["center"])
        if sigma <= 0:
            raise ConfigError("initial.sigma: must be positive")
        if sigma >= L:
            raise ConfigError("initial.sigma: larger than half_width, mass would touch the boundary")
        if max(abs(cx), abs(cy)) + 4 * sigma > L:
            raise ConfigError("initial.center: gaussian tail reaches the boundary frame")
    elif preset == "two_bumps":
        out.setdefault("centers", [[-1.5, 0.0], [1.5, 0.0]])
        out.setdefault("sigmas", [0.5, 0.5])
        if len(out["centers"]) != 2 or len(out["sigmas"]) != 2:
            raise ConfigError("initial.centers/sigmas: two bumps require two entries each")
        for (cx, cy), s in zip(out["centers"], out["sigmas"]):
            if float(s) <= 0:
                raise ConfigError("initial.sigmas: must be positive")
            if max(abs(float(cx)), abs(float(cy))) + 4 * float(s) > L:
                raise ConfigError("initial.centers: bump tail reaches the boundary frame")
    elif preset == "ring":
        out.setdefault("radius", L / 4)
        out.setdefault("width", L / 16)
        if float(out["radius"]) <= 0 or float(out["width"]) <= 0:
            raise ConfigError("initial.radius/width: must be positive")
        if float(out["radius"]) + 4 * float(out["width"]) > L:
            raise ConfigError("initial.radius: ring reaches the boundary frame")
    elif preset == "uniform_disk":
        out.setdefault("radius", L / 4)
        if float(out["radius"]) <= 0:
            raise ConfigError("initial.radius: must be positive")
        if float(out["radius"]) >= L - 2 * grid.spacing:
            raise ConfigError("initial.radius: disk reaches the boundary frame")
    return out


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}: parse error at line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from exc
    return parse_config(doc)


def _preset_density(config: RunConfig) -> Density:
    grid = config.grid
    X, Y = grid.mesh
    args = config.preset_args
    if config.preset == "gaussian":
        cx, cy = (float(v) for v in args["center"])
        s = float(args["sigma"])
        vals = np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * s * s))
    elif config.preset == "two_bumps":
        vals = np.zeros(grid.shape())
        for (cx, cy), s in zip(args["centers"], args["sigmas"]):
            cx, cy, s = float(cx), float(cy), float(s)
            vals += np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * s * s))
    elif config.preset == "ring":
        r = np.sqrt(grid.radius_sq)
        vals = np.exp(-((r - float(args["radius"])) ** 2) / (2 * float(args["width"]) ** 2))
    elif config.preset == "uniform_disk":
        vals = (grid.radius_sq <= float(args["radius"]) ** 2).astype(float)
    else:  # pragma: no cover - parse_config guards this
        raise ConfigError(f"unknown preset {config.preset}")
    return Density.normalized(ScalarField(grid, vals))


def build_initial(config: RunConfig) -> State:
    """Discretise the preset, normalise, apply the phi0 policy."""
    rho = _preset_density(config)
    from .scheme import boundary_layer_mass

    frame_mass = boundary_layer_mass(rho, BOUNDARY_LAYER_CELLS)
    if frame_mass > INITIAL_BOUNDARY_MASS:
        raise ConfigError(
            f"initial: boundary frame carries {frame_mass:.2e} mass "
            f"(> {INITIAL_BOUNDARY_MASS:g}); increase half_width")
    grid = config.grid
    if config.phi0_policy == "zero" or config.mode == "diffusion_only":
        phi = Potential(ScalarField(grid, np.zeros(grid.shape())))
    elif config.phi0_policy == "elliptic":
        sol = helmholtz_neumann_solve(grid, config.params.alpha, rho.field.values)
        phi = Potential(ScalarField(grid, sol))
    else:
        from .io import read_snapshot

        field, _ = read_snapshot(config.phi0_path, grid)
        phi = Potential(field)
    state = State(rho.validate(), phi.validate(), 0.0)
    return state
