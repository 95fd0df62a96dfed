#!/usr/bin/env python3
"""Benchmark the numba kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--sizes 64,128,256] [--reps 20]

Covers the two hot paths: the log-domain softmin pass (dominates the
transport solver) and one full proximal step of the scheme.
"""

import argparse
import time

import numpy as np


def bench_softmin(sizes, reps):
    from ksflow._kernels_numba import softmin_pass as k_numba
    from ksflow._kernels_numpy import softmin_pass as k_numpy

    rng = np.random.default_rng(0)
    print(f"{'n':>5} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for n in sizes:
        xs = np.linspace(-8, 8, n)
        M = -(xs[:, None] - xs[None, :]) ** 2 / (16.0 / n) ** 2
        F = 5 * rng.standard_normal((n, n))
        k_numba(M, F)  # compile
        t0 = time.perf_counter()
        for _ in range(reps):
            a = k_numba(M, F)
        t_numba = (time.perf_counter() - t0) / reps
        t0 = time.perf_counter()
        for _ in range(reps):
            b = k_numpy(M, F)
        t_numpy = (time.perf_counter() - t0) / reps
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
        print(f"{n:>5} {t_numba * 1e3:>10.2f} {t_numpy * 1e3:>10.2f} "
              f"{t_numpy / t_numba:>8.2f}x")


def bench_step(n, reps):
    import math
    import os
    import subprocess
    import sys

    script = f"""
import math, time
import numpy as np
from ksflow.energy import Density, Potential, SchemeParams
from ksflow.grid import make_grid, ScalarField
from ksflow.scheme import State, run

g = make_grid(8.0, {n})
rho = Density.normalized(ScalarField(g, np.exp(-g.radius_sq / 2)))
phi = Potential(ScalarField(g, np.zeros(g.shape())))
params = SchemeParams(chi=4 * math.pi, tau=1.0, alpha=1.0, step=1e-3,
                      entropic_eps=g.spacing ** 2)
run(State(rho, phi, 0.0), params, 2e-3)  # warm up + compile
t0 = time.perf_counter()
run(State(rho, phi, 0.0), params, {reps} * 1e-3)
print((time.perf_counter() - t0) / {reps})
"""
    print(f"\nfull scheme step at n={n} ({reps} steps):")
    for backend in ("numba", "numpy"):
        env = dict(os.environ, KSFLOW_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", script], env=env,
                             capture_output=True, text=True)
        if out.returncode != 0:
            print(f"  {backend}: FAILED\n{out.stderr}")
            continue
        per_step = float(out.stdout.strip().splitlines()[-1])
        print(f"  {backend}: {per_step * 1e3:.1f} ms/step")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--sizes", default="64,128,256")
    parser.add_argument("--reps", type=int, default=20)
    parser.add_argument("--step-n", type=int, default=64)
    parser.add_argument("--step-reps", type=int, default=10)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]
    bench_softmin(sizes, args.reps)
    bench_step(args.step_n, args.step_reps)


if __name__ == "__main__":
    main()
