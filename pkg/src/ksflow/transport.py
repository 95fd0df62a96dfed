"""Squared Wasserstein distances between grid densities.

Two routes, deliberately independent of each other:

* ``wasserstein_exact`` solves the Kantorovich linear program with the
  HiGHS simplex (desk-scale oracle, hard cap at 1024 cells);
* ``wasserstein_entropic`` runs entropy-regularised scaling iterations with
  the separable |x-y|^2 kernel and reports the debiased (self-divergence
  subtracted) transport cost.

The entropic engine works on *mass* fields (cell value = density * cell
area) and keeps dual potentials in cost units.  Below the blur threshold
``eps < 1e-2 (2L)^2`` everything runs in the log domain; above it a scaled
(linear-domain) path is used and kernel underflow raises
:class:`KernelUnderflowError` instead of returning garbage.

The debiased cost reported as ``cost`` is the sharp divergence

    <C, plan(p,q)> - 1/2 <C, plan(p,p)> - 1/2 <C, plan(q,q)>,

which tracks the exact squared distance much closer than the dual form at
moderate eps; the dual-form divergence (used by the scheme's dissipation
bookkeeping, where its minimisation guarantee matters) is kept alongside.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix

from .backend import softmin_pass
from .energy import Density, SchemeParams
from .errors import CapacityError, KernelUnderflowError, SinkhornDivergedError
from .grid import Grid2D, VectorField

__all__ = [
    "TransportResult",
    "wasserstein_exact",
    "wasserstein_entropic",
    "barycentric_map",
    "EntropicWorkspace",
    "EXACT_CELL_CAP",
    "LOG_DOMAIN_BLUR_FACTOR",
]

EXACT_CELL_CAP = 1024

#: run in log domain once eps < this factor * (2L)^2
LOG_DOMAIN_BLUR_FACTOR = 1e-2

#: cells below this fraction of the max mass are dropped from the LP support
SUPPORT_FLOOR = 1e-14

NEG_INF = -np.inf


@dataclass
class TransportResult:
    cost: float
    plan_kind: str  # "exact-plan" | "entropic-potentials"
    marginal_error: float
    barycentric_map: VectorField
    #: dual-form debiased divergence (entropic route only; equals cost for exact)
    dual_cost: float = 0.0
    iterations: int = 0
    #: grid the marginals lived on, kept for validation
    grid: Grid2D | None = None
    #: first marginal, kept so barycentric_map() can validate its argument
    mu_values: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# exact route
# ---------------------------------------------------------------------------


def wasserstein_exact(mu: Density, nu: Density) -> TransportResult:
    """Exact squared Wasserstein distance via the transport LP."""
    if mu.grid != nu.grid:
        raise ValueError("marginals live on different grids")
    grid = mu.grid
    n_cells = grid.cells_per_axis ** 2
    if n_cells > EXACT_CELL_CAP:
        raise CapacityError(
            f"exact transport capped at {EXACT_CELL_CAP} cells, grid has {n_cells}"
        )
    w = grid.cell_area
    p = (mu.field.values * w).ravel()
    q = (nu.field.values * w).ravel()
    X, Y = grid.mesh
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)

    # One column constraint is redundant (supplies balance) and must be
    # dropped: HiGHS presolve mis-declares the rank-deficient system
    # infeasible.  HiGHS also cannot balance supplies spanning much more
    # than ~8 orders of magnitude, so the support floor is raised until the
    # LP solves, with the dropped tail mass folded into marginal_error.
    res = sup_p = sup_q = a = b = None
    for floor in (SUPPORT_FLOOR, 1e-12, 1e-10, 1e-8, 1e-6):
        sup_p = np.flatnonzero(p > floor * p.max())
        sup_q = np.flatnonzero(q > floor * q.max())
        a = p[sup_p] / p[sup_p].sum()
        b = q[sup_q] / q[sup_q].sum()
        b = b * (a.sum() / b.sum())
        diff = pts[sup_p][:, None, :] - pts[sup_q][None, :, :]
        C = (diff ** 2).sum(axis=2)
        m_, n_ = len(a), len(b)
        col_of_var = np.tile(np.arange(n_), m_)
        keep = col_of_var < n_ - 1
        rows = np.concatenate([np.repeat(np.arange(m_), n_),
                               m_ + col_of_var[keep]])
        cols = np.concatenate([np.arange(m_ * n_), np.arange(m_ * n_)[keep]])
        vals = np.ones(len(rows))
        A = coo_matrix((vals, (rows, cols)), shape=(m_ + n_ - 1, m_ * n_))
        b_eq = np.concatenate([a, b[:-1]])
        res = linprog(C.ravel(), A_eq=A, b_eq=b_eq, bounds=(0, None), method="highs")
        if res.status != 0:
            res = linprog(C.ravel(), A_eq=A, b_eq=b_eq, bounds=(0, None),
                          method="highs", options={"presolve": False})
        if res.status == 0:
            break
    if res is None or res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = res.x.reshape(len(a), len(b))
    cost = float(res.fun)

    row_err = np.abs(plan.sum(axis=1) - a).max()
    col_err = np.abs(plan.sum(axis=0) - b).max()
    dropped = 0.0
    if len(sup_p) < len(p):
        dropped = max(dropped, float(np.delete(p, sup_p).sum()))
    if len(sup_q) < len(q):
        dropped = max(dropped, float(np.delete(q, sup_q).sum()))
    marginal_error = float(max(row_err, col_err, dropped))

    # barycentric image of every support cell; identity elsewhere
    tx = X.ravel().copy()
    ty = Y.ravel().copy()
    targets = pts[sup_q]
    mass = plan.sum(axis=1)
    pos = mass > 0
    tx[sup_p[pos]] = (plan @ targets[:, 0])[pos] / mass[pos]
    ty[sup_p[pos]] = (plan @ targets[:, 1])[pos] / mass[pos]
    bmap = VectorField(grid, tx.reshape(grid.shape()), ty.reshape(grid.shape()))

    return TransportResult(cost=cost, plan_kind="exact-plan",
                           marginal_error=marginal_error, barycentric_map=bmap,
                           dual_cost=cost, grid=grid, mu_values=mu.field.values)


# ---------------------------------------------------------------------------
# entropic route
# ---------------------------------------------------------------------------


class EntropicWorkspace:
    """Separable kernel operations for one (grid, eps) pair.

    Mass fields are (n, n) arrays; log-mass fields use -inf for empty cells.
    Potentials are (n, n) arrays in cost units.
    """

    def __init__(self, grid: Grid2D, eps: float):
        if not eps > 0:
            raise ValueError("entropic_eps must be positive")
        self.grid = grid
        self.eps = eps
        ax = grid.axis
        self._dist_sq = (ax[:, None] - ax[None, :]) ** 2
        self._M = {}
        self.diameter_sq = 2.0 * (2.0 * grid.half_width) ** 2
        self.log_domain = eps < LOG_DOMAIN_BLUR_FACTOR * (2.0 * grid.half_width) ** 2

    def _axis_matrix(self, eps: float) -> np.ndarray:
        M = self._M.get(eps)
        if M is None:
            M = -self._dist_sq / eps
            self._M[eps] = M
        return M

    def kern(self, F: np.ndarray, eps: float | None = None) -> np.ndarray:
        """out[k,j] = logsumexp_{a,b}( -(|x_k - x_a|^2 + |y_j - y_b|^2)/eps + F[a,b] )."""
        M = self._axis_matrix(self.eps if eps is None else eps)
        t = softmin_pass(M, np.ascontiguousarray(F.T))
        return softmin_pass(M, np.ascontiguousarray(t.T))

    def smooth(self, potential: np.ndarray, eps: float | None = None) -> np.ndarray:
        """eps * kern(potential/eps); the soft C-transform building block."""
        e = self.eps if eps is None else eps
        return e * self.kern(potential / e, e)

    # -- linear-domain twin (large eps only) --------------------------------

    def kern_linear(self, F: np.ndarray, eps: float | None = None) -> np.ndarray:
        e = self.eps if eps is None else eps
        K = np.exp(-self._dist_sq / e)
        return K @ F @ K.T

    # -- self potential ------------------------------------------------------

    def sym_potential(self, logm: np.ndarray, mass: np.ndarray,
                      init: np.ndarray | None = None, tol: float = 1e-9,
                      maxit: int = 500) -> tuple[np.ndarray, int, float]:
        """Symmetric dual potential of OT_eps(m, m): D = eps log m - smooth(D)."""
        eps = self.eps
        D = np.zeros_like(logm) if init is None else init.copy()
        resid = math.inf
        for it in range(maxit):
            target = eps * logm - self.smooth(D)
            target[logm == NEG_INF] = NEG_INF
            step = np.where(np.isfinite(target) & np.isfinite(D), target - D, 0.0)
            resid = float(np.sum(mass * np.abs(np.expm1(np.clip(step / eps, -60.0, 60.0)))))
            D = _half_step(D, target)
            if resid <= tol:
                return D, it + 1, resid
        return D, maxit, resid

    # -- balanced duals for a pair -------------------------------------------

    def balanced_duals(self, logp, logq, p, q, tol, maxit,
                       U0=None, V0=None, anneal=True):
        """Counting-convention dual potentials for OT_eps(p, q).

        Symmetric-averaged updates with an annealed cold start; ends with a
        sequential pair of full updates so the column marginal is exact.
        Returns (U, V, iterations, l1_residual).
        """
        eps = self.eps
        U = np.zeros_like(logp) if U0 is None else U0.copy()
        V = np.zeros_like(logq) if V0 is None else V0.copy()
        if anneal and U0 is None:
            e = self.diameter_sq
            while e > eps * 1.000001:
                for _ in range(2):
                    Un = e * logp - self.smooth(V, e)
                    Vn = e * logq - self.smooth(U, e)
                    U = 0.5 * (U + Un)
                    V = 0.5 * (V + Vn)
                e = max(0.5 * e, eps)
                if e == eps:
                    break
        resid = math.inf
        it = 0
        for it in range(maxit):
            Un = np.where(logp == NEG_INF, NEG_INF, eps * logp - self.smooth(V))
            Vn = np.where(logq == NEG_INF, NEG_INF, eps * logq - self.smooth(U))
            resid = self._pair_residual(p, U, Un, eps) + self._pair_residual(q, V, Vn, eps)
            U = _half_step(U, Un)
            V = _half_step(V, Vn)
            if resid <= tol and it >= 2:
                break
        # land on a plan whose column marginal is exact
        U = np.where(logp == NEG_INF, NEG_INF, eps * logp - self.smooth(V))
        V = np.where(logq == NEG_INF, NEG_INF, eps * logq - self.smooth(U))
        return U, V, it + 1, resid

    @staticmethod
    def _pair_residual(mass, old, new, eps):
        step = np.where(np.isfinite(new) | np.isfinite(old), old - new, 0.0)
        return float(np.sum(mass * np.abs(np.expm1(np.clip(step / eps, -60.0, 60.0)))))

    # -- plan functionals ------------------------------------------------------

    def row_marginal(self, U, V):
        """Row sums of the plan exp((U + V - C)/eps)."""
        eps = self.eps
        out = np.exp(U / eps + self.kern(V / eps))
        out[U == NEG_INF] = 0.0
        return out

    def plan_cost_and_map(self, U, V, q):
        """Transport cost <C, plan> and the barycentric image of the rows.

        Returns (cost, T1, T2, row_marginal); T is the plan-average target
        point per row cell, with the cell centre kept where the row is empty.
        """
        eps = self.eps
        grid = self.grid
        X, Y = grid.mesh
        rowm = self.row_marginal(U, V)
        shift = grid.axis.min() - 1.0
        nums = []
        for coord in (X, Y):
            Wf = V / eps + np.log(coord - shift)
            Tlog = self.kern(Wf)
            num = np.exp(Tlog + U / eps)
            num[U == NEG_INF] = 0.0
            nums.append(num + rowm * shift)
        second_moment_p = float(np.sum(rowm * (X ** 2 + Y ** 2)))
        second_moment_q = float(np.sum(q * (X ** 2 + Y ** 2)))
        cross = float(np.sum(X * nums[0] + Y * nums[1]))
        cost = second_moment_p + second_moment_q - 2.0 * cross
        pos = rowm > 0
        T1 = np.where(pos, nums[0] / np.where(pos, rowm, 1.0), X)
        T2 = np.where(pos, nums[1] / np.where(pos, rowm, 1.0), Y)
        return cost, T1, T2, rowm


def _half_step(old, new):
    """Averaged potential update; empty cells (target -inf) stay at -inf."""
    return np.where(new == NEG_INF, NEG_INF,
                    np.where(old == NEG_INF, new, 0.5 * (old + new)))


_WORKSPACES: dict[tuple, EntropicWorkspace] = {}


def get_workspace(grid: Grid2D, eps: float) -> EntropicWorkspace:
    key = (grid.half_width, grid.cells_per_axis, eps)
    ws = _WORKSPACES.get(key)
    if ws is None:
        ws = EntropicWorkspace(grid, eps)
        if len(_WORKSPACES) > 8:
            _WORKSPACES.clear()
        _WORKSPACES[key] = ws
    return ws


def log_mass(density: Density) -> tuple[np.ndarray, np.ndarray]:
    m = density.field.values * density.grid.cell_area
    logm = np.full(m.shape, NEG_INF)
    pos = m > 0
    logm[pos] = np.log(m[pos])
    return m, logm


def _self_cost(ws: EntropicWorkspace, logm, m, init, tol, maxit):
    D, its, resid = ws.sym_potential(logm, m, init=init, tol=tol, maxit=maxit)
    cost, _, _, _ = ws.plan_cost_and_map(D, D, m)
    return D, cost, its, resid


def _linear_domain_cost(ws, p, q, tol, maxit):
    """Scaled-domain Sinkhorn for large eps; raises on kernel underflow."""
    eps = ws.eps
    K1 = np.exp(-ws._dist_sq / eps)
    if K1.min() == 0.0:
        raise KernelUnderflowError(
            f"kernel underflow at eps={eps:g}; use log-domain mode")

    def apply(B):
        return K1 @ B @ K1.T

    def solve_pair(a, b):
        u = np.ones_like(a)
        it = 0
        resid = math.inf
        for it in range(maxit):
            Ku = apply(u)
            v = np.divide(b, Ku, out=np.zeros_like(b), where=Ku > 0)
            Kv = apply(v)
            u_new = np.divide(a, Kv, out=np.zeros_like(a), where=Kv > 0)
            resid = float(np.abs(v * apply(u_new) - b).sum())
            u = u_new
            if not np.isfinite(u).all():
                raise KernelUnderflowError(
                    f"scaling overflow at eps={eps:g}; use log-domain mode")
            if resid <= tol and it >= 1:
                break
        return u, v, it + 1, resid

    X, Y = ws.grid.mesh

    def plan_cost(u, v, a, b):
        rowm = u * apply(v)
        t1 = u * apply(v * X)
        t2 = u * apply(v * Y)
        cost = float(np.sum(rowm * (X ** 2 + Y ** 2)) + np.sum(b * (X ** 2 + Y ** 2))
                     - 2.0 * np.sum(X * t1 + Y * t2))
        return cost, t1, t2, rowm

    u, v, its, resid = solve_pair(p, q)
    cost_pq, t1, t2, rowm = plan_cost(u, v, p, q)
    up, vp, _, _ = solve_pair(p, p)
    cost_pp, _, _, _ = plan_cost(up, vp, p, p)
    uq, vq, _, _ = solve_pair(q, q)
    cost_qq, _, _, _ = plan_cost(uq, vq, q, q)
    sharp = cost_pq - 0.5 * (cost_pp + cost_qq)
    with np.errstate(divide="ignore"):
        dual = float(np.sum(np.where(p > 0, p * eps * (np.log(np.where(u > 0, u, 1)) - np.log(np.where(up > 0, up, 1))), 0.0))
                     + np.sum(np.where(q > 0, q * eps * (np.log(np.where(v > 0, v, 1)) - np.log(np.where(vq > 0, vq, 1))), 0.0)))
    pos = rowm > 0
    T1 = np.where(pos, t1 / np.where(pos, rowm, 1.0), X)
    T2 = np.where(pos, t2 / np.where(pos, rowm, 1.0), Y)
    return sharp, dual, T1, T2, rowm, its, resid


def wasserstein_entropic(mu: Density, nu: Density, params: SchemeParams) -> TransportResult:
    """Debiased entropic estimate of the squared Wasserstein distance."""
    if mu.grid != nu.grid:
        raise ValueError("marginals live on different grids")
    grid = mu.grid
    eps = params.entropic_eps
    tol = params.sinkhorn_tol
    maxit = params.max_inner_iters
    ws = get_workspace(grid, eps)
    p, logp = log_mass(mu)
    q, logq = log_mass(nu)

    if not ws.log_domain:
        sharp, dual, T1, T2, rowm, its, resid = _linear_domain_cost(ws, p, q, tol, maxit)
    else:
        U, V, its, resid = ws.balanced_duals(logp, logq, p, q, tol, maxit)
        Dp, _, _ = ws.sym_potential(logp, p, tol=tol, maxit=maxit)
        Dq, _, _ = ws.sym_potential(logq, q, tol=tol, maxit=maxit)
        cost_pq, T1, T2, rowm = ws.plan_cost_and_map(U, V, q)
        cost_pp, _, _, _ = ws.plan_cost_and_map(Dp, Dp, p)
        cost_qq, _, _, _ = ws.plan_cost_and_map(Dq, Dq, q)
        sharp = cost_pq - 0.5 * (cost_pp + cost_qq)
        dual = _dual_divergence(p, q, U, V, Dp, Dq)

    if resid > tol:
        raise SinkhornDivergedError(
            f"scaling iterations stalled at residual {resid:.3e} > {tol:.3e} "
            f"after {its} iterations", resid, its)

    marginal_error = float(np.abs(rowm - p).max())
    bmap = VectorField(grid, T1, T2)
    return TransportResult(cost=float(sharp), plan_kind="entropic-potentials",
                           marginal_error=marginal_error, barycentric_map=bmap,
                           dual_cost=float(dual), iterations=its, grid=grid,
                           mu_values=mu.field.values)


def _dual_divergence(p, q, U, V, Dp, Dq):
    """Dual-form debiased divergence <p, U - Dp> + <q, V - Dq>."""
    tp = np.where(p > 0, (U - Dp), 0.0)
    tq = np.where(q > 0, (V - Dq), 0.0)
    return float(np.sum(p * tp) + np.sum(q * tq))


def barycentric_map(result: TransportResult, mu: Density) -> VectorField:
    """Plan-averaged target point per cell of the first marginal."""
    if result.grid is not None and mu.grid != result.grid:
        raise ValueError("density grid does not match the transport result")
    if result.mu_values is not None and not np.array_equal(result.mu_values, mu.field.values):
        raise ValueError("transport result was computed from a different first marginal")
    return result.barycentric_map
