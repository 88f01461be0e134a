"""Dense convex QP solver based on operator splitting (ADMM).

Solves
    minimize    1/2 x' P x + q' x
    subject to  l <= A x <= u
with P symmetric positive semidefinite. The splitting iteration follows
the OSQP scheme: modified Ruiz equilibration of the problem data, fixed
step size rho adapted from the primal/dual residual ratio, and
over-relaxation. Instead of factorizing the full (n+m) KKT matrix, each
x-update solves the equivalent reduced SPD system
    (P + sigma I + rho A'A) x = rhs
by dense Cholesky, refactorized only when rho or the constraint matrix
changes. The scaling is computed once per setup, so constraint rows
declared "variable" can be swapped without re-equilibrating, and the A'A
contribution of the fixed rows is cached across updates. Warm starting
reuses the (x, z, y) iterates of the previous solve.

Termination is on unscaled residuals. Infinite bounds are encoded with
the sentinel magnitude 1e30.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is optional
    _numba = None

INFTY = 1e30

STATUS_SOLVED = "solved"
STATUS_MAX_ITER = "max_iter"
STATUS_PRIMAL_INFEASIBLE = "primal_infeasible"


class QpProblemError(ValueError):
    """Malformed problem data (asymmetric or indefinite P, crossed bounds)."""


@dataclass(eq=False)
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, self.q.size)
        self.l = np.clip(np.asarray(self.l, dtype=float), -INFTY, INFTY)
        self.u = np.clip(np.asarray(self.u, dtype=float), -INFTY, INFTY)
        n = self.q.size
        m = self.A.shape[0]
        if self.P.shape != (n, n):
            raise QpProblemError(f"P has shape {self.P.shape}, expected ({n}, {n})")
        if np.max(np.abs(self.P - self.P.T), initial=0.0) > 1e-10:
            raise QpProblemError("P is not symmetric within 1e-10")
        if self.l.shape != (m,) or self.u.shape != (m,):
            raise QpProblemError("bound vectors do not match the constraint count")
        if np.any(self.l > self.u):
            raise QpProblemError("crossed bounds: l > u")

    @property
    def n(self):
        return self.q.size

    @property
    def m(self):
        return self.A.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 4000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    check_interval: int = 25
    eps_pinf: float = 1e-9
    scaling_iters: int = 10
    adaptive_rho: bool = True
    adaptive_rho_tol: float = 5.0  # rescale when the residual ratio drifts this far


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str
    iterations: int
    primal_res: float
    dual_res: float
    objective: float


def _ruiz_equilibrate(P, A, q, iters):
    """Modified Ruiz scaling of [P A'; A 0] plus cost normalization.

    Returns (D, E, c) with the scaled data P_s = c D P D, A_s = E A D,
    q_s = c D q.
    """
    n = P.shape[0]
    m = A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    Ps = P.copy()
    As = A.copy()
    qs = q.copy()
    for _ in range(iters):
        col = np.maximum(
            np.max(np.abs(Ps), axis=0, initial=0.0),
            np.max(np.abs(As), axis=0, initial=0.0),
        )
        col[col == 0.0] = 1.0
        d = 1.0 / np.sqrt(col)
        row = np.max(np.abs(As), axis=1, initial=0.0)
        row[row == 0.0] = 1.0
        e = 1.0 / np.sqrt(row)
        Ps = Ps * d[:, None] * d[None, :]
        As = As * e[:, None] * d[None, :]
        qs = qs * d
        D *= d
        E *= e
        # cost scaling keeps the quadratic part near unit magnitude
        pcols = np.max(np.abs(Ps), axis=0, initial=0.0)
        mean_p = float(np.mean(pcols[pcols > 0.0])) if np.any(pcols > 0.0) else 0.0
        denom = max(mean_p, np.max(np.abs(qs), initial=0.0))
        if denom > 0.0:
            gamma = 1.0 / denom
            Ps *= gamma
            qs *= gamma
            c *= gamma
    return D, E, c


def _admm_core(Kinv, Ps, ata, As, Ats, q, l, u, x, z, y, rho, sigma, alpha,
               max_iter, check_interval, eps_abs, eps_rel, adaptive, adapt_tol,
               Einv, Dinv, cinv, l_raw, u_raw, E, eps_pinf):
    """Inner ADMM loop on the scaled problem; mutates (x, z, y) in place.

    Termination residuals are evaluated in unscaled units. Returns
    (status, iterations, primal res, dual res, final rho). Compiled with
    numba when available; the pure-numpy path is identical.
    """
    status = 0  # 0 max_iter, 1 solved, 2 primal infeasible
    r_prim = 1e30
    r_dual = 1e30
    it = 0
    m, n = As.shape
    y_prev = y.copy()
    rz = np.empty(m)
    for it in range(1, max_iter + 1):
        for i in range(m):
            rz[i] = rho * z[i] - y[i]
        rhs = Ats @ rz
        for j in range(n):
            rhs[j] += sigma * x[j] - q[j]
        x_t = Kinv @ rhs
        z_t = As @ x_t
        for j in range(n):
            x[j] = alpha * x_t[j] + (1.0 - alpha) * x[j]
        for i in range(m):
            zr = alpha * z_t[i] + (1.0 - alpha) * z[i]
            znew = zr + y[i] / rho
            if znew < l[i]:
                znew = l[i]
            elif znew > u[i]:
                znew = u[i]
            y[i] += rho * (zr - znew)
            z[i] = znew
        if it % check_interval == 0 or it == max_iter:
            Ax_u = Einv * (As @ x)
            z_u = Einv * z
            r_prim = np.max(np.abs(Ax_u - z_u))
            Px_u = cinv * Dinv * (Ps @ x)
            Aty_u = cinv * Dinv * (Ats @ y)
            q_u = cinv * Dinv * q
            r_dual = np.max(np.abs(Px_u + q_u + Aty_u))
            norm_p = max(np.max(np.abs(Ax_u)), np.max(np.abs(z_u)))
            norm_d = max(np.max(np.abs(Px_u)),
                         max(np.max(np.abs(Aty_u)), np.max(np.abs(q_u))))
            if (r_prim <= eps_abs + eps_rel * norm_p
                    and r_dual <= eps_abs + eps_rel * norm_d):
                status = 1
                break
            dyu = E * (y - y_prev) * cinv
            nrm = np.max(np.abs(dyu))
            if nrm > 1e-14:
                atd = np.abs(Dinv * (Ats @ (y - y_prev)) * cinv) / nrm
                if np.max(atd) <= eps_pinf:
                    ok = True
                    support = 0.0
                    for i in range(m):
                        d = dyu[i] / nrm
                        if d > eps_pinf:
                            if u_raw[i] >= INFTY:
                                ok = False
                                break
                            support += u_raw[i] * d
                        elif d < -eps_pinf:
                            if l_raw[i] <= -INFTY:
                                ok = False
                                break
                            support += l_raw[i] * d
                    if ok and support < -eps_pinf:
                        status = 2
                        break
            y_prev[:] = y
            if adaptive:
                sp = r_prim / max(norm_p, 1e-12)
                sd = r_dual / max(norm_d, 1e-12)
                ratio = math.sqrt(sp / max(sd, 1e-16))
                if ratio > adapt_tol or ratio < 1.0 / adapt_tol:
                    rho = min(max(rho * ratio, 1e-6), 1e6)
                    K = Ps + rho * ata
                    for i in range(n):
                        K[i, i] += sigma
                    Kinv = np.linalg.inv(K)
    return status, it, r_prim, r_dual, rho


if _numba is not None:
    _admm_core = _numba.njit(cache=True, nogil=True)(_admm_core)


class AdmmQpSolver:
    """Stateful solver instance: scaling, factorization, warm-start iterates.

    ``var_rows`` marks constraint rows whose coefficients change between
    solves; the A'A contribution of the remaining rows is precomputed once,
    and updates only pay for the variable rows plus the factorization.
    """

    def __init__(self, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self._x = None

    def setup(self, problem: QpProblem, var_rows=None):
        self.problem = problem
        s = self.settings
        if s.scaling_iters > 0:
            self._D, self._E, self._c = _ruiz_equilibrate(
                problem.P, problem.A, problem.q, s.scaling_iters
            )
        else:
            self._D = np.ones(problem.n)
            self._E = np.ones(problem.m)
            self._c = 1.0
        self._Ps = self._c * problem.P * self._D[:, None] * self._D[None, :]
        self._As = problem.A * self._E[:, None] * self._D[None, :]
        self._qs = self._c * problem.q * self._D
        self._ls = _scale_bounds(problem.l, self._E)
        self._us = _scale_bounds(problem.u, self._E)
        self.var_rows = np.asarray(var_rows, dtype=int) if var_rows is not None else None
        if self.var_rows is not None:
            mask = np.ones(problem.m, dtype=bool)
            mask[self.var_rows] = False
            A_fix = self._As[mask]
            self._fixed_ata = A_fix.T @ A_fix
        else:
            self._fixed_ata = None
        self._rho = s.rho
        self._sigma_eye = s.sigma * np.eye(problem.n)
        self._compute_ata()
        self._refactorize()
        self._x = np.zeros(problem.n)
        self._z = np.zeros(problem.m)
        self._y = np.zeros(problem.m)
        return self

    def update(self, q=None, l=None, u=None, A_var=None):
        """Swap bounds / linear cost / variable constraint rows in place."""
        p = self.problem
        if q is not None:
            p.q = np.asarray(q, dtype=float)
            self._qs = self._c * p.q * self._D
        if l is not None:
            p.l = np.clip(np.asarray(l, dtype=float), -INFTY, INFTY)
            self._ls = _scale_bounds(p.l, self._E)
        if u is not None:
            p.u = np.clip(np.asarray(u, dtype=float), -INFTY, INFTY)
            self._us = _scale_bounds(p.u, self._E)
        if A_var is not None:
            if self.var_rows is None:
                raise QpProblemError("solver was set up without variable rows")
            A_var = np.asarray(A_var, dtype=float)
            p.A[self.var_rows] = A_var
            self._As[self.var_rows] = (
                A_var * self._E[self.var_rows, None] * self._D[None, :]
            )
            self._compute_ata()
            self._refactorize()
        return self

    def set_warm_primal(self, x):
        """Replace the primal warm-start iterate (unscaled), keeping the duals."""
        self._x = np.asarray(x, dtype=float) / self._D
        self._z = self._As @ self._x

    def _compute_ata(self):
        if self._fixed_ata is not None:
            A_var = self._As[self.var_rows]
            self._ata = self._fixed_ata + A_var.T @ A_var
        else:
            self._ata = self._As.T @ self._As

    def _refactorize(self):
        K = self._Ps + self._sigma_eye + self._rho * self._ata
        try:
            chol = linalg.cho_factor(K, lower=True, check_finite=False)
            self._Kinv = linalg.cho_solve(chol, np.eye(self.problem.n),
                                          check_finite=False)
        except linalg.LinAlgError as exc:
            raise QpProblemError(f"cannot factorize the reduced KKT system: {exc}")

    def solve(self, warm_start: bool = True) -> QpSolution:
        p = self.problem
        s = self.settings
        if not warm_start or self._x is None:
            self._x = np.zeros(p.n)
            self._z = np.zeros(p.m)
            self._y = np.zeros(p.m)
        rho_in = self._rho
        status_code, it, r_prim, r_dual, rho_out = _admm_core(
            self._Kinv, self._Ps, self._ata, self._As,
            np.ascontiguousarray(self._As.T), self._qs, self._ls, self._us,
            self._x, self._z, self._y, rho_in, s.sigma, s.alpha,
            s.max_iter, s.check_interval, s.eps_abs, s.eps_rel,
            s.adaptive_rho, s.adaptive_rho_tol,
            1.0 / self._E, 1.0 / self._D, 1.0 / self._c,
            p.l, p.u, self._E, s.eps_pinf,
        )
        if rho_out != rho_in:
            self._rho = rho_out
            self._refactorize()  # keep the cached factor in sync for updates
        status = {0: STATUS_MAX_ITER, 1: STATUS_SOLVED,
                  2: STATUS_PRIMAL_INFEASIBLE}[int(status_code)]
        x_out = self._D * self._x
        y_out = (1.0 / self._c) * self._E * self._y
        z_out = (1.0 / self._E) * self._z
        return QpSolution(
            x=x_out, y=y_out, z=z_out, status=status, iterations=int(it),
            primal_res=float(r_prim), dual_res=float(r_dual),
            objective=p.objective(x_out),
        )


def _scale_bounds(b, E):
    """Row-scale bounds, keeping the infinity sentinel out of the arithmetic."""
    out = np.where(np.abs(b) >= INFTY, b, E * b)
    return np.clip(out, -INFTY, INFTY)


def solve_qp(problem: QpProblem, settings: QpSettings | None = None,
             warm_start=None) -> QpSolution:
    """One-shot solve; ``warm_start`` may carry (x, y) from a previous solution."""
    solver = AdmmQpSolver(settings)
    solver.setup(problem)
    if warm_start is not None:
        x0, y0 = warm_start
        solver._x = np.asarray(x0, dtype=float) / solver._D
        solver._y = solver._c * np.asarray(y0, dtype=float) / solver._E
        solver._z = solver._As @ solver._x
    return solver.solve(warm_start=True)


def kkt_check(problem: QpProblem, solution: QpSolution, tol: float) -> bool:
    """Verify primal feasibility, stationarity, and complementary slackness."""
    x, y = solution.x, solution.y
    Ax = problem.A @ x
    prim = np.max(
        np.maximum(problem.l - Ax, 0.0) + np.maximum(Ax - problem.u, 0.0), initial=0.0
    )
    if prim > tol:
        return False
    stat = np.max(np.abs(problem.P @ x + problem.q + problem.A.T @ y), initial=0.0)
    if stat > tol:
        return False
    y_pos = np.maximum(y, 0.0)
    y_neg = np.minimum(y, 0.0)
    gap_u = np.where(problem.u >= INFTY, 1.0, np.abs(problem.u - Ax))
    gap_l = np.where(problem.l <= -INFTY, 1.0, np.abs(Ax - problem.l))
    comp = np.max(y_pos * gap_u - y_neg * gap_l, initial=0.0)
    return comp <= tol * max(1.0, np.max(np.abs(y), initial=0.0))
