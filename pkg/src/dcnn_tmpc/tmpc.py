"""Tube MPC on the multi-step difference-of-convex predictor.

Around a nominal trajectory (y0, u0), each step's prediction deviation is
bracketed by tube bounds obtained from the DC structure: the concave part
is linearized at u0 (an over-estimate of -f2, an under-estimate of f1), so

    s_max(u) = f1(z, u) - f2(z, u0) - f2'(z, u0) (u - u0) + w_max - y0_i
    s_min(u) = -f2(z, u) + f1(z, u0) + f1'(z, u0) (u - u0) + w_min - y0_i

hold for every u (noiseless deviations stay inside [s_min, s_max] whenever
0 is in the disturbance interval). The convex subproblem minimizes the
worst-case hinge cost above the threshold plus input energy, subject to
those bounds, soft output constraints, and hard input and rate limits.

The remaining convex network evaluations f1(z, u) and f2(z, u) enter the
QP through an exact epigraph embedding: each hidden activation becomes a
variable h with h >= 0 and h >= (affine in the previous layer and the
input). Because hidden-to-hidden and output weights are non-negative,
relaxing the equality to these inequalities does not change the feasible
set of (s, u): any feasible h can be pushed down onto the true activation
values without increasing the network output. When the cost puts no
pressure on an epigraph variable, every feasible value of it is optimal;
an analytic polish after each QP therefore recomputes the epigraph
quantities exactly at the returned input, selecting the tube-tight
optimum without perturbing the objective.

The sequential convex program re-linearizes at the new nominal trajectory
until the cost decrease falls below a threshold or an iteration cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dc_predictor import (
    MultiStepModel,
    Regressor,
    StepModel,
    dc_jacobian_u,
    predict_horizon,
)
from .icnn import icnn_forward, icnn_hidden_activations
from .qp_solver import AdmmQpSolver, QpProblem, QpSettings


class ControllerError(RuntimeError):
    """Raised when the convex subproblem cannot be solved reliably."""


@dataclass
class MpcWeights:
    """Cost weights in normalized envelope / input units."""

    Q: float = 1.0
    R: float = 0.1
    beta0: float = 1.0
    rho_soft: float | None = None  # default 1e4 * Q
    tube_reg: float = 0.0  # optional linear tube-width penalty

    def __post_init__(self):
        if self.Q <= 0.0 or self.R <= 0.0:
            raise ValueError("Q and R must be positive")
        if self.rho_soft is None:
            self.rho_soft = 1e4 * self.Q
        if self.rho_soft < 0.0:
            raise ValueError("slack penalty must be non-negative")
        if self.tube_reg < 0.0:
            raise ValueError("tube regularization must be non-negative")


@dataclass
class MpcLimits:
    """Input box [0, u_max], rate bound, and soft output interval."""

    u_max: float = 1.0
    du_max: float = 0.1
    y_min: float = -np.inf
    y_max: float = np.inf

    def __post_init__(self):
        if self.u_max < 0.0 or self.du_max <= 0.0:
            raise ValueError("invalid input limits")
        if self.y_min > self.y_max:
            raise ValueError("y_min must not exceed y_max")


@dataclass
class ScpSettings:
    max_iters: int = 10
    dj_min: float | None = None      # absolute threshold; None uses dj_min_rel
    dj_min_rel: float = 1e-4         # threshold = dj_min_rel * max(1, J_1)
    qp: QpSettings = field(default_factory=lambda: QpSettings(
        eps_abs=1e-8, eps_rel=1e-8, max_iter=20000, check_interval=25))

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.dj_min is not None and self.dj_min < 0.0:
            raise ValueError("dj_min must be non-negative")


@dataclass
class NominalTrajectory:
    y0: np.ndarray
    u0: np.ndarray
    consistent: bool = True

    def __post_init__(self):
        self.y0 = np.asarray(self.y0, dtype=float)
        self.u0 = np.asarray(self.u0, dtype=float)
        if self.y0.shape != self.u0.shape:
            raise ValueError("y0 and u0 must have equal length")


@dataclass
class TubeSection:
    s_min: np.ndarray
    s_max: np.ndarray


def make_nominal(M: MultiStepModel, z: Regressor, u0) -> NominalTrajectory:
    u0 = np.asarray(u0, dtype=float)
    return NominalTrajectory(y0=predict_horizon(M, z, u0), u0=u0, consistent=True)


def check_consistent(M: MultiStepModel, z: Regressor, traj: NominalTrajectory,
                     tol: float = 1e-9) -> bool:
    return bool(np.max(np.abs(predict_horizon(M, z, traj.u0) - traj.y0)) <= tol)


def tube_bounds(m: StepModel, z: Regressor, u, u0, w_interval):
    """Equality-form perturbation interval endpoints for one step."""
    u = np.asarray(u, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    if u.shape != (m.index,) or u0.shape != (m.index,):
        raise ValueError(f"step {m.index} expects input vectors of length {m.index}")
    w_min, w_max = float(w_interval[0]), float(w_interval[1])
    zu = np.concatenate([z.vector(), u])
    zu0 = np.concatenate([z.vector(), u0])
    f1_u = icnn_forward(m.f1, zu)
    f2_u = icnn_forward(m.f2, zu)
    f1_0 = icnn_forward(m.f1, zu0)
    f2_0 = icnn_forward(m.f2, zu0)
    j1, j2 = dc_jacobian_u(m, z, u0)
    y0_i = f1_0 - f2_0
    dv = u - u0
    s_max = f1_u - f2_0 - j2 @ dv + w_max - y0_i
    s_min = -f2_u + f1_0 + j1 @ dv + w_min - y0_i
    return float(s_min), float(s_max)


def tube_bounds_horizon(M: MultiStepModel, z: Regressor, u, u0) -> TubeSection:
    u = np.asarray(u, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    s_min = np.empty(M.n_steps)
    s_max = np.empty(M.n_steps)
    for i, m in enumerate(M.steps, start=1):
        s_min[i - 1], s_max[i - 1] = tube_bounds(
            m, z, u[:i], u0[:i], M.w_intervals[i - 1]
        )
    return TubeSection(s_min=s_min, s_max=s_max)


def worst_case_cost(traj: NominalTrajectory, tube: TubeSection, u,
                    weights: MpcWeights) -> float:
    """Hinge cost at the worst admissible perturbation plus input energy.

    The inner maximum over s in [s_min, s_max] lands on s_max because the
    squared hinge is non-decreasing in s.
    """
    u = np.asarray(u, dtype=float)
    exc = np.maximum(traj.y0 + tube.s_max - weights.beta0, 0.0)
    return float(weights.Q * np.sum(exc ** 2) + weights.R * np.sum(u ** 2))


@dataclass
class VariableMap:
    """Index layout of the subproblem decision vector."""

    n: int
    N: int
    v: slice
    s_max: slice
    s_min: slice
    e: slice
    sig: slice
    h: dict  # (step, net, layer) -> slice


class SubproblemTemplate:
    """Pre-assembled QP skeleton for one model / weights / limits triple.

    Constraint rows with fixed coefficients (network layers, boxes, rate
    chain) are laid out once; only the 2N tube rows change coefficients
    between solves, so the solver can cache the fixed part of A'A.
    """

    def __init__(self, M: MultiStepModel, weights: MpcWeights, limits: MpcLimits,
                 qp_settings: QpSettings | None = None):
        self.M = M
        self.weights = weights
        self.limits = limits
        N = M.n_steps
        self.N = N
        nz = M.ny + M.nu

        # variable layout
        pos = 0
        def take(k):
            nonlocal pos
            s = slice(pos, pos + k)
            pos += k
            return s
        sl_v = take(N)
        sl_smax = take(N)
        sl_smin = take(N)
        sl_e = take(N)
        sl_sig = take(N)
        h_slices = {}
        for i, m in enumerate(M.steps, start=1):
            for net, p in ((1, m.f1), (2, m.f2)):
                for l, width in enumerate(p.arch.hidden_widths):
                    h_slices[(i, net, l)] = take(width)
        n = pos
        self.var_map = VariableMap(n=n, N=N, v=sl_v, s_max=sl_smax, s_min=sl_smin,
                                   e=sl_e, sig=sl_sig, h=h_slices)

        # row layout: fixed-coefficient rows first, tube rows last
        rows = 0
        def rtake(k):
            nonlocal rows
            s = slice(rows, rows + k)
            rows += k
            return s
        self.r_layer = {}
        for i, m in enumerate(M.steps, start=1):
            for net, p in ((1, m.f1), (2, m.f2)):
                for l, width in enumerate(p.arch.hidden_widths):
                    self.r_layer[(i, net, l)] = rtake(width)
        H_total = rows
        self.r_hbox = rtake(H_total)
        self.r_e_hinge = rtake(N)
        self.r_e_box = rtake(N)
        self.r_ymax = rtake(N)
        self.r_ymin = rtake(N)
        self.r_sig_box = rtake(N)
        self.r_u = rtake(N)
        self.r_du = rtake(N)
        self.r_tube_up = rtake(N)
        self.r_tube_lo = rtake(N)
        m_rows = rows

        A = np.zeros((m_rows, n))
        # network layer rows: h_l - W_l h_{l-1} - D_l[:, u] v[0:i] >= bound
        for i, m in enumerate(M.steps, start=1):
            for net, p in ((1, m.f1), (2, m.f2)):
                for l, width in enumerate(p.arch.hidden_widths):
                    r = self.r_layer[(i, net, l)]
                    A[r, h_slices[(i, net, l)]] = np.eye(width)
                    if l > 0:
                        A[r, h_slices[(i, net, l - 1)]] = -p.W[l]
                    A[r, sl_v.start:sl_v.start + i] = -p.D[l][:, nz:]
        A[self.r_hbox, : ] = 0.0
        hb = self.r_hbox.start
        for key, hs in h_slices.items():
            width = hs.stop - hs.start
            r0 = hb + (hs.start - 5 * N)
            A[r0:r0 + width, hs] = np.eye(width)
        # epigraph hinge rows: e_i - s_max_i >= y0_i - beta0
        for i in range(N):
            A[self.r_e_hinge.start + i, sl_e.start + i] = 1.0
            A[self.r_e_hinge.start + i, sl_smax.start + i] = -1.0
            A[self.r_e_box.start + i, sl_e.start + i] = 1.0
            A[self.r_ymax.start + i, sl_smax.start + i] = 1.0
            A[self.r_ymax.start + i, sl_sig.start + i] = -1.0
            A[self.r_ymin.start + i, sl_smin.start + i] = 1.0
            A[self.r_ymin.start + i, sl_sig.start + i] = 1.0
            A[self.r_sig_box.start + i, sl_sig.start + i] = 1.0
            A[self.r_u.start + i, sl_v.start + i] = 1.0
            A[self.r_du.start + i, sl_v.start + i] = 1.0
            if i > 0:
                A[self.r_du.start + i, sl_v.start + i - 1] = -1.0
        self.A = A

        P = np.zeros((n, n))
        P[sl_e, sl_e] = 2.0 * weights.Q * np.eye(N)
        P[sl_v, sl_v] = 2.0 * weights.R * np.eye(N)
        P[sl_sig, sl_sig] = 2.0 * weights.rho_soft * np.eye(N)
        self.P = P
        self.q0 = np.zeros(n)
        self.q0[sl_smax] = weights.tube_reg
        self.q0[sl_smin] = -weights.tube_reg

        self.l = np.full(m_rows, -np.inf)
        self.u = np.full(m_rows, np.inf)
        # boxes never change
        self.l[self.r_hbox] = 0.0
        self.l[self.r_e_box] = 0.0
        self.l[self.r_sig_box] = 0.0

        var_rows = np.concatenate([
            np.arange(self.r_tube_up.start, self.r_tube_up.stop),
            np.arange(self.r_tube_lo.start, self.r_tube_lo.stop),
        ])
        self.var_rows = var_rows
        self.solver = AdmmQpSolver(qp_settings or QpSettings()).setup(
            QpProblem(P=self.P, q=self.q0.copy(), A=self.A, l=self.l.copy(),
                      u=self.u.copy()),
            var_rows=var_rows,
        )

    def fill(self, z: Regressor, traj: NominalTrajectory, u_prev: float):
        """Refresh bounds, linear cost, and tube rows for one subproblem.

        Returns the per-step nominal network values and Jacobians so the
        SCP loop can reuse them for the polish step.
        """
        M = self.M
        N = self.N
        nz = M.ny + M.nu
        w = self.weights
        lim = self.limits
        zvec = z.vector()
        u0 = traj.u0
        y0 = traj.y0
        l = self.l
        u = self.u
        q = self.q0.copy()
        q[self.var_map.v] = 2.0 * w.R * u0

        cache = []
        A_var = np.zeros((2 * N, self.var_map.n))
        x_warm = np.zeros(self.var_map.n)
        for i, m in enumerate(M.steps, start=1):
            x0 = np.concatenate([zvec, u0[:i]])
            f1_0, h1 = icnn_hidden_activations(m.f1, x0)
            f2_0, h2 = icnn_hidden_activations(m.f2, x0)
            if abs((f1_0 - f2_0) - y0[i - 1]) > 1e-7:
                raise ControllerError("nominal trajectory is inconsistent with the model")
            j1, j2 = dc_jacobian_u(m, z, u0[:i])
            cache.append((f1_0, f2_0, j1, j2))
            for net, p, hs in ((1, m.f1, h1), (2, m.f2, h2)):
                for lay in range(p.arch.n_hidden):
                    r = self.r_layer[(i, net, lay)]
                    D = p.D[lay]
                    l[r] = p.b[lay] + D[:, :nz] @ zvec + D[:, nz:] @ u0[:i]
                    x_warm[self.var_map.h[(i, net, lay)]] = hs[lay]
            w_min, w_max = M.w_intervals[i - 1]
            vm = self.var_map
            # warm start at the v = 0 candidate of this linearization
            x_warm[vm.s_max.start + i - 1] = w_max
            x_warm[vm.s_min.start + i - 1] = w_min
            x_warm[vm.e.start + i - 1] = max(y0[i - 1] + w_max - w.beta0, 0.0)
            x_warm[vm.sig.start + i - 1] = max(
                y0[i - 1] + w_max - lim.y_max, lim.y_min - (y0[i - 1] + w_min), 0.0
            )
            # upper tube row
            row = A_var[i - 1]
            row[vm.s_max.start + i - 1] = 1.0
            row[vm.h[(i, 1, m.f1.arch.n_hidden - 1)]] = -m.f1.w_out
            row[vm.v.start:vm.v.start + i] = j2 - m.f1.d_out[nz:]
            l[self.r_tube_up.start + i - 1] = (
                m.f1.d_out[:nz] @ zvec + m.f1.d_out[nz:] @ u0[:i] + m.f1.b_out
                - f2_0 + w_max - y0[i - 1]
            )
            # lower tube row
            row = A_var[N + i - 1]
            row[vm.s_min.start + i - 1] = 1.0
            row[vm.h[(i, 2, m.f2.arch.n_hidden - 1)]] = m.f2.w_out
            row[vm.v.start:vm.v.start + i] = m.f2.d_out[nz:] - j1
            u[self.r_tube_lo.start + i - 1] = (
                -(m.f2.d_out[:nz] @ zvec + m.f2.d_out[nz:] @ u0[:i] + m.f2.b_out)
                + f1_0 + w_min - y0[i - 1]
            )
        # output / epigraph bounds
        l[self.r_e_hinge] = y0 - w.beta0
        u[self.r_ymax] = lim.y_max - y0
        l[self.r_ymin] = lim.y_min - y0
        # input box and rate chain
        l[self.r_u] = -u0
        u[self.r_u] = lim.u_max - u0
        l[self.r_du.start] = -lim.du_max - (u0[0] - u_prev)
        u[self.r_du.start] = lim.du_max - (u0[0] - u_prev)
        if N > 1:
            du0 = np.diff(u0)
            l[self.r_du][1:] = -lim.du_max - du0
            u[self.r_du][1:] = lim.du_max - du0
        self.solver.update(q=q, l=l, u=u, A_var=A_var)
        self.solver.set_warm_primal(x_warm)
        return cache

    def problem_copy(self) -> QpProblem:
        p = self.solver.problem
        return QpProblem(P=p.P.copy(), q=p.q.copy(), A=p.A.copy(),
                         l=p.l.copy(), u=p.u.copy())


def build_subproblem(M: MultiStepModel, z: Regressor, traj: NominalTrajectory,
                     weights: MpcWeights, limits: MpcLimits, u_prev: float):
    """Assemble one tube-MPC subproblem; returns (QpProblem, VariableMap)."""
    tpl = SubproblemTemplate(M, weights, limits)
    tpl.fill(z, traj, u_prev)
    return tpl.problem_copy(), tpl.var_map


def clamp_chain(u_raw, u_prev: float, limits: MpcLimits) -> np.ndarray:
    """Project an input sequence onto the box and rate constraints, exactly."""
    out = np.empty(len(u_raw))
    prev = u_prev
    for i, val in enumerate(np.asarray(u_raw, dtype=float)):
        lo = max(0.0, prev - limits.du_max)
        hi = min(limits.u_max, prev + limits.du_max)
        out[i] = min(max(val, lo), hi)
        prev = out[i]
    return out


def warm_start_shift(prev: NominalTrajectory | None, M: MultiStepModel,
                     z: Regressor, limits: MpcLimits,
                     u_applied: float) -> NominalTrajectory:
    """Shift the previous input plan one step, clip, and recompute outputs."""
    N = M.n_steps
    if prev is None:
        u_guess = np.zeros(N)
    else:
        u_guess = np.concatenate([prev.u0[1:], prev.u0[-1:]])
    u0 = clamp_chain(u_guess, u_applied, limits)
    return make_nominal(M, z, u0)


@dataclass
class ScpStepDiag:
    """Per-SCP-iteration diagnostics."""

    J_full: float
    J_cost: float
    J_slack: float
    J_tube_reg: float
    s_max_qp: np.ndarray
    s_min_qp: np.ndarray
    s_max: np.ndarray
    s_min: np.ndarray
    slack_max: float
    qp_iterations: int
    qp_status: str


@dataclass
class ScpResult:
    u_applied: float
    traj: NominalTrajectory
    J_history: list
    iters: int
    steps: list  # of ScpStepDiag


def scp_solve(M: MultiStepModel, z: Regressor, warm: NominalTrajectory,
              weights: MpcWeights, limits: MpcLimits, settings: ScpSettings,
              u_prev: float = 0.0,
              template: SubproblemTemplate | None = None) -> ScpResult:
    """Sequential convex programming loop.

    Each iteration refreshes the Jacobians at the current nominal input,
    solves the tube subproblem, polishes the epigraph variables exactly at
    the returned input, and re-linearizes there. Terminates when the cost
    decrease of the full objective drops below the threshold or after
    max_iters iterations.
    """
    tpl = template or SubproblemTemplate(M, weights, limits, settings.qp)
    N = M.n_steps
    u0 = clamp_chain(warm.u0, u_prev, limits)
    if not np.allclose(u0, warm.u0, atol=1e-12):
        traj = make_nominal(M, z, u0)
    else:
        traj = warm if warm.consistent else make_nominal(M, z, u0)
        u0 = traj.u0
    J_history = []
    diags = []
    w = weights
    zvec = z.vector()
    iters = 0
    for j in range(1, settings.max_iters + 1):
        cache = tpl.fill(z, traj, u_prev)
        sol = tpl.solver.solve()
        if sol.status != "solved":
            raise ControllerError(f"subproblem {sol.status} after {sol.iterations} iterations")
        iters = j
        vm = tpl.var_map
        v = sol.x[vm.v]
        u_new = clamp_chain(traj.u0 + v, u_prev, limits)
        # polish: recompute tube endpoints exactly at u_new from the cached
        # nominal values and Jacobians of this linearization
        s_max = np.empty(N)
        s_min = np.empty(N)
        for i, m in enumerate(M.steps, start=1):
            f1_0, f2_0, j1, j2 = cache[i - 1]
            x_new = np.concatenate([zvec, u_new[:i]])
            dv = u_new[:i] - traj.u0[:i]
            w_min, w_max = M.w_intervals[i - 1]
            s_max[i - 1] = (icnn_forward(m.f1, x_new) - f2_0 - j2 @ dv
                            + w_max - traj.y0[i - 1])
            s_min[i - 1] = (-icnn_forward(m.f2, x_new) + f1_0 + j1 @ dv
                            + w_min - traj.y0[i - 1])
        exc = np.maximum(traj.y0 + s_max - w.beta0, 0.0)
        slack = np.maximum.reduce([
            traj.y0 + s_max - limits.y_max,
            limits.y_min - (traj.y0 + s_min),
            np.zeros(N),
        ])
        J_cost = float(w.Q * np.sum(exc ** 2) + w.R * np.sum(u_new ** 2))
        J_slack = float(w.rho_soft * np.sum(slack ** 2))
        J_reg = float(w.tube_reg * np.sum(s_max - s_min))
        J_full = J_cost + J_slack + J_reg
        if J_history and J_full > J_history[-1]:
            # descent safeguard: an inexactly solved subproblem produced no
            # improvement, so keep the previous iterate and stop
            break
        J_history.append(J_full)
        diags.append(ScpStepDiag(
            J_full=J_full, J_cost=J_cost, J_slack=J_slack, J_tube_reg=J_reg,
            s_max_qp=sol.x[vm.s_max].copy(), s_min_qp=sol.x[vm.s_min].copy(),
            s_max=s_max, s_min=s_min, slack_max=float(np.max(slack)),
            qp_iterations=sol.iterations, qp_status=sol.status,
        ))
        traj = make_nominal(M, z, u_new)
        if j >= 2:
            threshold = settings.dj_min if settings.dj_min is not None else \
                settings.dj_min_rel * max(1.0, J_history[0])
            if J_history[-2] - J_history[-1] < threshold:
                break
    lo = max(0.0, u_prev - limits.du_max)
    hi = min(limits.u_max, u_prev + limits.du_max)
    u_applied = min(max(float(traj.u0[0]), lo), hi)
    return ScpResult(u_applied=u_applied, traj=traj, J_history=J_history,
                     iters=iters, steps=diags)


class DcnnTmpcController:
    """Stateful closed-loop wrapper: history bookkeeping, warm starts, fallback.

    Operates in normalized units; measurements are normalized on entry and
    the returned input is already in [0, u_max] with the rate limit applied
    exactly. On an unsolved subproblem the previous input is held.
    """

    name = "dcnn_tmpc"

    def __init__(self, model: MultiStepModel, weights: MpcWeights,
                 limits: MpcLimits, settings: ScpSettings, ident_y):
        self.model = model
        self.weights = weights
        self.limits = limits
        self.settings = settings
        self.template = SubproblemTemplate(model, weights, limits, settings.qp)
        ident_n = model.norms.normalize_y(np.asarray(ident_y, dtype=float))
        if ident_n.size < model.ny:
            raise ValueError(f"need at least {model.ny} history samples")
        self.y_past = ident_n[-model.ny:][::-1].copy()  # newest first
        self.u_past = np.zeros(model.nu)
        self.u_prev = 0.0
        self.prev_traj = None
        self.fallback_count = 0
        self.diagnostics = []
        self._k = 0

    def step(self, y_raw: float) -> float:
        M = self.model
        yn = float(M.norms.normalize_y(y_raw))
        self.y_past = np.concatenate([[yn], self.y_past[:-1]])
        z = Regressor(self.y_past, self.u_past)
        warm = warm_start_shift(self.prev_traj, M, z, self.limits, self.u_prev)
        try:
            res = scp_solve(M, z, warm, self.weights, self.limits, self.settings,
                            u_prev=self.u_prev, template=self.template)
            u = res.u_applied
            self.prev_traj = res.traj
            self.diagnostics.append({
                "k": self._k, "iters": res.iters, "J_history": res.J_history,
                "u_applied": u,
                "s_max": res.steps[-1].s_max.tolist(),
                "slack_max": res.steps[-1].slack_max,
                "scp_steps": res.steps,
                "fallback": False,
            })
        except ControllerError:
            lo = max(0.0, self.u_prev - self.limits.du_max)
            hi = min(self.limits.u_max, self.u_prev + self.limits.du_max)
            u = min(max(self.u_prev, lo), hi)
            self.prev_traj = None
            self.fallback_count += 1
            self.diagnostics.append({"k": self._k, "iters": 0, "J_history": [],
                                     "u_applied": u, "s_max": [],
                                     "slack_max": 0.0, "scp_steps": [],
                                     "fallback": True})
        self.u_past = np.concatenate([[u], self.u_past[:-1]])
        self.u_prev = u
        self._k += 1
        return u
