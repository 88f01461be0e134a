"""Comparison controllers: on-off, PI in difference form, and linear MPC.

The linear MPC works on the log envelope, where stimulation enters
additively: xi = ln(y) = xi_beta - eta. Nominal beta activity is an ARI
model (autoregression on the differenced log envelope) identified by least
squares from a stimulation-free window; the stimulation response block is
the same ZOH discretization the patient model uses, at nominal parameters.
The controller minimizes a hinge-quadratic cost above the log threshold
subject to input and rate constraints, via the shared QP solver.

All controllers emit normalized inputs in [0, u_max] and respect the rate
limit exactly at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .patient_model import StimParams, discretize_stim
from .qp_solver import AdmmQpSolver, QpProblem, QpSettings

_LOG_FLOOR = 1e-12


@dataclass
class OnOffState:
    u_prev: float = 0.0


def on_off_step(st: OnOffState, y: float, beta0: float, du_max: float,
                u_max: float) -> float:
    """Ramp up by the maximum increment while above threshold, else down."""
    if y > beta0:
        u = min(st.u_prev + du_max, u_max)
    else:
        u = max(st.u_prev - du_max, 0.0)
    st.u_prev = u
    return u


@dataclass
class PiState:
    kp: float
    ki: float
    ts: float
    u_prev: float = 0.0
    e_prev: float = 0.0


def pi_step(st: PiState, y: float, beta0: float, du_max: float, u_max: float) -> float:
    """Difference-form PI on the hinge error, with clamping anti-windup."""
    e = max(y - beta0, 0.0)
    du = st.kp * (e - st.e_prev) + st.ki * st.ts * e
    du = min(max(du, -du_max), du_max)
    u = min(max(st.u_prev + du, 0.0), u_max)
    st.u_prev = u
    st.e_prev = e
    return u


@dataclass
class AriModel:
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        if self.theta.size < 1 or not np.all(np.isfinite(self.theta)):
            raise ValueError("ARI coefficients must be a non-empty finite vector")

    @property
    def order(self):
        return self.theta.size


class IdentificationError(RuntimeError):
    pass


def identify_ari(xi, n_beta: int) -> AriModel:
    """Least squares fit of d(xi)_k = sum_i theta_i d(xi)_{k-i}."""
    xi = np.asarray(xi, dtype=float)
    if xi.size <= n_beta + 1:
        raise IdentificationError(
            f"need more than {n_beta + 1} samples, got {xi.size}"
        )
    dxi = np.diff(xi)
    rows = dxi.size - n_beta
    X = np.column_stack([dxi[n_beta - 1 - i: n_beta - 1 - i + rows] for i in range(n_beta)])
    t = dxi[n_beta:]
    rank = np.linalg.matrix_rank(X)
    if rank < n_beta:
        raise IdentificationError(
            f"regressor matrix is rank deficient ({rank} < {n_beta})"
        )
    theta, *_ = np.linalg.lstsq(X, t, rcond=None)
    return AriModel(theta=theta)


def ari_forecast(ari: AriModel, xi_hist, n_steps: int) -> np.ndarray:
    """Forecast xi_{k+1..k+n} from a history (oldest first, >= order+1 long)."""
    xi_hist = np.asarray(xi_hist, dtype=float)
    nb = ari.order
    if xi_hist.size < nb + 1:
        raise ValueError(f"history must hold at least {nb + 1} samples")
    lags = np.diff(xi_hist)[-nb:][::-1]  # most recent first
    xi = float(xi_hist[-1])
    out = np.empty(n_steps)
    for k in range(n_steps):
        dxi = float(ari.theta @ lags)
        xi += dxi
        out[k] = xi
        lags = np.concatenate([[dxi], lags[:-1]])
    return out


@dataclass(eq=False)
class AugmentedModel:
    """Block model: ZOH stimulation response plus ARI beta dynamics.

    State [x_eta (2); xi_beta; d(xi_beta) lags (n_beta)]; the measured log
    envelope is xi = xi_beta - eta.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    n_beta: int
    ts: float


def build_augmented_model(theta, stim_params: StimParams, T_s: float,
                          input_scale: float = 1.0) -> AugmentedModel:
    theta = np.asarray(theta, dtype=float).ravel()
    nb = theta.size
    disc = discretize_stim(stim_params, T_s)
    n = 2 + nb + 1
    A = np.zeros((n, n))
    B = np.zeros(n)
    A[:2, :2] = disc.A_d
    B[:2] = disc.B_d * input_scale
    # beta block on [xi_beta, dxi_k, ..., dxi_{k-nb+1}]
    A[2, 2] = 1.0
    A[2, 3:3 + nb] = theta
    A[3, 3:3 + nb] = theta
    for j in range(nb - 1):
        A[4 + j, 3 + j] = 1.0
    C = np.zeros(n)
    C[1] = -1.0  # eta attenuates the log envelope
    C[2] = 1.0
    return AugmentedModel(A=A, B=B, C=C, n_beta=nb, ts=T_s)


def simulate_augmented(am: AugmentedModel, x0, u_seq) -> np.ndarray:
    """Outputs xi at the state of each step (before applying u of that step)."""
    x = np.asarray(x0, dtype=float).copy()
    out = np.empty(len(u_seq))
    for k, u in enumerate(u_seq):
        out[k] = am.C @ x
        x = am.A @ x + am.B * u
    return out


def prediction_matrices(am: AugmentedModel, n_horizon: int):
    """xi_{k+i} = F[i] x_k + G[i, :] u_{k:k+N-1} for i = 0..N-1."""
    n = am.A.shape[0]
    F = np.empty((n_horizon, n))
    G = np.zeros((n_horizon, n_horizon))
    Ai = np.eye(n)
    for i in range(n_horizon):
        F[i] = am.C @ Ai
        for j in range(i):
            # C A^{i-1-j} B
            G[i, j] = am.C @ np.linalg.matrix_power(am.A, i - 1 - j) @ am.B
        Ai = Ai @ am.A
    return F, G


class OnOffController:
    name = "on_off"

    def __init__(self, beta0, du_max, u_max):
        self.state = OnOffState()
        self.beta0 = beta0
        self.du_max = du_max
        self.u_max = u_max

    def step(self, y: float) -> float:
        return on_off_step(self.state, y, self.beta0, self.du_max, self.u_max)


class PiController:
    name = "pi"

    def __init__(self, beta0, du_max, u_max, kp, ki, ts):
        self.state = PiState(kp=kp, ki=ki, ts=ts)
        self.beta0 = beta0
        self.du_max = du_max
        self.u_max = u_max

    def step(self, y: float) -> float:
        return pi_step(self.state, y, self.beta0, self.du_max, self.u_max)


class LinearMpcController:
    """Receding-horizon controller on the augmented log-envelope model."""

    name = "linear_mpc"

    def __init__(self, ident_y, beta0, du_max, u_max, stim_params: StimParams,
                 ts: float, n_horizon: int, n_beta: int = 4, r_weight: float = 0.1,
                 input_scale: float = 1.0, qp_settings: QpSettings | None = None):
        ident_y = np.asarray(ident_y, dtype=float)
        xi_ident = np.log(np.maximum(ident_y, _LOG_FLOOR))
        self.ari = identify_ari(xi_ident, n_beta)
        self.model = build_augmented_model(self.ari.theta, stim_params, ts,
                                           input_scale=input_scale)
        self.F, self.G = prediction_matrices(self.model, n_horizon)
        self.beta0 = beta0
        self.xi0 = math.log(max(beta0, _LOG_FLOOR))
        self.du_max = du_max
        self.u_max = u_max
        self.N = n_horizon
        self.n_beta = n_beta
        self.x_eta = np.zeros(2)
        self.xi_beta_hist = list(xi_ident[-(n_beta + 1):])
        self.u_prev = 0.0
        self.fallback_count = 0
        self._setup_qp(r_weight, qp_settings or QpSettings(eps_abs=1e-8, eps_rel=1e-8))

    def _setup_qp(self, r_weight, settings):
        N = self.N
        n = 2 * N  # [u; e]
        P = np.zeros((n, n))
        P[:N, :N] = 2.0 * r_weight * np.eye(N)
        P[N:, N:] = 2.0 * np.eye(N)
        A = np.zeros((4 * N, n))
        # hinge rows: e_i - G[i] u >= F[i] x - xi0
        A[:N, :N] = -self.G
        A[:N, N:] = np.eye(N)
        # e >= 0
        A[N:2 * N, N:] = np.eye(N)
        # input box
        A[2 * N:3 * N, :N] = np.eye(N)
        # rate rows
        for i in range(N):
            A[3 * N + i, i] = 1.0
            if i > 0:
                A[3 * N + i, i - 1] = -1.0
        l = np.full(4 * N, -np.inf)
        u = np.full(4 * N, np.inf)
        l[N:2 * N] = 0.0
        l[2 * N:3 * N] = 0.0
        u[2 * N:3 * N] = self.u_max
        problem = QpProblem(P=P, q=np.zeros(n), A=A, l=l, u=u)
        self.solver = AdmmQpSolver(settings).setup(problem)

    def _state(self) -> np.ndarray:
        hist = self.xi_beta_hist
        lags = np.diff(hist)[::-1][: self.n_beta]
        return np.concatenate([self.x_eta, [hist[-1]], lags])

    def predict_open_loop(self, x, u_seq) -> np.ndarray:
        return self.F @ np.asarray(x) + self.G @ np.asarray(u_seq)

    def step(self, y: float) -> float:
        xi = math.log(max(y, _LOG_FLOOR))
        eta = float(self.x_eta[1])
        self.xi_beta_hist.append(xi + eta)
        if len(self.xi_beta_hist) > self.n_beta + 1:
            self.xi_beta_hist.pop(0)
        x = self._state()
        N = self.N
        l = np.full(4 * N, -np.inf)
        u = np.full(4 * N, np.inf)
        # hinge rows e - G u >= F x - xi0 enter through their lower bounds
        l[:N] = self.F @ x - self.xi0
        l[N:2 * N] = 0.0
        l[2 * N:3 * N] = 0.0
        u[2 * N:3 * N] = self.u_max
        l[3 * N] = self.u_prev - self.du_max
        u[3 * N] = self.u_prev + self.du_max
        l[3 * N + 1:] = -self.du_max
        u[3 * N + 1:] = self.du_max
        self.solver.update(l=l, u=u)
        sol = self.solver.solve()
        if sol.status != "solved":
            self.fallback_count += 1
            u0 = self.u_prev
        else:
            u0 = float(sol.x[0])
        # hard limits, enforced exactly
        lo = max(0.0, self.u_prev - self.du_max)
        hi = min(self.u_max, self.u_prev + self.du_max)
        u0 = min(max(u0, lo), hi)
        self.x_eta = self.model.A[:2, :2] @ self.x_eta + self.model.B[:2] * u0
        self.u_prev = u0
        return u0


def tune_pi(run_fn, grid, lam: float):
    """Pick the (kp, ki) grid point minimizing suppression error + lam * energy.

    run_fn(kp, ki) must return (suppression_error, control_energy); the
    full score table is returned alongside the winner.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty gain grid")
    table = []
    best = None
    for kp, ki in grid:
        e, energy = run_fn(kp, ki)
        score = e + lam * energy
        table.append({"kp": kp, "ki": ki, "error": e, "energy": energy, "score": score})
        if best is None or score < best[0]:
            best = (score, kp, ki)
    return {"kp": best[1], "ki": best[2], "score": best[0], "table": table}
