"""Dataset construction, projected-Adam training, and prediction evaluation.

A dataset is built from one (envelope, input) record by sliding windows:
regressor z_k (ny past outputs, nu past inputs), the N future inputs, and
the N future outputs as targets. Train and test ranges are disjoint with a
configurable gap between them, and normalization constants are computed
from training-range data only (outputs scaled by their 95th percentile,
inputs by the affine map given at build time).

Each of the N step models is trained independently: minibatch Adam on the
mean squared error of f1 - f2 against the target, with the non-negativity
projection applied after every optimizer step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dc_predictor import (
    MultiStepModel,
    Normalization,
    Regressor,
    StepModel,
    dc_eval_batch,
    recursive_predict_batch,
)
from .icnn import IcnnArch, icnn_backward_batch, icnn_forward_batch, icnn_init


def nearest_rank_percentile(values, p: float) -> float:
    """Nearest-rank percentile: element ceil(p * n) of the ascending sort."""
    values = np.sort(np.asarray(values, dtype=float).ravel())
    n = values.size
    if n == 0:
        raise ValueError("empty sample")
    if not 0.0 < p <= 1.0:
        raise ValueError("percentile must be in (0, 1]")
    idx = int(math.ceil(p * n)) - 1
    return float(values[idx])


@dataclass(eq=False)
class Dataset:
    """Sliding-window samples plus disjoint train/test ranges."""

    reg: np.ndarray      # (S, ny + nu) raw regressor rows [y_past, u_past]
    useq: np.ndarray     # (S, N) raw future inputs
    targets: np.ndarray  # (S, N) raw future outputs
    ny: int
    nu: int
    n_steps: int
    train_range: tuple   # (start, stop) sample indices
    test_range: tuple
    split_offset: int
    norms: Normalization

    @property
    def n_samples(self):
        return self.reg.shape[0]

    @property
    def n_train(self):
        return self.train_range[1] - self.train_range[0]

    @property
    def n_test(self):
        return self.test_range[1] - self.test_range[0]

    def step_inputs(self, step: int, rows: slice) -> np.ndarray:
        """Normalized network input rows [z, u_{0:step}] for one step model."""
        z = np.column_stack([
            self.norms.normalize_y(self.reg[rows, : self.ny]),
            self.norms.normalize_u(self.reg[rows, self.ny:]),
        ])
        return np.column_stack([z, self.norms.normalize_u(self.useq[rows, :step])])

    def step_targets(self, step: int, rows: slice) -> np.ndarray:
        return self.norms.normalize_y(self.targets[rows, step - 1])

    def regressor_at(self, idx: int) -> Regressor:
        """Normalized regressor for one sample."""
        return Regressor(
            y_past=self.norms.normalize_y(self.reg[idx, : self.ny]),
            u_past=self.norms.normalize_u(self.reg[idx, self.ny:]),
        )


def build_dataset(y, u, ny: int, nu: int, n_steps: int, split_offset: int,
                  test_size: int | None = None, y_scale_pct: float = 0.95) -> Dataset:
    """Window one record into samples and fix the train/gap/test layout."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if y.shape != u.shape or y.ndim != 1:
        raise ValueError("y and u must be 1-D series of equal length")
    k_min = max(ny - 1, nu)
    k_max = y.size - 1 - n_steps
    n = k_max - k_min + 1
    if n < 1:
        raise ValueError(
            f"series of length {y.size} is too short for ny={ny}, nu={nu}, N={n_steps}"
        )
    reg = np.empty((n, ny + nu))
    useq = np.empty((n, n_steps))
    targets = np.empty((n, n_steps))
    for s, k in enumerate(range(k_min, k_max + 1)):
        reg[s, :ny] = y[k::-1][:ny]
        reg[s, ny:] = u[k - 1::-1][:nu]
        useq[s] = u[k:k + n_steps]
        targets[s] = y[k + 1:k + 1 + n_steps]
    if test_size is None:
        test_size = min(n // 5, 10_000)
    if test_size > 0 and n <= test_size + split_offset:
        raise ValueError("series too short for the requested test split and offset")
    train_stop = n - test_size - split_offset if test_size > 0 else n
    ds = Dataset(
        reg=reg, useq=useq, targets=targets, ny=ny, nu=nu, n_steps=n_steps,
        train_range=(0, train_stop), test_range=(n - test_size, n),
        split_offset=split_offset, norms=Normalization(),
    )
    # normalization constants may only see training-range data
    train_y = y[: k_min + train_stop + n_steps + 1]
    scale = nearest_rank_percentile(train_y, y_scale_pct)
    if scale <= 0.0:
        scale = max(float(np.max(np.abs(train_y))), 1.0)
    ds.norms = Normalization(y_offset=0.0, y_scale=scale, u_offset=0.0, u_scale=1.0)
    return ds


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0.0:
            raise ValueError("invalid training configuration")


class TrainingError(RuntimeError):
    def __init__(self, step, epoch, message):
        super().__init__(f"step {step}, epoch {epoch}: {message}")
        self.step = step
        self.epoch = epoch


class _Adam:
    """Projected Adam over the parameter arrays of one ICNN pair."""

    def __init__(self, params_list, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.state = []
        for p in params_list:
            arrays = self._arrays(p)
            self.state.append([(np.zeros_like(a), np.zeros_like(a)) for a in arrays])

    @staticmethod
    def _arrays(p):
        out = [w for w in p.W if w is not None]
        out += p.D
        out += p.b
        out += [p.w_out, p.d_out]
        return out

    @staticmethod
    def _grad_arrays(g):
        out = [w for w in g.W if w is not None]
        out += g.D
        out += g.b
        out += [g.w_out, g.d_out]
        return out

    def step(self, params_list, grads_list):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, slots in zip(params_list, grads_list, self.state):
            arrays = self._arrays(p)
            garrays = self._grad_arrays(g)
            for a, ga, (m, v) in zip(arrays, garrays, slots):
                m *= c.beta1
                m += (1.0 - c.beta1) * ga
                v *= c.beta2
                v += (1.0 - c.beta2) * ga * ga
                a -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            # the scalar output bias is updated by the caller


def _adam_scalar(state, g, cfg, t):
    m, v = state
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
    delta = cfg.learning_rate * (m / (1.0 - cfg.beta1 ** t)) / (
        math.sqrt(v / (1.0 - cfg.beta2 ** t)) + cfg.eps
    )
    return (m, v), delta


def _project_inplace(p):
    for l in range(1, p.arch.n_hidden):
        np.maximum(p.W[l], 0.0, out=p.W[l])
    np.maximum(p.w_out, 0.0, out=p.w_out)


def train_step_model(ds: Dataset, step: int, hidden_widths, cfg: TrainConfig):
    """Train one step model; returns (StepModel, per-epoch loss rows)."""
    d_in = ds.ny + ds.nu + step
    arch = IcnnArch(input_dim=d_in, hidden_widths=tuple(hidden_widths))
    f1 = icnn_init(arch, seed=cfg.seed * 1000 + step * 2)
    f2 = icnn_init(arch, seed=cfg.seed * 1000 + step * 2 + 1)
    X_train = ds.step_inputs(step, slice(*ds.train_range))
    t_train = ds.step_targets(step, slice(*ds.train_range))
    X_val = ds.step_inputs(step, slice(*ds.test_range))
    t_val = ds.step_targets(step, slice(*ds.test_range))
    if X_train.shape[0] == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng([cfg.seed, step])
    adam = _Adam([f1, f2], cfg)
    bias_state = [(0.0, 0.0), (0.0, 0.0)]
    n = X_train.shape[0]
    curves = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            X = X_train[rows]
            t = t_train[rows]
            pred = icnn_forward_batch(f1, X) - icnn_forward_batch(f2, X)
            err = pred - t
            loss = float(np.mean(err ** 2))
            if not np.isfinite(loss):
                raise TrainingError(step, epoch, "non-finite training loss")
            epoch_loss += loss * rows.size
            upstream = (2.0 / rows.size) * err
            g1 = icnn_backward_batch(f1, X, upstream)
            g2 = icnn_backward_batch(f2, X, -upstream)
            adam.step([f1, f2], [g1, g2])
            bias_state[0], d1 = _adam_scalar(bias_state[0], g1.b_out, cfg, adam.t)
            bias_state[1], d2 = _adam_scalar(bias_state[1], g2.b_out, cfg, adam.t)
            f1.b_out -= d1
            f2.b_out -= d2
            _project_inplace(f1)
            _project_inplace(f2)
        train_loss = epoch_loss / n
        if X_val.shape[0] > 0:
            val_pred = icnn_forward_batch(f1, X_val) - icnn_forward_batch(f2, X_val)
            val_loss = float(np.mean((val_pred - t_val) ** 2))
        else:
            val_loss = float("nan")
        curves.append({"epoch": epoch, "step": step,
                       "train_loss": train_loss, "val_loss": val_loss})
    return StepModel(index=step, f1=f1, f2=f2), curves


def train_multistep(ds: Dataset, hidden_widths, cfg: TrainConfig):
    """Train all N step models independently.

    Returns (MultiStepModel, loss curve rows). Disturbance intervals start
    at zero width; run calibrate_disturbance afterwards.
    """
    steps = []
    curves = []
    for i in range(1, ds.n_steps + 1):
        m, c = train_step_model(ds, i, hidden_widths, cfg)
        steps.append(m)
        curves.extend(c)
    model = MultiStepModel(
        ny=ds.ny, nu=ds.nu, steps=steps,
        w_intervals=np.zeros((ds.n_steps, 2)), norms=ds.norms,
    )
    return model, curves


def _step_residuals(M: MultiStepModel, ds: Dataset, step: int, rows: slice) -> np.ndarray:
    """Signed residuals target - prediction, in model (normalized) units."""
    X = ds.step_inputs(step, rows)
    t = ds.step_targets(step, rows)
    if X.shape[0] == 0:
        raise ValueError("empty split for residual computation")
    return t - dc_eval_batch(M.steps[step - 1], X)


def calibrate_disturbance(M: MultiStepModel, ds: Dataset,
                          percentile: float = 0.80) -> MultiStepModel:
    """Set each disturbance interval to +-(nearest-rank percentile of the
    absolute training residuals); symmetric by construction."""
    w = np.empty((M.n_steps, 2))
    for i in range(1, M.n_steps + 1):
        e = _step_residuals(M, ds, i, slice(*ds.train_range))
        q = nearest_rank_percentile(np.abs(e), percentile)
        w[i - 1] = (-q, q)
    return MultiStepModel(ny=M.ny, nu=M.nu, steps=M.steps, w_intervals=w, norms=M.norms)


PREDICT_MODES = ("multi_step", "recursive", "ari")


def eval_prediction_errors(M: MultiStepModel, ds: Dataset, mode: str,
                           ari_model=None) -> dict:
    """Per-step mean and max absolute error on the test split, in raw units."""
    if mode not in PREDICT_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    rows = slice(*ds.test_range)
    n_test = ds.n_test
    if n_test == 0:
        raise ValueError("empty test split")
    targets = ds.targets[rows]  # raw units
    N = ds.n_steps
    if mode == "multi_step":
        preds = np.column_stack([
            M.norms.denormalize_y(dc_eval_batch(M.steps[i - 1], ds.step_inputs(i, rows)))
            for i in range(1, N + 1)
        ])
    elif mode == "recursive":
        Y = M.norms.normalize_y(ds.reg[rows, : ds.ny])
        U = M.norms.normalize_u(ds.reg[rows, ds.ny:])
        un = M.norms.normalize_u(ds.useq[rows])
        preds = M.norms.denormalize_y(recursive_predict_batch(M.steps[0], Y, U, un))
    else:
        if ari_model is None:
            raise ValueError("ari mode requires an identified AriModel")
        from .baselines import ari_forecast
        preds = np.empty((n_test, N))
        tiny = 1e-12
        for j in range(n_test):
            y_hist = ds.reg[ds.test_range[0] + j, : ds.ny][::-1]  # oldest first
            xi = np.log(np.maximum(y_hist, tiny))
            preds[j] = np.exp(ari_forecast(ari_model, xi, N))
    err = np.abs(preds - targets)
    return {"mae": err.mean(axis=0), "max_abs": err.max(axis=0)}
