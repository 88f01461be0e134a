"""Multi-step difference-of-convex predictor.

Each prediction step i has its own pair of ICNNs (f1, f2) evaluated on the
regressor (past outputs and inputs) concatenated with the first i future
inputs; the step prediction is f1 - f2. A horizon evaluation, the input
Jacobians of both halves, and a recursive single-step baseline are
provided, plus JSON persistence for the whole model.

All rows of the regressor and all inputs are in normalized units; the
Normalization object maps to and from raw envelope / input units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .icnn import (
    IcnnParams,
    icnn_forward,
    icnn_forward_batch,
    icnn_input_jacobian,
    params_from_dict,
    params_to_dict,
)

MODEL_FORMAT = 1


@dataclass
class Regressor:
    """Measured history z_k: y_past = [y_k ... y_{k-ny+1}], u_past = [u_{k-1} ... u_{k-nu}]."""

    y_past: np.ndarray
    u_past: np.ndarray

    def __post_init__(self):
        self.y_past = np.asarray(self.y_past, dtype=float)
        self.u_past = np.asarray(self.u_past, dtype=float)
        if not (np.all(np.isfinite(self.y_past)) and np.all(np.isfinite(self.u_past))):
            raise ValueError("regressor entries must be finite")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.y_past, self.u_past])


@dataclass(eq=False)
class StepModel:
    """Predictor for one horizon step: f1 - f2 on (z, u_{k:k+i-1})."""

    index: int  # i in 1..N
    f1: IcnnParams
    f2: IcnnParams

    def __post_init__(self):
        if self.f1.arch.input_dim != self.f2.arch.input_dim:
            raise ValueError("f1 and f2 must share the input dimension")


@dataclass
class Normalization:
    """Affine maps between raw and model units; scales must be positive."""

    y_offset: float = 0.0
    y_scale: float = 1.0
    u_offset: float = 0.0
    u_scale: float = 1.0

    def __post_init__(self):
        if self.y_scale <= 0.0 or self.u_scale <= 0.0:
            raise ValueError("normalization scales must be positive")

    def normalize_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_offset) / self.y_scale

    def denormalize_y(self, yn):
        return np.asarray(yn, dtype=float) * self.y_scale + self.y_offset

    def normalize_u(self, u):
        return (np.asarray(u, dtype=float) - self.u_offset) / self.u_scale

    def denormalize_u(self, un):
        return np.asarray(un, dtype=float) * self.u_scale + self.u_offset


@dataclass(eq=False)
class MultiStepModel:
    """N independent step models plus per-step disturbance intervals."""

    ny: int
    nu: int
    steps: list  # of StepModel, index 1..N in order
    w_intervals: np.ndarray  # (N, 2), [w_min, w_max] per step
    norms: Normalization = field(default_factory=Normalization)

    def __post_init__(self):
        self.w_intervals = np.asarray(self.w_intervals, dtype=float).reshape(-1, 2)
        if len(self.steps) < 1:
            raise ValueError("at least one step model is required")
        if self.w_intervals.shape[0] != len(self.steps):
            raise ValueError("one disturbance interval per step is required")
        if np.any(self.w_intervals[:, 0] > self.w_intervals[:, 1]):
            raise ValueError("disturbance intervals must have w_min <= w_max")
        for i, m in enumerate(self.steps, start=1):
            if m.index != i:
                raise ValueError(f"step {i} has index {m.index}")
            expect = self.ny + self.nu + i
            if m.f1.arch.input_dim != expect:
                raise ValueError(
                    f"step {i} networks take {m.f1.arch.input_dim} inputs, expected {expect}"
                )

    @property
    def n_steps(self) -> int:
        return len(self.steps)


def _step_input(m: StepModel, z: Regressor, u_seq) -> np.ndarray:
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.shape != (m.index,):
        raise ValueError(f"u_seq has shape {u_seq.shape}, expected ({m.index},)")
    return np.concatenate([z.vector(), u_seq])


def dc_eval(m: StepModel, z: Regressor, u_seq) -> float:
    """f_i(z, u) = f1(z, u) - f2(z, u)."""
    x = _step_input(m, z, u_seq)
    return icnn_forward(m.f1, x) - icnn_forward(m.f2, x)


def dc_eval_batch(m: StepModel, X: np.ndarray) -> np.ndarray:
    """Batched dc_eval on pre-assembled input rows [z; u_seq]."""
    return icnn_forward_batch(m.f1, X) - icnn_forward_batch(m.f2, X)


def predict_horizon(M: MultiStepModel, z: Regressor, u_seq) -> np.ndarray:
    """Nominal (w = 0) predictions [y_{k+1} ... y_{k+N}] in model units."""
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.shape != (M.n_steps,):
        raise ValueError(f"u_seq has shape {u_seq.shape}, expected ({M.n_steps},)")
    return np.array([dc_eval(m, z, u_seq[: m.index]) for m in M.steps])


def dc_jacobian_u(m: StepModel, z: Regressor, u_seq):
    """u-blocks of the input Jacobians of f1 and f2 (z is measured, not free)."""
    x = _step_input(m, z, u_seq)
    i = m.index
    j1 = icnn_input_jacobian(m.f1, x)[-i:]
    j2 = icnn_input_jacobian(m.f2, x)[-i:]
    return j1, j2


def recursive_predict(m1: StepModel, z: Regressor, u_seq) -> np.ndarray:
    """Iterate the one-step model N times, feeding predictions back.

    After each step the predicted output is shifted into y_past and the
    applied input into u_past.
    """
    if m1.index != 1:
        raise ValueError("recursive prediction requires the one-step model")
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.ndim != 1 or u_seq.size < 1:
        raise ValueError("u_seq must be a non-empty vector")
    y_past = z.y_past.copy()
    u_past = z.u_past.copy()
    out = np.empty(u_seq.size)
    for k, u in enumerate(u_seq):
        yk = dc_eval(m1, Regressor(y_past, u_past), np.array([u]))
        out[k] = yk
        y_past = np.concatenate([[yk], y_past[:-1]])
        u_past = np.concatenate([[u], u_past[:-1]])
    return out


def recursive_predict_batch(m1: StepModel, Y: np.ndarray, U: np.ndarray,
                            U_future: np.ndarray) -> np.ndarray:
    """Vectorized recursive prediction over B samples.

    Y: (B, ny) y_past rows, U: (B, nu) u_past rows, U_future: (B, N).
    Matches recursive_predict row by row.
    """
    if m1.index != 1:
        raise ValueError("recursive prediction requires the one-step model")
    Y = np.asarray(Y, dtype=float).copy()
    U = np.asarray(U, dtype=float).copy()
    U_future = np.asarray(U_future, dtype=float)
    B, N = U_future.shape
    out = np.empty((B, N))
    for k in range(N):
        u_col = U_future[:, k:k + 1]
        X = np.column_stack([Y, U, u_col])
        pred = dc_eval_batch(m1, X)
        out[:, k] = pred
        Y = np.column_stack([pred, Y[:, :-1]])
        U = np.column_stack([u_col, U[:, :-1]])
    return out


def model_to_dict(M: MultiStepModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "n": M.n_steps,
        "ny": M.ny,
        "nu": M.nu,
        "norms": {
            "y_offset": M.norms.y_offset,
            "y_scale": M.norms.y_scale,
            "u_offset": M.norms.u_offset,
            "u_scale": M.norms.u_scale,
        },
        "w_intervals": M.w_intervals.tolist(),
        "steps": [
            {"f1": params_to_dict(m.f1), "f2": params_to_dict(m.f2)} for m in M.steps
        ],
    }


def model_from_dict(d: dict) -> MultiStepModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {d.get('format')!r}")
    steps = [
        StepModel(index=i, f1=params_from_dict(s["f1"]), f2=params_from_dict(s["f2"]))
        for i, s in enumerate(d["steps"], start=1)
    ]
    if len(steps) != int(d["n"]):
        raise ValueError("declared step count does not match the step list")
    return MultiStepModel(
        ny=int(d["ny"]),
        nu=int(d["nu"]),
        steps=steps,
        w_intervals=np.asarray(d["w_intervals"], dtype=float),
        norms=Normalization(**d["norms"]),
    )


def save_model(M: MultiStepModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(M), fh)


def load_model(path) -> MultiStepModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
