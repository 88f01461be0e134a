"""Closed-loop experiment orchestration.

Runs one patient per (seed, controller) pair. Within a seed, every
controller sees the identical nominal envelope segment and the identical
patient drift realization (the patient is re-created from the same seed),
so the comparison is paired. The first stretch of every run is a
stimulation-free identification window: it supplies the threshold and
output-limit statistics, the ARI identification data for the linear MPC,
and the measurement history the predictive controllers start from.

Seeds can run in parallel worker processes; DCNN_TMPC_THREADS caps the
worker count. Reports are written with fixed formatting so repeated runs
of the same configuration are byte-identical.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .baselines import LinearMpcController, OnOffController, PiController, tune_pi
from .config import ExperimentConfig, config_to_dict
from .dc_predictor import MultiStepModel, load_model
from .patient_model import (
    PatientState,
    beta_modulate,
    input_scale_for,
    nominal_envelope,
    patient_step,
)
from .qp_solver import QpSettings
from .sigproc import PrbsConfig, generate_prbs
from .svgplot import line_chart
from .tmpc import DcnnTmpcController, MpcLimits, MpcWeights, ScpSettings
from .training import nearest_rank_percentile

ENV_THREADS = "DCNN_TMPC_THREADS"


@dataclass
class RunMetrics:
    suppression_error: float  # T_s * sum of hinge excess above beta0
    control_energy: float     # T_s * sum of squared input

    def as_dict(self):
        return {"suppression_error": self.suppression_error,
                "control_energy": self.control_energy}


@dataclass
class Trajectory:
    controller: str
    t: np.ndarray
    y_nominal: np.ndarray
    y: np.ndarray
    u: np.ndarray
    eta: np.ndarray
    diagnostics: list
    fallback_count: int = 0


def compute_metrics(traj: Trajectory, beta0: float) -> RunMetrics:
    ts = float(traj.t[1] - traj.t[0]) if traj.t.size > 1 else 0.02
    excess = np.maximum(traj.y - beta0, 0.0)
    return RunMetrics(
        suppression_error=float(ts * np.sum(excess)),
        control_energy=float(ts * np.sum(traj.u ** 2)),
    )


def percent_improvement(base: RunMetrics, test: RunMetrics) -> dict:
    """100 * (base - test) / base per metric; None where the base is zero."""
    out = {}
    for key in ("suppression_error", "control_energy"):
        b = getattr(base, key)
        t = getattr(test, key)
        out[key] = None if b <= 0.0 else 100.0 * (b - t) / b
    return out


class NullController:
    name = "null"

    def step(self, y):
        return 0.0


class MaxController:
    """Ramps to full stimulation as fast as the rate limit allows."""

    name = "max"

    def __init__(self, du_max, u_max):
        self.du_max = du_max
        self.u_max = u_max
        self.u_prev = 0.0

    def step(self, y):
        self.u_prev = min(self.u_prev + self.du_max, self.u_max)
        return self.u_prev


def make_controller(name: str, cfg: ExperimentConfig, model: MultiStepModel | None,
                    ident_y: np.ndarray, beta0: float, y_min: float, y_max: float):
    lim = cfg.limits
    ts = cfg.ts()
    if name == "on_off":
        return OnOffController(beta0, lim.du_max, lim.u_max)
    if name == "pi":
        return PiController(beta0, lim.du_max, lim.u_max, cfg.pi.kp, cfg.pi.ki, ts)
    if name == "linear_mpc":
        scale = input_scale_for(cfg.patient.stim_params(), cfg.patient.atten_target)
        return LinearMpcController(
            ident_y=ident_y, beta0=beta0, du_max=lim.du_max, u_max=lim.u_max,
            stim_params=cfg.patient.stim_params(), ts=ts,
            n_horizon=cfg.model.n_steps, n_beta=cfg.ari.n_beta,
            r_weight=cfg.ari.r_weight, input_scale=scale,
        )
    if name == "dcnn_tmpc":
        if model is None:
            raise ValueError("the DCNN TMPC controller requires a trained model")
        norm = model.norms
        weights = MpcWeights(
            Q=cfg.mpc.Q, R=cfg.mpc.R,
            beta0=float(norm.normalize_y(beta0)),
            rho_soft=cfg.mpc.rho_soft, tube_reg=cfg.mpc.tube_reg,
        )
        limits = MpcLimits(
            u_max=lim.u_max, du_max=lim.du_max,
            y_min=float(norm.normalize_y(y_min)),
            y_max=float(norm.normalize_y(y_max)),
        )
        settings = ScpSettings(
            max_iters=cfg.mpc.max_iters, dj_min_rel=cfg.mpc.dj_min_rel,
            qp=QpSettings(eps_abs=cfg.mpc.qp_eps, eps_rel=cfg.mpc.qp_eps,
                          max_iter=cfg.mpc.qp_max_iter),
        )
        return DcnnTmpcController(model, weights, limits, settings, ident_y)
    if name == "null":
        return NullController()
    if name == "max":
        return MaxController(lim.du_max, lim.u_max)
    raise ValueError(f"unknown controller {name!r}")


def simulate_closed_loop(controller, patient: PatientState, y_beta: np.ndarray,
                         ts: float) -> Trajectory:
    """Run the measure -> control -> stimulate loop over len(y_beta) - 1 steps."""
    n = y_beta.size - 1
    if n < 1:
        raise ValueError("the envelope stream is too short for a closed-loop run")
    t = np.arange(n) * ts
    y_rec = np.empty(n)
    u_rec = np.empty(n)
    eta_rec = np.empty(n)
    y_k = beta_modulate(y_beta[0], patient.eta)
    for k in range(n):
        eta_rec[k] = patient.eta
        u_k = controller.step(float(y_k))
        y_rec[k] = y_k
        u_rec[k] = u_k
        patient, y_k = patient_step(patient, u_k, y_beta[k + 1])
    return Trajectory(
        controller=getattr(controller, "name", "controller"),
        t=t, y_nominal=y_beta[:n].copy(), y=y_rec, u=u_rec, eta=eta_rec,
        diagnostics=list(getattr(controller, "diagnostics", [])),
        fallback_count=int(getattr(controller, "fallback_count", 0)),
    )


def derive_thresholds(ident_y: np.ndarray, cfg: ExperimentConfig):
    """Threshold and output limits from the stimulation-free window."""
    beta0 = nearest_rank_percentile(ident_y, cfg.mpc.beta0_pct)
    y_max = nearest_rank_percentile(ident_y, cfg.mpc.y_max_pct)
    y_min = float(np.min(ident_y))
    return beta0, y_min, y_max


def seed_envelope(cfg: ExperimentConfig, seed_index: int) -> np.ndarray:
    """Nominal envelope for one comparison seed (ident + run + 1 samples)."""
    n_ident = int(round(cfg.compare.ident_s * cfg.data.fs))
    n_run = int(round(cfg.compare.duration_s * cfg.data.fs))
    duration = (n_ident + n_run + 1) / cfg.data.fs
    return nominal_envelope(
        duration, cfg.data.fs_raw, cfg.data.fs, cfg.data.burst,
        seed=[cfg.compare.master_seed, seed_index, 0],
    )[: n_ident + n_run + 1]


def make_patient(cfg: ExperimentConfig, seed_index: int) -> PatientState:
    return PatientState.create(
        cfg.patient.stim_params(), cfg.ts(),
        seed=[cfg.compare.master_seed, seed_index, 1],
        drift=cfg.patient.drift_config(),
        atten_target=cfg.patient.atten_target,
    )


def run_seed(cfg: ExperimentConfig, model: MultiStepModel | None, seed_index: int,
             controllers=None) -> dict:
    """One paired comparison: same envelope and drift for every controller."""
    controllers = list(controllers or cfg.compare.controllers)
    env = seed_envelope(cfg, seed_index)
    n_ident = int(round(cfg.compare.ident_s * cfg.data.fs))
    ident_y = env[:n_ident]
    run_env = env[n_ident:]
    beta0, y_min, y_max = derive_thresholds(ident_y, cfg)
    out = {"beta0": beta0, "y_min": y_min, "y_max": y_max, "runs": {}}
    for name in controllers:
        patient = make_patient(cfg, seed_index)
        ctrl = make_controller(name, cfg, model, ident_y, beta0, y_min, y_max)
        traj = simulate_closed_loop(ctrl, patient, run_env, cfg.ts())
        traj.controller = name
        metrics = compute_metrics(traj, beta0)
        out["runs"][name] = {"trajectory": traj, "metrics": metrics}
    return out


def write_trajectory_csv(path, traj: Trajectory):
    with open(path, "w") as fh:
        fh.write("t,y_nominal,y,u,eta,controller\n")
        for k in range(traj.t.size):
            fh.write(f"{traj.t[k]:.6f},{traj.y_nominal[k]:.6f},{traj.y[k]:.6f},"
                     f"{traj.u[k]:.6f},{traj.eta[k]:.6f},{traj.controller}\n")


def read_trajectory_csv(path) -> Trajectory:
    rows = np.genfromtxt(path, delimiter=",", skip_header=1,
                         usecols=(0, 1, 2, 3, 4))
    rows = np.atleast_2d(rows)
    with open(path) as fh:
        fh.readline()
        first = fh.readline().strip().split(",")
    return Trajectory(controller=first[-1], t=rows[:, 0], y_nominal=rows[:, 1],
                      y=rows[:, 2], u=rows[:, 3], eta=rows[:, 4], diagnostics=[])


def write_diagnostics_jsonl(path, traj: Trajectory):
    """Per-step controller diagnostics as JSON lines."""
    with open(path, "w") as fh:
        for d in traj.diagnostics:
            rec = {"k": d["k"], "iters": d["iters"],
                   "J_history": list(map(float, d["J_history"])),
                   "u_applied": float(d["u_applied"]),
                   "s_max": list(map(float, d["s_max"])),
                   "slack_max": float(d["slack_max"]),
                   "fallback": bool(d["fallback"])}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _thread_budget() -> int:
    env = os.environ.get(ENV_THREADS)
    if env:
        return max(1, int(env))
    return min(2, os.cpu_count() or 1)


_WORKER_STATE = {}


def _comparison_worker(args):
    cfg_dict, model_path, seed_index = args
    from .config import config_from_dict
    if "cfg" not in _WORKER_STATE:
        _WORKER_STATE["cfg"] = config_from_dict(cfg_dict)
        _WORKER_STATE["model"] = load_model(model_path) if model_path else None
    cfg = _WORKER_STATE["cfg"]
    model = _WORKER_STATE["model"]
    result = run_seed(cfg, model, seed_index)
    # strip non-picklable diagnostics down to plain dicts
    for name, run in result["runs"].items():
        traj = run["trajectory"]
        run["trajectory"] = Trajectory(
            controller=traj.controller, t=traj.t, y_nominal=traj.y_nominal,
            y=traj.y, u=traj.u, eta=traj.eta,
            diagnostics=_plain_diagnostics(traj.diagnostics),
            fallback_count=traj.fallback_count,
        )
    return seed_index, result


def _plain_diagnostics(diags):
    out = []
    for d in diags:
        out.append({"k": d["k"], "iters": d["iters"],
                    "J_history": [float(v) for v in d["J_history"]],
                    "u_applied": float(d["u_applied"]),
                    "s_max": [float(v) for v in d["s_max"]],
                    "slack_max": float(d["slack_max"]),
                    "fallback": bool(d["fallback"])})
    return out


def run_comparison(cfg: ExperimentConfig, model_path, out_dir,
                   reference: str = "dcnn_tmpc") -> dict:
    """The full multi-seed controller comparison.

    Writes per-seed trajectory CSVs, summary.json, and SVG figures into
    out_dir; returns the summary dictionary. Per-seed failures are recorded
    and do not abort the remaining seeds.
    """
    os.makedirs(out_dir, exist_ok=True)
    model = load_model(model_path) if model_path else None
    if "dcnn_tmpc" in cfg.compare.controllers and model is None:
        raise FileNotFoundError("a trained model file is required for dcnn_tmpc")
    seeds = cfg.seeds()
    roster = list(cfg.compare.controllers)
    if reference not in roster:
        reference = roster[0]
    results = {}
    failures = []
    workers = _thread_budget()
    if workers > 1 and len(seeds) > 1:
        args = [(config_to_dict(cfg), str(model_path) if model_path else None, s)
                for s in seeds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for seed_index, result in pool.map(_comparison_worker, args):
                results[seed_index] = result
    else:
        for s in seeds:
            try:
                results[s] = run_seed(cfg, model, s)
            except Exception as exc:  # record, continue with other seeds
                failures.append({"seed": s, "error": str(exc)})
    per_seed = {}
    for s in sorted(results):
        result = results[s]
        seed_dir = os.path.join(out_dir, f"seed_{s:03d}")
        os.makedirs(seed_dir, exist_ok=True)
        entry = {"beta0": result["beta0"], "y_min": result["y_min"],
                 "y_max": result["y_max"], "metrics": {}, "improvement": {}}
        ref_metrics = result["runs"][reference]["metrics"]
        for name, run in result["runs"].items():
            write_trajectory_csv(os.path.join(seed_dir, f"{name}.csv"),
                                 run["trajectory"])
            if run["trajectory"].diagnostics:
                write_diagnostics_jsonl(os.path.join(seed_dir, f"{name}_diag.jsonl"),
                                        run["trajectory"])
            entry["metrics"][name] = run["metrics"].as_dict()
            entry["metrics"][name]["fallbacks"] = run["trajectory"].fallback_count
            entry["improvement"][name] = percent_improvement(
                run["metrics"], ref_metrics
            )
        per_seed[str(s)] = entry
    aggregates = _aggregate(per_seed, roster, reference)
    summary = {
        "config": config_to_dict(cfg),
        "reference": reference,
        "controllers": roster,
        "seeds": seeds,
        "per_seed": per_seed,
        "aggregates": aggregates,
        "failures": failures,
        "versions": {"dcnn_tmpc": __version__},
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    _write_figures(cfg, out_dir, results, per_seed, roster, reference)
    return summary


def _aggregate(per_seed, roster, reference):
    agg = {"mean_metrics": {}, "improvement": {}}
    for name in roster:
        errs = [per_seed[s]["metrics"][name]["suppression_error"] for s in per_seed]
        energies = [per_seed[s]["metrics"][name]["control_energy"] for s in per_seed]
        agg["mean_metrics"][name] = {
            "suppression_error": float(np.mean(errs)) if errs else None,
            "control_energy": float(np.mean(energies)) if energies else None,
        }
        if name == reference:
            continue
        imp_e = [per_seed[s]["improvement"][name]["suppression_error"]
                 for s in per_seed]
        imp_u = [per_seed[s]["improvement"][name]["control_energy"]
                 for s in per_seed]
        imp_e = [v for v in imp_e if v is not None]
        imp_u = [v for v in imp_u if v is not None]
        both = [
            s for s in per_seed
            if per_seed[s]["metrics"][reference]["suppression_error"]
            < per_seed[s]["metrics"][name]["suppression_error"]
            and per_seed[s]["metrics"][reference]["control_energy"]
            < per_seed[s]["metrics"][name]["control_energy"]
        ]
        agg["improvement"][name] = {
            "suppression_error": _stats(imp_e),
            "control_energy": _stats(imp_u),
            "frac_both_better": float(len(both) / max(len(per_seed), 1)),
        }
    return agg


def _stats(values):
    if not values:
        return {"mean": None, "min": None, "max": None}
    return {"mean": float(np.mean(values)), "min": float(np.min(values)),
            "max": float(np.max(values))}


def _write_figures(cfg, out_dir, results, per_seed, roster, reference):
    if not results:
        return
    first = results[sorted(results)[0]]
    series_y = [{"x": first["runs"][roster[0]]["trajectory"].t,
                 "y": first["runs"][roster[0]]["trajectory"].y_nominal,
                 "label": "nominal", "color": "#999999"}]
    series_u = []
    for name in roster:
        traj = first["runs"][name]["trajectory"]
        series_y.append({"x": traj.t, "y": traj.y, "label": name})
        series_u.append({"x": traj.t, "y": traj.u, "label": name})
    line_chart(os.path.join(out_dir, "trajectories_seed0.svg"), series_y,
               title="Beta envelope under each controller (first seed)",
               xlabel="time [s]", ylabel="envelope")
    line_chart(os.path.join(out_dir, "inputs_seed0.svg"), series_u,
               title="Control input under each controller (first seed)",
               xlabel="time [s]", ylabel="normalized input")
    seeds_sorted = sorted(per_seed, key=int)
    imp_series = []
    for name in roster:
        if name == reference:
            continue
        vals = [per_seed[s]["improvement"][name]["suppression_error"]
                for s in seeds_sorted]
        vals = [v if v is not None else 0.0 for v in vals]
        imp_series.append({"x": np.arange(len(vals)), "y": np.asarray(vals),
                           "label": f"vs {name}"})
    if imp_series:
        line_chart(os.path.join(out_dir, "improvement_error.svg"), imp_series,
                   title=f"Suppression-error improvement of {reference} per seed",
                   xlabel="seed", ylabel="improvement [%]")


def tune_pi_gains(cfg: ExperimentConfig) -> dict:
    """Grid-search PI gains on short closed-loop runs (no model required)."""
    n_ident = int(round(cfg.compare.ident_s * cfg.data.fs))
    n_run = int(round(cfg.pi.tune_duration_s * cfg.data.fs))
    scenarios = []
    for j in range(cfg.pi.tune_seeds):
        duration = (n_ident + n_run + 1) / cfg.data.fs
        env = nominal_envelope(duration, cfg.data.fs_raw, cfg.data.fs,
                               cfg.data.burst,
                               seed=[cfg.compare.master_seed, 9000 + j, 0])
        env = env[: n_ident + n_run + 1]
        beta0, _, _ = derive_thresholds(env[:n_ident], cfg)
        scenarios.append((env, beta0, 9000 + j))

    def run_fn(kp, ki):
        errs = []
        energies = []
        for env, beta0, pseed in scenarios:
            patient = PatientState.create(
                cfg.patient.stim_params(), cfg.ts(),
                seed=[cfg.compare.master_seed, pseed, 1],
                drift=cfg.patient.drift_config(),
                atten_target=cfg.patient.atten_target,
            )
            ctrl = PiController(beta0, cfg.limits.du_max, cfg.limits.u_max,
                                kp, ki, cfg.ts())
            traj = simulate_closed_loop(ctrl, patient, env[n_ident:], cfg.ts())
            m = compute_metrics(traj, beta0)
            errs.append(m.suppression_error)
            energies.append(m.control_energy)
        return float(np.mean(errs)), float(np.mean(energies))

    grid = [(kp, ki) for kp in cfg.pi.tune_kp for ki in cfg.pi.tune_ki]
    return tune_pi(run_fn, grid, cfg.pi.tune_lambda)


def make_training_record(cfg: ExperimentConfig, modulated: bool = True,
                         duration_s: float | None = None, seed=None):
    """Synthesize one (envelope, input) record for training or evaluation.

    With modulation, a PRBS input stream drives a drifting patient; without,
    the input is zero and the measured envelope equals the nominal one.
    Returns (t, y, u) at the control rate.
    """
    duration = duration_s if duration_s is not None else cfg.data.train_duration_s
    seed = seed if seed is not None else cfg.data.train_seed
    n = int(round(duration * cfg.data.fs))
    y_beta = nominal_envelope(duration + cfg.ts(), cfg.data.fs_raw, cfg.data.fs,
                              cfg.data.burst, seed=[seed, 0])[: n + 1]
    if modulated:
        u = generate_prbs(PrbsConfig(length=n, du_max=cfg.limits.du_max,
                                     u_max=cfg.limits.u_max,
                                     seed=cfg.data.prbs_seed))
        patient = PatientState.create(
            cfg.patient.stim_params(), cfg.ts(), seed=[seed, 1],
            drift=cfg.patient.drift_config(),
            atten_target=cfg.patient.atten_target,
        )
        y = np.empty(n)
        y_k = beta_modulate(y_beta[0], patient.eta)
        for k in range(n):
            y[k] = y_k
            patient, y_k = patient_step(patient, float(u[k]), y_beta[k + 1])
    else:
        u = np.zeros(n)
        y = y_beta[:n].copy()
    t = np.arange(n) / cfg.data.fs
    return t, y, u
