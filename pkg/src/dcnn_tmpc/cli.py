"""Command-line interface for the experiment pipeline.

Subcommands cover the full workflow: synthesize data, train and calibrate
the multi-step predictor, evaluate prediction accuracy, tune the PI
baseline, run single closed-loop simulations, run the multi-seed
controller comparison, and render SVG figures from emitted CSVs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .baselines import identify_ari
from .config import ExperimentConfig, config_to_dict, load_config
from .dc_predictor import load_model, save_model
from .harness import (
    make_controller,
    make_patient,
    make_training_record,
    read_trajectory_csv,
    run_comparison,
    run_seed,
    tune_pi_gains,
    write_diagnostics_jsonl,
    write_trajectory_csv,
)
from .patient_model import synth_beta_lfp
from .svgplot import line_chart
from .training import (
    build_dataset,
    calibrate_disturbance,
    eval_prediction_errors,
    train_multistep,
)


def _load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return load_config(path)


def _read_record_csv(path):
    data = np.genfromtxt(path, delimiter=",", names=True)
    if data.dtype.names is None or "y" not in data.dtype.names:
        raise ValueError(f"{path}: expected a CSV with header t,y,u")
    u = data["u"] if "u" in data.dtype.names else np.zeros(data["y"].size)
    return np.atleast_1d(data["t"]), np.atleast_1d(data["y"]), np.atleast_1d(u)


def _write_record_csv(path, t, y, u):
    with open(path, "w") as fh:
        fh.write("t,y,u\n")
        for k in range(len(t)):
            fh.write(f"{t[k]:.6f},{y[k]:.6f},{u[k]:.6f}\n")


def cmd_synth_data(args):
    cfg = _load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    duration = args.duration if args.duration else cfg.data.train_duration_s
    seed = args.seed if args.seed is not None else cfg.data.train_seed
    raw = synth_beta_lfp(duration, cfg.data.fs_raw, cfg.data.burst, seed=[seed, 0])
    lfp_path = os.path.join(args.out, "lfp.csv")
    with open(lfp_path, "w") as fh:
        fh.write("t,lfp\n")
        for k, v in enumerate(raw):
            fh.write(f"{k / cfg.data.fs_raw:.6f},{v:.6f}\n")
    t, y, u = make_training_record(cfg, modulated=(args.kind == "modulated"),
                                   duration_s=duration, seed=seed)
    data_path = os.path.join(args.out, "data.csv")
    _write_record_csv(data_path, t, y, u)
    print(f"wrote {lfp_path} ({raw.size} samples at {cfg.data.fs_raw:g} Hz)")
    print(f"wrote {data_path} ({len(t)} samples at {cfg.data.fs:g} Hz, "
          f"{args.kind})")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    _, y, u = _read_record_csv(args.data)
    hidden = tuple(args.hidden) if args.hidden else cfg.model.hidden
    ds = build_dataset(y, u, cfg.model.ny, cfg.model.nu, cfg.model.n_steps,
                       split_offset=cfg.train.split_offset,
                       test_size=cfg.train.test_size)
    model, curves = train_multistep(ds, hidden, cfg.train.to_train_config())
    model = calibrate_disturbance(model, ds, cfg.train.w_percentile)
    save_model(model, args.out)
    print(f"wrote {args.out} (N={model.n_steps}, hidden={list(hidden)}, "
          f"{ds.n_train} training samples)")
    if args.curves:
        with open(args.curves, "w") as fh:
            fh.write("epoch,step,train_loss,val_loss\n")
            for row in curves:
                fh.write(f"{row['epoch']},{row['step']},"
                         f"{row['train_loss']:.8e},{row['val_loss']:.8e}\n")
        print(f"wrote {args.curves}")
    return 0


def cmd_calibrate(args):
    cfg = _load_config(args.config)
    model = load_model(args.model)
    _, y, u = _read_record_csv(args.data)
    ds = build_dataset(y, u, model.ny, model.nu, model.n_steps,
                       split_offset=cfg.train.split_offset,
                       test_size=cfg.train.test_size)
    model = calibrate_disturbance(model, ds, cfg.train.w_percentile)
    out = args.out or args.model
    save_model(model, out)
    widths = ", ".join(f"{w[1] - w[0]:.4f}" for w in model.w_intervals)
    print(f"wrote {out} (interval widths per step: {widths})")
    return 0


def cmd_predict_eval(args):
    cfg = _load_config(args.config)
    model = load_model(args.model)
    _, y, u = _read_record_csv(args.data)
    ds = build_dataset(y, u, model.ny, model.nu, model.n_steps,
                       split_offset=cfg.train.split_offset,
                       test_size=cfg.train.test_size)
    train_stop_src = max(model.ny - 1, model.nu) + ds.train_range[1]
    ari = identify_ari(np.log(np.maximum(y[:train_stop_src], 1e-12)),
                       cfg.ari.n_beta)
    rows = []
    for mode in ("multi_step", "recursive", "ari"):
        out = eval_prediction_errors(model, ds, mode, ari_model=ari)
        for step in range(model.n_steps):
            rows.append((mode, step + 1, out["mae"][step], out["max_abs"][step]))
    os.makedirs(args.out, exist_ok=True)
    table = os.path.join(args.out, "prediction_errors.csv")
    with open(table, "w") as fh:
        fh.write("mode,step,mae,max_abs_error\n")
        for mode, step, mae, mx in rows:
            fh.write(f"{mode},{step},{mae:.8e},{mx:.8e}\n")
    print(f"wrote {table}")
    print(f"{'mode':<12}{'step':>5}{'MAE':>14}{'max abs':>14}")
    for mode, step, mae, mx in rows:
        print(f"{mode:<12}{step:>5}{mae:>14.6f}{mx:>14.6f}")
    svg = os.path.join(args.out, "prediction_errors.svg")
    series = []
    for mode in ("multi_step", "recursive", "ari"):
        vals = [r[2] for r in rows if r[0] == mode]
        series.append({"x": np.arange(1, len(vals) + 1), "y": np.asarray(vals),
                       "label": mode})
    line_chart(svg, series, title="Mean absolute prediction error per step",
               xlabel="prediction step", ylabel="MAE [envelope units]")
    print(f"wrote {svg}")
    return 0


def cmd_tune_pi(args):
    cfg = _load_config(args.config)
    result = tune_pi_gains(cfg)
    print(f"best gains: kp={result['kp']:g} ki={result['ki']:g} "
          f"(score {result['score']:.6f})")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result, fh, sort_keys=True, indent=1)
            fh.write("\n")
        print(f"wrote {args.out}")
    return 0


def cmd_simulate(args):
    cfg = _load_config(args.config)
    model = load_model(args.model) if args.model else None
    seed = args.seed if args.seed is not None else 0
    result = run_seed(cfg, model, seed, controllers=[args.controller])
    os.makedirs(args.out, exist_ok=True)
    run = result["runs"][args.controller]
    traj_path = os.path.join(args.out, f"{args.controller}.csv")
    write_trajectory_csv(traj_path, run["trajectory"])
    print(f"wrote {traj_path}")
    if run["trajectory"].diagnostics:
        diag_path = os.path.join(args.out, f"{args.controller}_diag.jsonl")
        write_diagnostics_jsonl(diag_path, run["trajectory"])
        print(f"wrote {diag_path}")
    m = run["metrics"]
    print(f"beta0={result['beta0']:.6f} suppression_error={m.suppression_error:.6f} "
          f"control_energy={m.control_energy:.6f}")
    return 0


def cmd_compare(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.compare.master_seed = args.seed
    summary = run_comparison(cfg, args.model, args.out)
    print(f"wrote {os.path.join(args.out, 'summary.json')}")
    for name, imp in summary["aggregates"]["improvement"].items():
        e = imp["suppression_error"]["mean"]
        u = imp["control_energy"]["mean"]
        frac = imp["frac_both_better"]
        e_s = f"{e:.1f}%" if e is not None else "n/a"
        u_s = f"{u:.1f}%" if u is not None else "n/a"
        print(f"vs {name:<12} error {e_s:>8}  energy {u_s:>8}  "
              f"both-better {100 * frac:.0f}% of seeds")
    if summary["failures"]:
        print(f"{len(summary['failures'])} seed(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_plot(args):
    if args.kind == "traj":
        series = []
        for path in args.inputs:
            traj = read_trajectory_csv(path)
            series.append({"x": traj.t, "y": traj.y, "label": traj.controller})
        if len(args.inputs) == 1:
            traj = read_trajectory_csv(args.inputs[0])
            series.append({"x": traj.t, "y": traj.y_nominal, "label": "nominal",
                           "color": "#999999"})
        line_chart(args.out, series, title="Closed-loop beta envelope",
                   xlabel="time [s]", ylabel="envelope")
    else:
        series = []
        for path in args.inputs:
            data = np.genfromtxt(path, delimiter=",", names=True)
            names = data.dtype.names
            x = np.atleast_1d(data[names[0]])
            for col in names[1:]:
                series.append({"x": x, "y": np.atleast_1d(data[col]),
                               "label": col})
        line_chart(args.out, series, title=os.path.basename(args.inputs[0]),
                   xlabel="", ylabel="")
    print(f"wrote {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="dcnn-tmpc",
        description="Closed-loop DBS control toolkit: DCNN tube MPC, baseline "
                    "controllers, and a synthetic patient simulator.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate raw LFP and envelope CSVs")
    sp.add_argument("--config", help="TOML/JSON experiment configuration")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--kind", choices=("modulated", "nominal"),
                    default="modulated",
                    help="PRBS-stimulated record or stimulation-free record")
    sp.add_argument("--duration", type=float, help="record length in seconds")
    sp.add_argument("--seed", type=int, help="generator seed override")
    sp.set_defaults(fn=cmd_synth_data)

    sp = sub.add_parser("train", help="train the multi-step predictor")
    sp.add_argument("--config", help="TOML/JSON experiment configuration")
    sp.add_argument("--data", required=True, help="t,y,u CSV record")
    sp.add_argument("--out", required=True, help="model JSON output path")
    sp.add_argument("--curves", help="optional loss-curve CSV output")
    sp.add_argument("--hidden", type=int, nargs="+",
                    help="hidden layer widths override")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("calibrate",
                        help="recalibrate the disturbance intervals of a model")
    sp.add_argument("--config", help="TOML/JSON experiment configuration")
    sp.add_argument("--data", required=True, help="t,y,u CSV record")
    sp.add_argument("--model", required=True, help="model JSON path")
    sp.add_argument("--out", help="output path (default: overwrite input)")
    sp.set_defaults(fn=cmd_calibrate)

    sp = sub.add_parser("predict-eval",
                        help="per-step prediction errors of the three predictors")
    sp.add_argument("--config", help="TOML/JSON experiment configuration")
    sp.add_argument("--data", required=True, help="t,y,u CSV record")
    sp.add_argument("--model", required=True, help="model JSON path")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=cmd_predict_eval)

    sp = sub.add_parser("tune-pi", help="grid-search the PI baseline gains")
    sp.add_argument("--config", help="TOML/JSON experiment configuration")
    sp.add_argument("--out", help="gains JSON output path")
    sp.set_defaults(fn=cmd_tune_pi)

    sp = sub.add_parser("simulate", help="one closed-loop run of one controller")
    sp.add_argument("--config", help="TOML/JSON experiment configuration")
    sp.add_argument("--model", help="model JSON (required for dcnn_tmpc)")
    sp.add_argument("--controller", default="dcnn_tmpc",
                    help="dcnn_tmpc | linear_mpc | pi | on_off | null | max")
    sp.add_argument("--seed", type=int, help="seed index (default 0)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("compare", help="multi-seed controller comparison")
    sp.add_argument("--config", help="TOML/JSON experiment configuration")
    sp.add_argument("--model", required=True, help="model JSON path")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, help="master seed override")
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("plot", help="render SVG figures from emitted CSVs")
    sp.add_argument("--kind", choices=("traj", "metrics"), default="traj")
    sp.add_argument("--out", required=True, help="SVG output path")
    sp.add_argument("inputs", nargs="+", help="input CSV files")
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
