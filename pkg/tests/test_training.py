"""Dataset windowing, projected-Adam training, and calibration checks."""

import numpy as np
import pytest

from dcnn_tmpc.dc_predictor import MultiStepModel, StepModel, dc_eval_batch
from dcnn_tmpc.icnn import IcnnArch, zero_params
from dcnn_tmpc.sigproc import PrbsConfig, generate_prbs
from dcnn_tmpc.training import (
    Dataset,
    TrainConfig,
    TrainingError,
    build_dataset,
    calibrate_disturbance,
    eval_prediction_errors,
    nearest_rank_percentile,
    train_multistep,
    train_step_model,
)

NY, NU, N = 4, 2, 3


def linear_system_record(n, seed=0, a=0.9, b=0.3):
    """Noiseless y_{k+1} = a y_k + b u_k driven by a PRBS input."""
    u = generate_prbs(PrbsConfig(length=n, du_max=0.1, u_max=1.0, seed=seed))
    y = np.empty(n)
    y[0] = 0.5
    for k in range(n - 1):
        y[k + 1] = a * y[k] + b * u[k]
    return y, u


class TestPercentile:
    def test_nearest_rank_example(self):
        assert nearest_rank_percentile(np.arange(1, 11), 0.80) == 8.0

    def test_matches_sort_and_index_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            vals = rng.normal(size=int(rng.integers(1, 200)))
            p = float(rng.uniform(0.01, 1.0))
            srt = np.sort(vals)
            idx = int(np.ceil(p * vals.size)) - 1
            assert nearest_rank_percentile(vals, p) == srt[idx]


class TestBuildDataset:
    def test_single_window(self):
        n = max(NY - 1, NU) + N + 1
        y = np.arange(float(n))
        u = np.arange(float(n)) / 10.0
        ds = build_dataset(y, u, NY, NU, N, split_offset=0, test_size=0)
        assert ds.n_samples == 1

    def test_window_contents(self):
        y = np.arange(100.0)
        u = np.arange(100.0) * 0.01
        ds = build_dataset(y, u, NY, NU, N, split_offset=2, test_size=5)
        k = max(NY - 1, NU) + 7  # sample 7
        s = 7
        np.testing.assert_array_equal(ds.reg[s, :NY], y[k::-1][:NY])
        np.testing.assert_array_equal(ds.reg[s, NY:], u[k - 1::-1][:NU])
        np.testing.assert_array_equal(ds.useq[s], u[k:k + N])
        np.testing.assert_array_equal(ds.targets[s], y[k + 1:k + 1 + N])

    def test_sample_count(self):
        # with nu <= ny - 1 the count formula is len - (ny + N) + 1
        y = np.linspace(0, 1, 57)
        u = np.zeros(57)
        ds = build_dataset(y, u, NY, NU, N, split_offset=0, test_size=0)
        assert ds.n_samples == 57 - (NY + N) + 1

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            build_dataset(np.ones(5), np.ones(5), NY, NU, N, split_offset=0)

    def test_split_disjoint_with_gap(self):
        y, u = linear_system_record(300, seed=1)
        ds = build_dataset(y, u, NY, NU, N, split_offset=10, test_size=50)
        assert ds.train_range[1] + ds.split_offset == ds.test_range[0]
        assert ds.n_test == 50

    def test_normalization_from_train_range_only(self):
        y, u = linear_system_record(400, seed=2)
        ds = build_dataset(y, u, NY, NU, N, split_offset=20, test_size=80)
        k_min = max(NY - 1, NU)
        train_y = y[: k_min + ds.train_range[1] + N + 1]
        expect = nearest_rank_percentile(train_y, 0.95)
        assert ds.norms.y_scale == expect
        # unchanged when the test-range data is corrupted
        y2 = y.copy()
        y2[-60:] *= 100.0
        ds2 = build_dataset(y2, u, NY, NU, N, split_offset=20, test_size=80)
        assert ds2.norms.y_scale == expect


class TestTraining:
    def test_zero_learning_rate_keeps_params(self):
        y, u = linear_system_record(200, seed=3)
        ds = build_dataset(y, u, NY, NU, 1, split_offset=0, test_size=20)
        cfg = TrainConfig(epochs=3, batch_size=32, learning_rate=0.0, seed=5)
        m, _ = train_step_model(ds, 1, (4,), cfg)
        from dcnn_tmpc.icnn import icnn_init
        f1_ref = icnn_init(IcnnArch(NY + NU + 1, (4,)), seed=cfg.seed * 1000 + 2)
        np.testing.assert_array_equal(m.f1.D[0], f1_ref.D[0])
        np.testing.assert_array_equal(m.f1.w_out, f1_ref.w_out)

    def test_linear_system_fit(self):
        y, u = linear_system_record(2200, seed=4)
        ds = build_dataset(y, u, NY, NU, 1, split_offset=50, test_size=200)
        cfg = TrainConfig(epochs=100, batch_size=128, learning_rate=3e-3, seed=1)
        m, curves = train_step_model(ds, 1, (8,), cfg)
        assert curves[-1]["train_loss"] < 1e-3

    def test_loss_improves(self):
        y, u = linear_system_record(1200, seed=5)
        ds = build_dataset(y, u, NY, NU, N, split_offset=20, test_size=100)
        cfg = TrainConfig(epochs=12, batch_size=64, learning_rate=1e-3, seed=2)
        _, curves = train_multistep(ds, (6,), cfg)
        for step in range(1, N + 1):
            rows = [c for c in curves if c["step"] == step]
            assert rows[-1]["train_loss"] <= rows[0]["train_loss"]

    def test_projection_invariant_after_training(self):
        y, u = linear_system_record(600, seed=6)
        ds = build_dataset(y, u, NY, NU, 1, split_offset=10, test_size=50)
        cfg = TrainConfig(epochs=5, batch_size=64, learning_rate=5e-3, seed=3)
        m, _ = train_step_model(ds, 1, (6, 4), cfg)
        for f in (m.f1, m.f2):
            assert f.W[1].min() >= 0.0
            assert f.w_out.min() >= 0.0

    def test_deterministic(self):
        y, u = linear_system_record(500, seed=7)
        ds = build_dataset(y, u, NY, NU, 1, split_offset=10, test_size=50)
        cfg = TrainConfig(epochs=4, batch_size=64, learning_rate=1e-3, seed=4)
        m1, c1 = train_step_model(ds, 1, (5,), cfg)
        m2, c2 = train_step_model(ds, 1, (5,), cfg)
        np.testing.assert_array_equal(m1.f1.D[0], m2.f1.D[0])
        assert c1 == c2

    def test_divergence_raises(self):
        y, u = linear_system_record(300, seed=8)
        # inputs large enough to overflow the squared loss
        ds = build_dataset(y, u * 1e200, NY, NU, 1, split_offset=0, test_size=30)
        cfg = TrainConfig(epochs=5, batch_size=32, learning_rate=1e-3, seed=5)
        with pytest.raises(TrainingError) as err:
            with np.errstate(over="ignore", invalid="ignore"):
                train_step_model(ds, 1, (6,), cfg)
        assert err.value.epoch == 0


def perfect_zero_model(ds):
    """f1 = f2 = 0 for every step: predicts 0 everywhere."""
    steps = []
    for i in range(1, ds.n_steps + 1):
        arch = IcnnArch(ds.ny + ds.nu + i, (3,))
        steps.append(StepModel(index=i, f1=zero_params(arch), f2=zero_params(arch)))
    return MultiStepModel(ny=ds.ny, nu=ds.nu, steps=steps,
                          w_intervals=np.zeros((ds.n_steps, 2)), norms=ds.norms)


class TestCalibration:
    def test_zero_residuals(self):
        # zero model on an all-zero series: residuals vanish, W = [0, 0]
        y = np.zeros(120)
        u = np.zeros(120)
        ds = build_dataset(y, u, NY, NU, N, split_offset=0, test_size=10)
        M = perfect_zero_model(ds)
        M2 = calibrate_disturbance(M, ds)
        np.testing.assert_array_equal(M2.w_intervals, 0.0)

    def test_symmetric_intervals_from_percentile(self):
        y, u = linear_system_record(400, seed=9)
        ds = build_dataset(y, u, NY, NU, N, split_offset=10, test_size=50)
        M = perfect_zero_model(ds)
        M2 = calibrate_disturbance(M, ds)
        for i in range(1, N + 1):
            X = ds.step_inputs(i, slice(*ds.train_range))
            t = ds.step_targets(i, slice(*ds.train_range))
            resid = t - dc_eval_batch(M.steps[i - 1], X)
            q = nearest_rank_percentile(np.abs(resid), 0.80)
            np.testing.assert_allclose(M2.w_intervals[i - 1], [-q, q], atol=1e-15)


class TestEvaluation:
    def test_perfect_predictor_zero_error(self):
        y = np.zeros(150)
        u = np.zeros(150)
        ds = build_dataset(y, u, NY, NU, N, split_offset=0, test_size=20)
        M = perfect_zero_model(ds)
        out = eval_prediction_errors(M, ds, "multi_step")
        np.testing.assert_array_equal(out["mae"], 0.0)
        np.testing.assert_array_equal(out["max_abs"], 0.0)

    def test_constant_predictor_on_constant_series(self):
        c = 0.8
        y = np.full(150, c)
        u = np.zeros(150)
        ds = build_dataset(y, u, NY, NU, N, split_offset=0, test_size=20)
        M = perfect_zero_model(ds)
        for m in M.steps:  # output bias c in normalized units
            m.f1.b_out = c / ds.norms.y_scale
        out = eval_prediction_errors(M, ds, "multi_step")
        np.testing.assert_allclose(out["mae"], 0.0, atol=1e-12)

    def test_recursive_matches_per_sample_loop(self):
        y, u = linear_system_record(260, seed=10)
        ds = build_dataset(y, u, NY, NU, N, split_offset=5, test_size=30)
        cfg = TrainConfig(epochs=3, batch_size=64, learning_rate=1e-3, seed=6)
        M, _ = train_multistep(ds, (5,), cfg)
        out = eval_prediction_errors(M, ds, "recursive")
        from dcnn_tmpc.dc_predictor import recursive_predict
        errs = []
        for j in range(ds.n_test):
            idx = ds.test_range[0] + j
            z = ds.regressor_at(idx)
            un = M.norms.normalize_u(ds.useq[idx])
            pred = M.norms.denormalize_y(recursive_predict(M.steps[0], z, un))
            errs.append(np.abs(pred - ds.targets[idx]))
        np.testing.assert_allclose(out["mae"], np.mean(errs, axis=0), atol=1e-12)

    def test_unknown_mode_rejected(self):
        y, u = linear_system_record(200, seed=11)
        ds = build_dataset(y, u, NY, NU, 1, split_offset=0, test_size=20)
        M = perfect_zero_model(ds)
        with pytest.raises(ValueError):
            eval_prediction_errors(M, ds, "bogus")
