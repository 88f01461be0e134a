"""Per-step oracle, causality, and serialization checks for the DC predictor."""

import numpy as np
import pytest

from dcnn_tmpc.dc_predictor import (
    MultiStepModel,
    Normalization,
    Regressor,
    StepModel,
    dc_eval,
    dc_jacobian_u,
    load_model,
    model_from_dict,
    model_to_dict,
    predict_horizon,
    recursive_predict,
    save_model,
)
from dcnn_tmpc.icnn import IcnnArch, icnn_forward, icnn_init, zero_params

NY, NU = 4, 2


def make_step(i, seed, zero_f2=False):
    arch = IcnnArch(NY + NU + i, (5,))
    f1 = icnn_init(arch, seed=seed)
    f2 = zero_params(arch) if zero_f2 else icnn_init(arch, seed=seed + 1000)
    for p in (f1,) if zero_f2 else (f1, f2):
        for b in p.b:
            b += 0.1
    return StepModel(index=i, f1=f1, f2=f2)


def make_model(n_steps=3, seed=0, w=0.0):
    steps = [make_step(i, seed + i) for i in range(1, n_steps + 1)]
    return MultiStepModel(
        ny=NY, nu=NU, steps=steps,
        w_intervals=np.tile([-w, w], (n_steps, 1)),
    )


def random_regressor(rng):
    return Regressor(rng.normal(size=NY), rng.uniform(0, 1, size=NU))


class TestDcEval:
    def test_identical_halves_cancel(self):
        arch = IcnnArch(NY + NU + 1, (4,))
        f = icnn_init(arch, seed=5)
        m = StepModel(index=1, f1=f, f2=f)
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert dc_eval(m, random_regressor(rng), rng.normal(size=1)) == 0.0

    def test_zero_f2_equals_f1(self):
        m = make_step(2, seed=1, zero_f2=True)
        rng = np.random.default_rng(1)
        z = random_regressor(rng)
        u = rng.uniform(0, 1, size=2)
        x = np.concatenate([z.vector(), u])
        assert dc_eval(m, z, u) == pytest.approx(icnn_forward(m.f1, x), abs=1e-15)

    def test_componentwise_oracle(self):
        m = make_step(3, seed=2)
        rng = np.random.default_rng(2)
        for _ in range(20):
            z = random_regressor(rng)
            u = rng.uniform(0, 1, size=3)
            x = np.concatenate([z.vector(), u])
            expect = icnn_forward(m.f1, x) - icnn_forward(m.f2, x)
            assert dc_eval(m, z, u) == pytest.approx(expect, abs=1e-12)

    def test_length_mismatch(self):
        m = make_step(2, seed=3)
        with pytest.raises(ValueError):
            dc_eval(m, random_regressor(np.random.default_rng(0)), np.zeros(3))


class TestPredictHorizon:
    def test_single_step_reduces_to_dc_eval(self):
        M = make_model(n_steps=1, seed=4)
        rng = np.random.default_rng(3)
        z = random_regressor(rng)
        u = rng.uniform(0, 1, size=1)
        assert predict_horizon(M, z, u)[0] == dc_eval(M.steps[0], z, u)

    def test_causality(self):
        M = make_model(n_steps=3, seed=5)
        rng = np.random.default_rng(4)
        z = random_regressor(rng)
        u = rng.uniform(0, 1, size=3)
        base = predict_horizon(M, z, u)
        for j in range(3):
            bumped = u.copy()
            bumped[j] += 0.37
            pred = predict_horizon(M, z, bumped)
            # the first j predictions must not see u[j]
            np.testing.assert_array_equal(pred[:j], base[:j])
            assert pred[j] != base[j]  # step j+1 does use u[j]

    def test_per_step_oracle(self):
        M = make_model(n_steps=3, seed=6)
        rng = np.random.default_rng(5)
        for _ in range(10):
            z = random_regressor(rng)
            u = rng.uniform(0, 1, size=3)
            pred = predict_horizon(M, z, u)
            for i, m in enumerate(M.steps, start=1):
                assert pred[i - 1] == pytest.approx(dc_eval(m, z, u[:i]), abs=1e-12)


class TestJacobian:
    def test_no_u_dependence_gives_zero(self):
        m = make_step(2, seed=7)
        # erase every path from the u block of the input into f1
        for D in m.f1.D:
            D[:, NY + NU:] = 0.0
        m.f1.d_out[NY + NU:] = 0.0
        rng = np.random.default_rng(6)
        j1, _ = dc_jacobian_u(m, random_regressor(rng), rng.uniform(0, 1, size=2))
        assert np.array_equal(j1, np.zeros(2))

    def test_finite_differences(self):
        m = make_step(2, seed=8)
        rng = np.random.default_rng(7)
        h = 1e-5
        checked = 0
        while checked < 20:
            z = random_regressor(rng)
            u = rng.uniform(0.05, 0.95, size=2)
            j1, j2 = dc_jacobian_u(m, z, u)
            fd1 = np.zeros(2)
            fd2 = np.zeros(2)
            x = np.concatenate([z.vector(), u])
            for i in range(2):
                e = np.zeros(2)
                e[i] = h
                xp = np.concatenate([z.vector(), u + e])
                xm = np.concatenate([z.vector(), u - e])
                fd1[i] = (icnn_forward(m.f1, xp) - icnn_forward(m.f1, xm)) / (2 * h)
                fd2[i] = (icnn_forward(m.f2, xp) - icnn_forward(m.f2, xm)) / (2 * h)
            ok1 = np.linalg.norm(j1 - fd1) / max(np.linalg.norm(fd1), 1e-8) < 1e-4
            ok2 = np.linalg.norm(j2 - fd2) / max(np.linalg.norm(fd2), 1e-8) < 1e-4
            if ok1 and ok2:
                checked += 1
            else:
                # tolerate kink hits: verify by the subgradient inequality instead
                up = rng.uniform(0, 1, size=2)
                xq = np.concatenate([z.vector(), up])
                assert icnn_forward(m.f1, xq) >= icnn_forward(m.f1, x) + j1 @ (up - u) - 1e-9

    def test_subgradient_inequality(self):
        m = make_step(3, seed=9)
        rng = np.random.default_rng(8)
        for _ in range(300):
            z = random_regressor(rng)
            u = rng.uniform(0, 1, size=3)
            v = rng.uniform(0, 1, size=3)
            j1, j2 = dc_jacobian_u(m, z, u)
            xu = np.concatenate([z.vector(), u])
            xv = np.concatenate([z.vector(), v])
            assert icnn_forward(m.f1, xv) >= icnn_forward(m.f1, xu) + j1 @ (v - u) - 1e-9
            assert icnn_forward(m.f2, xv) >= icnn_forward(m.f2, xu) + j2 @ (v - u) - 1e-9


class TestRecursive:
    def test_single_step_equals_dc_eval(self):
        m = make_step(1, seed=10)
        rng = np.random.default_rng(9)
        z = random_regressor(rng)
        u = rng.uniform(0, 1, size=1)
        assert recursive_predict(m, z, u)[0] == dc_eval(m, z, u)

    def test_identity_copy_network(self):
        # f(z, u) = y_past[0]: all N outputs stay at y_k
        arch = IcnnArch(NY + NU + 1, (1,))
        f1 = zero_params(arch)
        f1.d_out[0] = 1.0
        m = StepModel(index=1, f1=f1, f2=zero_params(arch))
        z = Regressor(np.array([0.7, 0.1, 0.2, 0.3]), np.zeros(NU))
        out = recursive_predict(m, z, np.linspace(0, 1, 5))
        np.testing.assert_allclose(out, 0.7, atol=1e-14)

    def test_loop_oracle(self):
        m = make_step(1, seed=11)
        rng = np.random.default_rng(10)
        z = random_regressor(rng)
        u = rng.uniform(0, 1, size=4)
        got = recursive_predict(m, z, u)
        y_past = z.y_past.copy()
        u_past = z.u_past.copy()
        for k in range(4):
            yk = dc_eval(m, Regressor(y_past, u_past), u[k:k + 1])
            assert got[k] == pytest.approx(yk, abs=1e-12)
            y_past = np.concatenate([[yk], y_past[:-1]])
            u_past = np.concatenate([[u[k]], u_past[:-1]])

    def test_requires_one_step_model(self):
        m = make_step(2, seed=12)
        with pytest.raises(ValueError):
            recursive_predict(m, random_regressor(np.random.default_rng(0)), np.zeros(3))


class TestNormalization:
    def test_round_trip(self):
        n = Normalization(y_offset=0.2, y_scale=1.7, u_offset=0.0, u_scale=2.5)
        rng = np.random.default_rng(11)
        y = rng.normal(size=50)
        u = rng.normal(size=50)
        np.testing.assert_allclose(n.denormalize_y(n.normalize_y(y)), y, atol=1e-12)
        np.testing.assert_allclose(n.denormalize_u(n.normalize_u(u)), u, atol=1e-12)

    def test_positive_scales_required(self):
        with pytest.raises(ValueError):
            Normalization(y_scale=0.0)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        M = make_model(n_steps=3, seed=13, w=0.05)
        M.norms = Normalization(y_scale=1.3, u_scale=1.0)
        path = tmp_path / "model.json"
        save_model(M, path)
        M2 = load_model(path)
        assert M2.n_steps == 3 and M2.ny == NY and M2.nu == NU
        np.testing.assert_array_equal(M2.w_intervals, M.w_intervals)
        assert M2.norms.y_scale == M.norms.y_scale
        rng = np.random.default_rng(12)
        z = random_regressor(rng)
        u = rng.uniform(0, 1, size=3)
        np.testing.assert_array_equal(predict_horizon(M2, z, u), predict_horizon(M, z, u))

    def test_format_field_checked(self):
        M = make_model(n_steps=1, seed=14)
        d = model_to_dict(M)
        d["format"] = 99
        with pytest.raises(ValueError):
            model_from_dict(d)
