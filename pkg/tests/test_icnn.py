"""Convexity, gradient, and projection checks for the ICNN core."""

import json

import numpy as np
import pytest

from dcnn_tmpc.icnn import (
    IcnnArch,
    icnn_backward,
    icnn_forward,
    icnn_init,
    icnn_input_jacobian,
    params_from_dict,
    params_to_dict,
    project_nonneg,
    validate_params,
    zero_params,
)


def relu_unit_net():
    """1-input net computing f(x) = max(0, x)."""
    p = zero_params(IcnnArch(input_dim=1, hidden_widths=(1,)))
    p.D[0][0, 0] = 1.0
    p.w_out[0] = 1.0
    return p


def random_valid_params(rng, input_dim=3, widths=(4, 3)):
    """Random network honoring the non-negativity invariant."""
    p = icnn_init(IcnnArch(input_dim, tuple(widths)), seed=int(rng.integers(1 << 30)))
    for b in p.b:
        b += rng.normal(scale=0.3, size=b.shape)
    p.b_out = float(rng.normal(scale=0.3))
    return p


class TestInit:
    def test_deterministic(self):
        arch = IcnnArch(2, (3,))
        a = icnn_init(arch, seed=7)
        b = icnn_init(arch, seed=7)
        assert np.array_equal(a.D[0], b.D[0])
        assert np.array_equal(a.w_out, b.w_out)
        assert np.array_equal(a.d_out, b.d_out)

    def test_nonnegative_weights(self):
        p = icnn_init(IcnnArch(2, (3, 5)), seed=3)
        assert p.W[1].min() >= 0.0
        assert p.w_out.min() >= 0.0

    def test_forward_at_zero_is_zero(self):
        # zero biases: h1 = relu(b1) = 0, so out = b_out + w_out . 0 = 0
        p = icnn_init(IcnnArch(2, (3,)), seed=11)
        assert icnn_forward(p, np.zeros(2)) == pytest.approx(0.0, abs=1e-15)

    def test_zero_width_rejected(self):
        with pytest.raises(ValueError):
            IcnnArch(2, (3, 0))


class TestForward:
    def test_zero_net(self):
        p = zero_params(IcnnArch(3, (4, 2)))
        rng = np.random.default_rng(0)
        for _ in range(5):
            assert icnn_forward(p, rng.normal(size=3)) == 0.0

    def test_single_relu(self):
        p = relu_unit_net()
        assert icnn_forward(p, np.array([-2.0])) == 0.0
        assert icnn_forward(p, np.array([3.0])) == 3.0

    def test_midpoint_convexity(self):
        rng = np.random.default_rng(42)
        p = random_valid_params(rng)
        for _ in range(2000):
            x = rng.normal(scale=2.0, size=3)
            y = rng.normal(scale=2.0, size=3)
            mid = icnn_forward(p, 0.5 * (x + y))
            assert mid <= 0.5 * (icnn_forward(p, x) + icnn_forward(p, y)) + 1e-9

    def test_dimension_mismatch(self):
        p = relu_unit_net()
        with pytest.raises(ValueError):
            icnn_forward(p, np.zeros(2))


class TestInputJacobian:
    def test_single_relu(self):
        p = relu_unit_net()
        assert icnn_input_jacobian(p, np.array([3.0]))[0] == 1.0
        assert icnn_input_jacobian(p, np.array([-2.0]))[0] == 0.0

    def test_zero_net(self):
        p = zero_params(IcnnArch(3, (4,)))
        assert np.array_equal(icnn_input_jacobian(p, np.ones(3)), np.zeros(3))

    def test_finite_differences(self):
        rng = np.random.default_rng(1)
        p = random_valid_params(rng)
        h = 1e-5
        checked = 0
        while checked < 50:
            x = rng.normal(scale=2.0, size=3)
            if _near_kink(p, x, margin=1e-3):
                continue
            jac = icnn_input_jacobian(p, x)
            fd = np.zeros(3)
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                fd[i] = (icnn_forward(p, x + e) - icnn_forward(p, x - e)) / (2 * h)
            denom = max(np.linalg.norm(fd), 1e-8)
            assert np.linalg.norm(jac - fd) / denom < 1e-4
            checked += 1

    def test_subgradient_inequality(self):
        rng = np.random.default_rng(2)
        p = random_valid_params(rng)
        for _ in range(2000):
            x = rng.normal(scale=2.0, size=3)
            y = rng.normal(scale=2.0, size=3)
            jac = icnn_input_jacobian(p, x)
            assert icnn_forward(p, y) >= icnn_forward(p, x) + jac @ (y - x) - 1e-9


def _near_kink(p, x, margin):
    h = np.maximum(p.D[0] @ x + p.b[0], 0.0)
    pre = p.D[0] @ x + p.b[0]
    if np.any(np.abs(pre) < margin):
        return True
    for l in range(1, p.arch.n_hidden):
        pre = p.W[l] @ h + p.D[l] @ x + p.b[l]
        if np.any(np.abs(pre) < margin):
            return True
        h = np.maximum(pre, 0.0)
    return False


class TestBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(3)
        p = random_valid_params(rng)
        g = icnn_backward(p, rng.normal(size=3), 0.0)
        assert np.all(g.D[0] == 0.0)
        assert np.all(g.w_out == 0.0)
        assert g.b_out == 0.0

    def test_linearity(self):
        rng = np.random.default_rng(4)
        p = random_valid_params(rng)
        x = rng.normal(size=3)
        g1 = icnn_backward(p, x, 1.0)
        g2 = icnn_backward(p, x, 2.0)
        np.testing.assert_allclose(g2.D[0], 2.0 * g1.D[0], rtol=1e-13)
        np.testing.assert_allclose(g2.W[1], 2.0 * g1.W[1], rtol=1e-13)
        np.testing.assert_allclose(g2.w_out, 2.0 * g1.w_out, rtol=1e-13)

    def test_finite_differences(self):
        rng = np.random.default_rng(5)
        p = random_valid_params(rng)
        h = 1e-6
        checked = 0
        while checked < 20:
            x = rng.normal(scale=2.0, size=3)
            if _near_kink(p, x, margin=1e-3):
                continue
            g = icnn_backward(p, x, 1.0)
            # spot-check a few parameter coordinates against central differences
            for arr, garr, idx in [
                (p.D[0], g.D[0], (1, 2)),
                (p.W[1], g.W[1], (0, 1)),
                (p.b[0], g.b[0], (0,)),
                (p.w_out, g.w_out, (1,)),
            ]:
                old = arr[idx]
                arr[idx] = old + h
                fp = icnn_forward(p, x)
                arr[idx] = old - h
                fm = icnn_forward(p, x)
                arr[idx] = old
                fd = (fp - fm) / (2 * h)
                if abs(fd) > 1e-7:
                    assert abs(garr[idx] - fd) / max(abs(fd), 1e-8) < 1e-4
            checked += 1


class TestProjection:
    def test_clips_negative_entry(self):
        p = icnn_init(IcnnArch(2, (3, 2)), seed=9)
        p.W[1][0, 0] = -0.3
        q = project_nonneg(p)
        assert q.W[1][0, 0] == 0.0
        # untouched elsewhere
        assert np.array_equal(q.D[0], p.D[0])

    def test_idempotent_on_valid(self):
        p = icnn_init(IcnnArch(2, (3, 2)), seed=10)
        q = project_nonneg(p)
        assert np.array_equal(q.W[1], p.W[1])
        assert np.array_equal(q.w_out, p.w_out)

    def test_convexity_after_projection(self):
        rng = np.random.default_rng(6)
        p = icnn_init(IcnnArch(3, (4, 3)), seed=12)
        p.W[1] += rng.normal(scale=0.5, size=p.W[1].shape)  # may go negative
        p.w_out += rng.normal(scale=0.5, size=p.w_out.shape)
        q = project_nonneg(p)
        for _ in range(500):
            x = rng.normal(scale=2.0, size=3)
            y = rng.normal(scale=2.0, size=3)
            mid = icnn_forward(q, 0.5 * (x + y))
            assert mid <= 0.5 * (icnn_forward(q, x) + icnn_forward(q, y)) + 1e-9


class TestSerialization:
    def test_round_trip(self):
        p = icnn_init(IcnnArch(4, (5, 3)), seed=20)
        d = json.loads(json.dumps(params_to_dict(p)))
        q = params_from_dict(d)
        assert np.array_equal(p.W[1], q.W[1])
        assert np.array_equal(p.D[0], q.D[0])
        assert np.array_equal(p.w_out, q.w_out)
        assert p.b_out == q.b_out
        for x in np.random.default_rng(0).normal(size=(10, 4)):
            assert icnn_forward(p, x) == icnn_forward(q, x)

    def test_validate_rejects_negative(self):
        p = icnn_init(IcnnArch(2, (3, 2)), seed=1)
        p.W[1][0, 0] = -1.0
        with pytest.raises(ValueError):
            validate_params(p)
