"""Optimizer behavior against a hand-stepped reference."""

import numpy as np
import pytest

from jointseg import optim
from jointseg.optim import AdamState, init_adam, adam_step
from jointseg.tensor import Tensor


def _param(values, dtype=np.float32):
    return Tensor(np.asarray(values, dtype=dtype), dtype=dtype)


def _reference_adam(theta0, grads, lr):
    """Textbook update sequence in float64, elementwise python loops."""
    theta = [float(x) for x in np.ravel(theta0)]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, grad in enumerate(grads, start=1):
        gflat = [float(x) for x in np.ravel(grad)]
        for i, gi in enumerate(gflat):
            m[i] = optim.BETA1 * m[i] + (1 - optim.BETA1) * gi
            v[i] = optim.BETA2 * v[i] + (1 - optim.BETA2) * gi * gi
            mh = m[i] / (1 - optim.BETA1 ** t)
            vh = v[i] / (1 - optim.BETA2 ** t)
            theta[i] -= lr * mh / (vh ** 0.5 + optim.EPS)
    return np.array(theta).reshape(np.shape(theta0))


class TestSingleStep:
    def test_unit_gradient_moves_by_almost_lr(self):
        # t=1: m_hat = g, v_hat = g^2, step = lr*g/(|g|+eps) = lr/(1+1e-8)
        p = _param([0.0])
        p.grad = np.array([1.0], dtype=np.float32)
        state = init_adam({"p": p})
        adam_step(state, {"p": p}, learning_rate=0.1)
        assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-6)

    def test_first_step_size_is_lr_regardless_of_scale(self):
        for gval in (1e-4, 1.0, 1e4):
            p = _param([0.0])
            p.grad = np.array([gval], dtype=np.float32)
            state = init_adam({"p": p})
            adam_step(state, {"p": p}, learning_rate=0.05)
            assert abs(p.data[0]) == pytest.approx(0.05, rel=1e-3)

    def test_zero_gradient_moves_nothing(self):
        p = _param([1.5, -2.5])
        p.grad = np.zeros(2, dtype=np.float32)
        state = init_adam({"p": p})
        adam_step(state, {"p": p}, learning_rate=0.1)
        np.testing.assert_array_equal(p.data, [1.5, -2.5])

    def test_zero_learning_rate_moves_nothing(self):
        p = _param([1.0])
        p.grad = np.ones(1, dtype=np.float32)
        state = init_adam({"p": p})
        adam_step(state, {"p": p}, learning_rate=0.0)
        assert p.data[0] == 1.0


class TestTrajectory:
    def test_matches_reference_over_many_steps(self):
        rng = np.random.default_rng(0)
        theta0 = rng.normal(size=(3, 4)).astype(np.float32)
        grads = [rng.normal(size=(3, 4)).astype(np.float32) for _ in range(25)]
        p = Tensor(theta0.copy(), dtype=np.float32)
        state = init_adam({"w": p})
        for grad in grads:
            p.grad = grad
            adam_step(state, {"w": p}, learning_rate=4.73e-4)
        expect = _reference_adam(theta0.astype(np.float64),
                                 [grad.astype(np.float64) for grad in grads],
                                 4.73e-4)
        np.testing.assert_allclose(p.data, expect, rtol=1e-4, atol=1e-7)

    def test_step_size_stays_bounded(self):
        rng = np.random.default_rng(1)
        p = _param(np.zeros(16))
        state = init_adam({"p": p})
        lr = 0.01
        prev = p.data.copy()
        for _ in range(100):
            p.grad = (rng.normal(size=16) * 10.0 ** float(rng.integers(-3, 4))).astype(np.float32)
            adam_step(state, {"p": p}, learning_rate=lr)
            assert np.abs(p.data - prev).max() <= 2.5 * lr
            prev = p.data.copy()

    def test_bitwise_deterministic(self):
        def run():
            rng = np.random.default_rng(2)
            p = _param(rng.normal(size=8).astype(np.float32))
            state = init_adam({"p": p})
            for _ in range(10):
                p.grad = rng.normal(size=8).astype(np.float32)
                adam_step(state, {"p": p}, learning_rate=1e-3)
            return p.data.copy()

        np.testing.assert_array_equal(run(), run())

    def test_updates_stay_float32(self):
        p = _param([1.0])
        p.grad = np.array([0.5], dtype=np.float32)
        state = init_adam({"p": p})
        adam_step(state, {"p": p}, learning_rate=0.1)
        assert p.data.dtype == np.float32
        assert state.m["p"].dtype == np.float32
        assert state.v["p"].dtype == np.float32


class TestStateHandling:
    def test_missing_gradient_names_the_parameter(self):
        p = _param([1.0])
        q = _param([2.0])
        p.grad = np.ones(1, dtype=np.float32)
        state = init_adam({"p": p, "q": q})
        with pytest.raises(ValueError, match="'q'"):
            adam_step(state, {"p": p, "q": q}, learning_rate=0.1)

    def test_step_counter_advances(self):
        p = _param([0.0])
        state = init_adam({"p": p})
        for expect in (1, 2, 3):
            p.grad = np.ones(1, dtype=np.float32)
            adam_step(state, {"p": p}, learning_rate=0.1)
            assert state.step == expect

    def test_parameters_updated_independently(self):
        a, b = _param([0.0]), _param([0.0])
        a.grad = np.array([1.0], dtype=np.float32)
        b.grad = np.array([-1.0], dtype=np.float32)
        state = init_adam({"a": a, "b": b})
        adam_step(state, {"a": a, "b": b}, learning_rate=0.1)
        assert a.data[0] < 0 < b.data[0]
