import math

import numpy as np
import pytest

from hyperfed.errors import ContractViolation, DivergenceError
from hyperfed.models import (Dataset, DiagonalLinearNetwork, MultilayerPerceptron,
                             SgdConfig, forward, local_train, loss_and_grad, sgd_step)


def finite_difference_grad(model, X, y, h=1e-5):
    """Central-difference oracle for the loss gradient."""
    grad = np.zeros(model.n_params)
    for i in range(model.n_params):
        plus = model.copy()
        plus.params[i] += h
        minus = model.copy()
        minus.params[i] -= h
        lp, _ = plus.loss_and_grad(X, y)
        lm, _ = minus.loss_and_grad(X, y)
        grad[i] = (lp - lm) / (2 * h)
    return grad


def random_model_and_batch(rng):
    if rng.random() < 0.5:
        d = int(rng.integers(2, 5))
        model = DiagonalLinearNetwork(d, rng.normal(0, 1, 2 * d))
    else:
        d = int(rng.integers(2, 4))
        hidden = int(rng.integers(3, 6))
        model = MultilayerPerceptron((d, hidden, hidden, 1), rng=rng)
        model.params = rng.normal(0, 0.7, model.n_params)
    n = int(rng.integers(1, 9))
    X = rng.uniform(-1, 1, (n, d))
    y = rng.integers(0, 2, n).astype(np.float64)
    return model, X, y


class TestForward:
    def test_dln_symmetric_cancellation(self):
        model = DiagonalLinearNetwork(2, np.array([1.0, 1.0, 1.0, 1.0]))
        assert forward(model, [0.5, -0.5]) == pytest.approx(0.0, abs=1e-15)

    def test_dln_hand_arithmetic(self):
        model = DiagonalLinearNetwork(2, np.array([2.0, 0.0, 3.0, 1.0]))
        assert forward(model, [1.0, 1.0]) == pytest.approx(6.0)

    def test_mlp_zero_weights(self):
        model = MultilayerPerceptron((2, 4, 1), params=np.zeros(2 * 4 + 4 + 4 + 1))
        assert forward(model, [0.3, -0.9]) == 0.0

    def test_dimension_mismatch_rejected(self):
        model = DiagonalLinearNetwork(2)
        with pytest.raises(ContractViolation):
            forward(model, [1.0, 2.0, 3.0])

    def test_default_dln_init_has_zero_logit(self):
        model = DiagonalLinearNetwork(3)
        assert forward(model, [0.4, -0.2, 0.9]) == 0.0


class TestLossAndGrad:
    def test_zero_model_loss_is_ln2(self):
        model = MultilayerPerceptron((2, 4, 1), params=np.zeros(17))
        batch = Dataset(np.array([[0.1, 0.2], [-0.5, 0.3]]), np.array([0, 1]))
        loss, _ = loss_and_grad(model, batch)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_empty_batch_rejected(self):
        model = DiagonalLinearNetwork(2)
        with pytest.raises(ContractViolation):
            loss_and_grad(model, (np.empty((0, 2)), np.empty(0)))

    def test_saturated_sample_has_vanishing_loss_and_grad(self):
        # huge positive logit on a correctly classified label-1 sample
        model = DiagonalLinearNetwork(1, np.array([200.0, 200.0]))
        loss, grad = loss_and_grad(model, (np.array([[1.0]]), np.array([1.0])))
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.abs(grad) < 1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            model, X, y = random_model_and_batch(rng)
            _, grad = model.loss_and_grad(X, y)
            oracle = finite_difference_grad(model, X, y)
            rel = np.abs(grad - oracle) / np.maximum(np.abs(oracle), 1e-7)
            assert rel.max() < 1e-4

    def test_dln_with_unit_v_matches_logistic_regression(self):
        # with v = 1 the u-gradient is the closed-form logistic gradient
        rng = np.random.default_rng(11)
        for _ in range(20):
            d = int(rng.integers(2, 6))
            u = rng.normal(0, 1, d)
            model = DiagonalLinearNetwork(d, np.concatenate([u, np.ones(d)]))
            n = int(rng.integers(2, 10))
            X = rng.uniform(-1, 1, (n, d))
            y = rng.integers(0, 2, n).astype(np.float64)
            _, grad = model.loss_and_grad(X, y)
            p = 1.0 / (1.0 + np.exp(-(X @ u)))
            logistic = X.T @ (p - y) / n
            assert np.abs(grad[:d] - logistic).max() < 1e-10


class TestSgdStep:
    def test_plain_gradient_descent(self):
        cfg = SgdConfig(eta=0.3)
        theta = np.array([1.0, -2.0])
        grad = np.array([0.5, 0.5])
        new, _ = sgd_step(theta, np.zeros(2), grad, cfg, True)
        assert np.allclose(new, theta - 0.3 * grad)

    def test_pure_decay_term(self):
        cfg = SgdConfig(eta=1.0, weight_decay=0.1)
        new, _ = sgd_step(np.array([1.0, 1.0]), np.zeros(2), np.zeros(2), cfg, True)
        assert np.allclose(new, [0.9, 0.9])

    def test_two_step_momentum_displacement(self):
        # constant gradient g: displacement after two steps is eta*g*(1 + 1.9)
        cfg = SgdConfig(eta=0.1, mu=0.9)
        theta0 = np.array([1.0, 2.0])
        g = np.array([1.0, -2.0])
        theta1, v1 = sgd_step(theta0, np.zeros(2), g, cfg, True)
        theta2, _ = sgd_step(theta1, v1, g, cfg, False)
        assert np.allclose(theta0 - theta2, 0.1 * g * (1 + 1.9))

    def test_first_step_ignores_stale_velocity(self):
        cfg = SgdConfig(eta=0.1, mu=0.9)
        g = np.array([1.0])
        stale = np.array([1e6])
        fresh, _ = sgd_step(np.array([0.0]), stale, g, cfg, True)
        clean, _ = sgd_step(np.array([0.0]), np.zeros(1), g, cfg, True)
        assert np.array_equal(fresh, clean)

    def test_eta_grad_scaling_equivalence(self):
        rng = np.random.default_rng(0)
        theta = rng.normal(0, 1, 4)
        g = rng.normal(0, 1, 4)
        a, _ = sgd_step(theta, np.zeros(4), g, SgdConfig(eta=0.2), True)
        b, _ = sgd_step(theta, np.zeros(4), 2 * g, SgdConfig(eta=0.1), True)
        assert np.allclose(a, b)

    def test_non_finite_raises_divergence(self):
        cfg = SgdConfig(eta=1.0)
        with pytest.raises(DivergenceError) as err:
            sgd_step(np.array([1.0]), np.zeros(1), np.array([np.inf]), cfg, True, step=7)
        assert err.value.step == 7


def toy_dataset(rng, n=32, d=2):
    X = rng.uniform(-1, 1, (n, d))
    return Dataset(X, (X.sum(axis=1) > 0).astype(int))


class TestLocalTrain:
    def test_single_full_batch_step_is_one_gd_step(self):
        rng = np.random.default_rng(5)
        data = toy_dataset(rng)
        model = DiagonalLinearNetwork(2, rng.normal(0, 1, 4))
        cfg = SgdConfig(eta=0.25, epochs=1, batch_size=len(data))
        _, grad = loss_and_grad(model, data)
        delta = local_train(model, data, cfg, np.random.default_rng(0))
        assert np.allclose(delta, -0.25 * grad, atol=1e-14)

    def test_zero_eta_freezes_training(self):
        rng = np.random.default_rng(6)
        data = toy_dataset(rng)
        model = MultilayerPerceptron((2, 4, 1), rng=rng)
        cfg = SgdConfig(eta=0.0, mu=0.9, weight_decay=1e-3, epochs=3, batch_size=8)
        delta = local_train(model, data, cfg, np.random.default_rng(1))
        assert np.array_equal(delta, np.zeros(model.n_params))

    def test_deterministic_replay(self):
        rng = np.random.default_rng(7)
        data = toy_dataset(rng, n=64)
        model = MultilayerPerceptron((2, 8, 1), rng=rng)
        cfg = SgdConfig(eta=0.1, mu=0.9, weight_decay=5e-4, epochs=2, batch_size=32)
        d1 = local_train(model, data, cfg, np.random.default_rng(99))
        d2 = local_train(model, data, cfg, np.random.default_rng(99))
        assert np.array_equal(d1, d2)

    def test_partial_batch_dropped(self):
        rng = np.random.default_rng(8)
        data = toy_dataset(rng, n=10)
        model = DiagonalLinearNetwork(2, rng.normal(0, 1, 4))
        # batch 7 of 10 samples: one batch per epoch, 3 samples dropped
        cfg = SgdConfig(eta=0.1, epochs=1, batch_size=7)
        order = np.random.default_rng(3).permutation(10)[:7]
        _, grad = loss_and_grad(model, data.take(order))
        delta = local_train(model, data, cfg, np.random.default_rng(3))
        assert np.allclose(delta, -0.1 * grad, atol=1e-14)

    def test_dataset_smaller_than_batch_rejected(self):
        rng = np.random.default_rng(9)
        data = toy_dataset(rng, n=4)
        model = DiagonalLinearNetwork(2)
        with pytest.raises(ContractViolation):
            local_train(model, data, SgdConfig(eta=0.1, batch_size=8), rng)

    def test_divergence_propagates_from_steps(self):
        rng = np.random.default_rng(10)
        data = toy_dataset(rng, n=16)
        model = DiagonalLinearNetwork(2, np.array([1e180, 1.0, 1e180, 1.0]))
        cfg = SgdConfig(eta=1e120, epochs=4, batch_size=8)
        with pytest.raises(DivergenceError):
            local_train(model, data, cfg, rng)

    def test_step_count_is_epochs_times_floor(self):
        assert SgdConfig(eta=0.1, epochs=3, batch_size=32).steps_for(100) == 9
        assert SgdConfig(eta=0.1, epochs=1, batch_size=64).steps_for(64) == 1

    def test_no_state_carried_between_calls(self):
        # the momentum buffer is rebuilt from zero on every call, so repeated
        # training from the same parameters is invariant to call history
        rng = np.random.default_rng(12)
        data = toy_dataset(rng, n=48)
        model = MultilayerPerceptron((2, 6, 1), rng=rng)
        cfg = SgdConfig(eta=0.1, mu=0.9, weight_decay=5e-4, epochs=2, batch_size=16)
        first = local_train(model, data, cfg, np.random.default_rng(5))
        second = local_train(model, data, cfg, np.random.default_rng(5))
        assert np.array_equal(first, second)


class TestSgdConfig:
    def test_invalid_values_rejected(self):
        with pytest.raises(ContractViolation):
            SgdConfig(eta=-0.1)
        with pytest.raises(ContractViolation):
            SgdConfig(eta=0.1, mu=1.0)
        with pytest.raises(ContractViolation):
            SgdConfig(eta=0.1, weight_decay=-1e-4)
        with pytest.raises(ContractViolation):
            SgdConfig(eta=0.1, epochs=0)
