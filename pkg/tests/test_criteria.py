import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqctl.criteria import (
    BayesSpec,
    LossSpec,
    accept_decision,
    bayes_risk,
    bayes_to_lagrange,
    loss_from_config,
    stage_cost,
    terminal_cost_g,
)
from seqctl.evaluate import lagrangian
from seqctl.exceptions import ConfigError
from seqctl.model import LikelihoodState

finite_log = st.floats(-20, 20, allow_nan=False)
multiplier = st.floats(0.01, 1e4, allow_nan=False)


class TestTerminalCost:
    def test_symmetric_at_one(self, spec100):
        assert terminal_cost_g(spec100, [1.0]) == 100.0

    def test_small_ratio(self, spec100):
        assert terminal_cost_g(spec100, [0.01]) == pytest.approx(1.0, rel=1e-14)

    def test_k3_three_sums(self):
        spec = LossSpec.symmetric(3, 10.0)
        sums = [10 * (0.2 + 0.3), 10 * (1 + 0.3), 10 * (1 + 0.2)]
        assert terminal_cost_g(spec, [0.2, 0.3]) == pytest.approx(min(sums), rel=1e-14)
        assert min(sums) == pytest.approx(5.0)

    def test_accepts_likelihood_state(self, spec100):
        assert terminal_cost_g(spec100, LikelihoodState.from_z([0.01], 3)) == pytest.approx(1.0)


class TestAcceptDecision:
    def test_large_ratio_accepts_h2(self, spec100):
        assert accept_decision(spec100, [2.0]) == 2

    def test_tie_goes_to_h1(self, spec100):
        assert accept_decision(spec100, [1.0]) == 1

    def test_k3(self):
        assert accept_decision(LossSpec.symmetric(3, 10.0), [0.2, 0.3]) == 1

    def test_k2_threshold(self):
        spec = LossSpec([[0, 40.0], [160.0, 0]])
        # boundary at z = lambda_12 / lambda_21 = 0.25
        assert accept_decision(spec, [0.2499]) == 1
        assert accept_decision(spec, [0.25]) == 1
        assert accept_decision(spec, [0.2501]) == 2


class TestStageCost:
    def test_default_weights(self, spec100):
        for z in (1e-6, 0.3, 1.0, 50.0):
            assert stage_cost(spec100, [z]) == 1.0

    def test_equal_weights(self):
        assert stage_cost(LossSpec.symmetric(2, 1.0, [1, 1]), [0.5]) == 1.5

    def test_mixed_weights(self):
        assert stage_cost(LossSpec.symmetric(2, 1.0, [0.3, 0.7]), [2.0]) == pytest.approx(1.7)


class TestBayesAdapter:
    def test_uniform_prior(self):
        spec = bayes_to_lagrange(BayesSpec([0.5, 0.5], [[0, 200], [200, 0]], 1.0))
        np.testing.assert_array_equal(spec.lam, [[0, 100], [100, 0]])
        np.testing.assert_array_equal(spec.cost_weights, [0.5, 0.5])

    def test_skewed_prior(self):
        spec = bayes_to_lagrange(BayesSpec([0.9, 0.1], [[0, 10], [90, 0]], 2.0))
        np.testing.assert_allclose(spec.lam, [[0, 9], [9, 0]], rtol=1e-14)
        np.testing.assert_allclose(spec.cost_weights, [1.8, 0.2], rtol=1e-14)

    def test_uniform_constant_losses(self):
        k = 4
        b = BayesSpec(np.full(k, 1 / k), k * (1 - np.eye(k)), 0.7)
        lam = bayes_to_lagrange(b).lam
        off = lam[~np.eye(k, dtype=bool)]
        assert np.all(off == off[0])

    def test_risk_equals_lagrangian(self):
        b = BayesSpec([0.3, 0.7], [[0, 50], [20, 0]], 1.5)
        alpha = np.array([[0.9, 0.1], [0.05, 0.95]])
        asn = np.array([3.2, 4.1])
        assert bayes_risk(b, alpha, asn) == pytest.approx(
            lagrangian(bayes_to_lagrange(b), alpha, asn), rel=1e-14)

    def test_priors_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            BayesSpec([0.5, 0.6], [[0, 1], [1, 0]], 1.0)

    def test_cost_positive(self):
        with pytest.raises(ConfigError):
            BayesSpec([0.5, 0.5], [[0, 1], [1, 0]], 0.0)


class TestLossSpecValidation:
    def test_nonzero_diagonal(self):
        with pytest.raises(ConfigError):
            LossSpec([[1, 1], [1, 0]])

    def test_negative_entry(self):
        with pytest.raises(ConfigError):
            LossSpec([[0, -1], [1, 0]])

    def test_zero_cost_weights(self):
        with pytest.raises(ConfigError):
            LossSpec([[0, 1], [1, 0]], [0, 0])

    def test_problem2_shape(self):
        spec = LossSpec.problem2([3.0, 5.0, 7.0])
        for i in range(3):
            row = np.delete(spec.lam[i], i)
            assert np.all(row == row[0])

    def test_config_needs_exactly_one_block(self):
        with pytest.raises(ConfigError):
            loss_from_config({})
        with pytest.raises(ConfigError):
            loss_from_config({"loss": {"lambda": [[0, 1], [1, 0]]},
                              "bayes": {"priors": [0.5, 0.5], "losses": [[0, 1], [1, 0]], "cost": 1}})

    def test_config_bayes_block(self):
        spec, b = loss_from_config({"bayes": {"priors": [0.5, 0.5], "losses": [[0, 2], [2, 0]], "cost": 1}})
        assert b is not None
        np.testing.assert_array_equal(spec.lam, [[0, 1], [1, 0]])


def _matrix(k, values):
    lam = np.zeros((k, k))
    lam[~np.eye(k, dtype=bool)] = values
    return lam


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 4).flatmap(
        lambda k: st.tuples(st.just(k),
                            st.lists(multiplier, min_size=k * (k - 1), max_size=k * (k - 1)),
                            st.lists(finite_log, min_size=k - 1, max_size=k - 1),
                            st.floats(0.01, 100))))
    def test_homogeneity_and_argmin_invariance(self, args):
        k, values, log_z, t = args
        spec = LossSpec(_matrix(k, values))
        log_z = np.array(log_z)
        assert spec.scaled(t).g(log_z) == pytest.approx(t * spec.g(log_z), rel=1e-12)
        costs = spec.decision_costs(log_z)
        j = spec.scaled(t).decide(log_z)
        # the scaled argmin may differ only among exact ties of the original costs
        assert costs[j] == pytest.approx(costs.min(), rel=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 4).flatmap(
        lambda k: st.tuples(st.just(k),
                            st.lists(multiplier, min_size=k * (k - 1), max_size=k * (k - 1)),
                            st.lists(finite_log, min_size=k - 1, max_size=k - 1))))
    def test_decision_attains_minimum(self, args):
        k, values, log_z = args
        spec = LossSpec(_matrix(k, values))
        log_z = np.array(log_z)
        j = int(spec.decide(log_z))
        z = np.concatenate([[1.0], np.exp(log_z)])
        attained = sum(spec.lam[i, j] * z[i] for i in range(k) if i != j)
        assert attained == pytest.approx(float(spec.g(log_z)), rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(multiplier, multiplier, finite_log)
    def test_k2_single_threshold(self, l12, l21, log_z):
        spec = LossSpec([[0, l12], [l21, 0]])
        z = np.exp(log_z)
        # accept H_2 exactly when lambda_21 z_2 > lambda_12 (ties stay with H_1)
        expected = 2 if l21 * z > l12 else 1
        assert accept_decision(spec, [z]) == expected

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.05, 1), min_size=2, max_size=4), st.floats(0.1, 5))
    def test_bayes_adapter_componentwise(self, raw, c):
        priors = np.array(raw) / np.sum(raw)
        priors = priors / priors.sum()
        k = priors.size
        if abs(priors.sum() - 1) > 1e-12:
            return
        losses = np.arange(1, k * k + 1, dtype=float).reshape(k, k) * (1 - np.eye(k))
        spec = bayes_to_lagrange(BayesSpec(priors, losses, c))
        for i, j in itertools.product(range(k), repeat=2):
            assert spec.lam[i, j] == priors[i] * losses[i, j]
        np.testing.assert_array_equal(spec.cost_weights, c * priors)
