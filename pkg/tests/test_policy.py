import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqctl.criteria import LossSpec
from seqctl.exceptions import AbsoluteContinuityError, ConfigError, FingerprintError
from seqctl.model import DiscreteModel, LikelihoodState
from seqctl.policy import (
    ForcedControlPolicy,
    PerturbedPolicy,
    Policy,
    cell_labels,
    decide,
    next_control,
    should_stop,
    state_keys,
    step,
    termination_diagnostic,
)
from seqctl.value import GridSpec, solve_rho


class _FixedR(Policy):
    """Policy whose continuation value is pinned, for exercising the stop comparison."""

    def __init__(self, base, R):
        self.__dict__.update(base.__dict__)
        self._R = R

    def continuation(self, log_z):
        log_z = np.asarray(log_z, dtype=float)
        n = log_z.shape[0]
        return np.full(n, self._R), np.zeros(n, dtype=int)


class _NeverStop:
    """Strategy that only stops at the horizon cap."""

    def __init__(self, model, cap):
        self.model, self.horizon_cap = model, cap
        self.spec = LossSpec.symmetric(model.k, 1.0)
        self.initial_control_index = 0

    def rules(self, log_z):
        n = np.asarray(log_z).shape[0]
        return np.zeros(n, dtype=bool), np.zeros(n, dtype=int)

    def decide_index(self, log_z):
        return np.zeros(np.asarray(log_z).shape[0], dtype=int)


def state(z, n=1):
    return LikelihoodState.from_z(z, n)


class TestShouldStop:
    def test_g_above_continuation_continues(self, coin_policy):
        # lambda = 2: g(1) = 2 against stage + R = 1 + 0.8, so sampling is cheaper
        spec = LossSpec.symmetric(2, 2.0)
        p = _FixedR(coin_policy, 0.8)
        p.spec = spec
        assert spec.g(np.zeros(1)) == 2.0
        assert not should_stop(p, state([1.0]))

    def test_g_below_continuation_stops(self, coin_policy):
        spec = LossSpec.symmetric(2, 1.8)
        p = _FixedR(coin_policy, 1.0)
        p.spec = spec
        assert should_stop(p, state([1.0]))

    def test_tie_stops(self, coin_policy):
        p = _FixedR(coin_policy, 99.0)
        assert should_stop(p, state([1.0]))

    def test_small_g_always_stops(self, coin_policy):
        assert coin_policy.spec.g(np.log([0.005])) == pytest.approx(0.5)
        assert should_stop(coin_policy, state([0.005]))
        assert should_stop(_FixedR(coin_policy, 0.0), state([0.005]))

    def test_coin2_continues_at_one(self, coin_policy):
        assert not should_stop(coin_policy, state([1.0], 1))

    def test_cap_forces_stop(self, coin, spec100, coin_table):
        p = Policy(coin, spec100, coin_table, horizon_cap=3)
        assert should_stop(p, state([1.0], 3))
        assert not should_stop(p, state([1.0], 2))

    def test_continuation_region_is_interval(self, coin_policy):
        nodes = coin_policy.table.grid.nodes()
        cont = np.flatnonzero(~coin_policy.stop_mask(nodes))
        assert cont.size > 0
        assert np.all(np.diff(cont) == 1)


class TestNextControl:
    def test_coin2_start(self, coin_policy):
        assert next_control(coin_policy, LikelihoodState.initial(2)) == "b"
        assert coin_policy.initial_control == "b"

    def test_gaussian_any_z(self, gauss_policy):
        for z in (0.02, 0.5, 1.0, 4.0, 100.0):
            assert next_control(gauss_policy, state([z])) == "2"

    def test_single_control(self, spec100):
        model = DiscreteModel(["only"], [0, 1], [[[0.5, 0.5]], [[0.2, 0.8]]])
        p = Policy(model, spec100, solve_rho(model, spec100))
        assert next_control(p, state([1.0])) == "only"
        assert p.initial_control == "only"

    def test_initial_control_attains_min(self, coin, spec100, coin_policy):
        from seqctl.value import continuation_values
        cont = continuation_values(coin, spec100, coin_policy.table, np.zeros((1, 1)))[:, 0]
        assert cont[coin_policy.initial_control_index] <= cont.min() + 1e-9


class TestStep:
    def test_gaussian_unit_increment(self, gauss_policy):
        z = step(gauss_policy, LikelihoodState.initial(2), 3.0, "2")
        np.testing.assert_allclose(z.z, [1.0], rtol=1e-15)
        assert z.n == 1

    def test_coin2_zero_under_b(self, coin_policy):
        z = step(coin_policy, LikelihoodState.initial(2), 0, "b")
        np.testing.assert_allclose(z.z, [0.2], rtol=1e-14)

    def test_two_steps(self, coin_policy):
        z = LikelihoodState.initial(2)
        for _ in range(2):
            z = step(coin_policy, z, 0, "b")
        np.testing.assert_allclose(z.z, [0.04], rtol=1e-14)
        assert z.n == 2

    def test_default_control_is_policy_choice(self, coin_policy):
        z = step(coin_policy, LikelihoodState.initial(2), 0)
        np.testing.assert_allclose(z.z, [0.2], rtol=1e-14)

    def test_absolute_continuity(self, spec100):
        model = DiscreteModel(["a"], [0, 1], [[[1.0, 0.0]], [[1.0, 0.0]]])
        p = Policy(model, spec100, solve_rho(model, spec100, GridSpec.default(2, m=11)))
        with pytest.raises(AbsoluteContinuityError):
            step(p, LikelihoodState.initial(2), 1)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["a", "b"]), st.sampled_from([0, 1])),
                    min_size=1, max_size=40))
    def test_batching_is_log_additive(self, coin_policy, pairs):
        z = LikelihoodState.initial(2)
        for x, y in pairs:
            z = step(coin_policy, z, y, x)
        total = np.prod([coin_policy.model.lr_increment(x, y) for x, y in pairs], axis=0)
        once = LikelihoodState.initial(2).advance(np.log(total))
        np.testing.assert_allclose(z.z, once.z, rtol=1e-12)
        assert z.n == len(pairs)


class TestDecide:
    def test_inherits_accept_decision(self, coin_policy):
        assert decide(coin_policy, state([2.0])) == 2
        assert decide(coin_policy, state([1.0])) == 1

    @settings(max_examples=80, deadline=None)
    @given(st.floats(-25, 25))
    def test_argmin_membership(self, coin_policy, log_z):
        z = LikelihoodState((log_z,), 1)
        j = decide(coin_policy, z) - 1
        costs = coin_policy.spec.decision_costs(np.array([log_z]))
        assert costs[j] == costs.min()


class TestTermination:
    def test_coin2_h1_mass_small_at_cap_200(self, coin, spec100, coin_table):
        rep = termination_diagnostic(Policy(coin, spec100, coin_table, horizon_cap=200))
        assert rep.method == "exact"
        assert rep.unstopped_mass[0] < 1e-9

    @pytest.mark.xfail(strict=True, reason=(
        "with cost only under H_1 the policy samples until log z reaches the grid edge at +25; "
        "under H_2 roughly 1e-6 of the mass is still sampling after 200 steps"))
    def test_coin2_all_masses_below_1e9_at_cap_200(self, coin, spec100, coin_table):
        rep = termination_diagnostic(Policy(coin, spec100, coin_table, horizon_cap=200))
        assert np.all(rep.unstopped_mass < 1e-9)

    def test_degenerate_model_never_stopping(self):
        p = [0.4, 0.6]
        model = DiscreteModel(["a"], [0, 1], [[p], [p]])
        rep = termination_diagnostic(_NeverStop(model, 50))
        np.testing.assert_allclose(rep.unstopped_mass, [1.0, 1.0], rtol=1e-12)
        assert not rep.in_class

    def test_degenerate_model_solver_stops_at_once(self):
        # the likelihood ratio never moves, so the optimal rule decides immediately
        p = [0.4, 0.6]
        model = DiscreteModel(["a"], [0, 1], [[p], [p]])
        spec = LossSpec.symmetric(2, 1e4)
        policy = Policy(model, spec, solve_rho(model, spec, GridSpec.default(2, m=101)))
        assert policy.stop_mask(np.zeros((1, 1)))[0]

    def test_cap_one(self, coin, spec100, coin_table):
        # mass reaching the cap is the probability that the rule itself has not
        # stopped after one observation
        policy = Policy(coin, spec100, coin_table, horizon_cap=1)
        probs, log_inc = coin.branch_probs(policy.initial_control_index)
        no_stop = ~policy.stop_mask(log_inc)
        rep = termination_diagnostic(policy)
        np.testing.assert_allclose(rep.unstopped_mass, probs[:, no_stop].sum(axis=1), rtol=1e-14)

    def test_cap_one_with_stopping_rule(self, coin):
        spec = LossSpec.symmetric(2, 3.0)
        policy = Policy(coin, spec, solve_rho(coin, spec), horizon_cap=1)
        rep = termination_diagnostic(policy)
        np.testing.assert_array_equal(rep.unstopped_mass, [0.0, 0.0])

    @pytest.mark.parametrize("lam", [100.0, 1e6])
    def test_forced_stop_mass_cap_500(self, coin, lam):
        spec = LossSpec.symmetric(2, lam)
        rep = termination_diagnostic(Policy(coin, spec, solve_rho(coin, spec), horizon_cap=500))
        assert np.all(rep.unstopped_mass < 1e-12)

    def test_continuous_uses_monte_carlo(self, gauss_policy):
        rep = termination_diagnostic(gauss_policy, reps=200, seed=3)
        assert rep.method == "monte_carlo"
        assert rep.in_class


class TestPersistence:
    def test_roundtrip(self, tmp_path, coin, spec100, coin_policy):
        coin_policy.table.save(tmp_path / "value_table.json")
        coin_policy.save(tmp_path / "policy.json")
        back = Policy.load(tmp_path / "policy.json", coin, spec100)
        assert back.initial_control == coin_policy.initial_control
        assert back.horizon_cap == coin_policy.horizon_cap
        nodes = coin_policy.table.grid.nodes()
        np.testing.assert_array_equal(back.stop_mask(nodes), coin_policy.stop_mask(nodes))

    def test_stale_policy(self, tmp_path, coin, coin_policy):
        coin_policy.table.save(tmp_path / "value_table.json")
        coin_policy.save(tmp_path / "policy.json")
        with pytest.raises(FingerprintError):
            Policy.load(tmp_path / "policy.json", coin, LossSpec.symmetric(2, 50.0))

    def test_horizon_cap_positive(self, coin, spec100, coin_table):
        with pytest.raises(ConfigError):
            Policy(coin, spec100, coin_table, horizon_cap=0)


class TestContinuationModes:
    def test_modes_agree_at_nodes(self, gauss, spec100, gauss_policy):
        quad = Policy(gauss, spec100, gauss_policy.table, continuation_mode="quadrature")
        nodes = gauss_policy.table.grid.nodes()[::7]
        Ri, ci = gauss_policy.continuation(nodes)
        Rq, cq = quad.continuation(nodes)
        np.testing.assert_allclose(Ri, Rq, rtol=1e-10, atol=1e-10)
        np.testing.assert_array_equal(ci, cq)

    def test_unknown_mode(self, coin, spec100, coin_table):
        with pytest.raises(ConfigError):
            Policy(coin, spec100, coin_table, continuation_mode="spline")


class TestVariants:
    def test_forced_control(self, coin_policy):
        forced = ForcedControlPolicy(coin_policy, "a")
        assert forced.initial_control_index == 0
        np.testing.assert_array_equal(forced.control_index(np.zeros((4, 1))), [0, 0, 0, 0])

    def test_perturbed_flip(self, coin_policy):
        table = coin_policy.table
        log_z = np.zeros((1, 1))
        label = int(cell_labels(table, log_z)[0])
        cell = np.unravel_index(label, table.grid.shape())
        p = PerturbedPolicy(coin_policy, frozenset({tuple(int(v) for v in cell)}))
        assert p.stop_mask(log_z)[0] != coin_policy.stop_mask(log_z)[0]

    def test_perturbed_control_override(self, coin_policy):
        log_z = np.array([[0.3]])
        key = tuple(int(v) for v in state_keys(log_z[0]))
        p = PerturbedPolicy(coin_policy, control_overrides={key: 0})
        assert p.control_index(log_z)[0] == 0

    def test_cell_labels_outside_box(self, coin_policy):
        labels = cell_labels(coin_policy.table, np.array([[-30.0], [0.0], [30.0]]))
        assert labels[0] == -1 and labels[2] == -1 and labels[1] >= 0
