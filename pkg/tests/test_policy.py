"""Tests for tabular policies, closed-form oracles and surrogate likelihoods."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.alignment.policy import (
    TabularPolicy,
    kl_divergence,
    log_partition_function,
    log_prob,
    optimal_policy,
    oracle_baseline,
    oracle_report,
    partition_function,
    surrogate_log_prob_masked,
    surrogate_log_prob_mse,
)
from src.alignment.surrogates import GaussianPolicy, MaskedTokenPolicy
from src.data.environments import make_tabular, reference_env


class TestLogProb:

    def test_uniform_logits(self):
        policy = TabularPolicy(np.zeros((1, 4)))
        assert log_prob(policy, 0, 2) == pytest.approx(math.log(0.25), abs=1e-6)
        assert log_prob(policy, 0, 2) == pytest.approx(-1.386294, abs=1e-6)

    def test_large_logits_stay_finite(self):
        policy = TabularPolicy(np.array([[1000.0, 0.0, -1000.0]]))
        assert log_prob(policy, 0, 0) == pytest.approx(0.0, abs=1e-12)
        assert math.isfinite(log_prob(policy, 0, 2))

    def test_out_of_range_index(self):
        policy = TabularPolicy(np.zeros((2, 3)))
        with pytest.raises(IndexError):
            log_prob(policy, 2, 0)
        with pytest.raises(IndexError):
            log_prob(policy, 0, 3)

    def test_non_finite_logits_rejected(self):
        with pytest.raises(ValueError):
            TabularPolicy(np.array([[0.0, np.inf]]))

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_rows_normalize(self, row):
        policy = TabularPolicy(np.array([row]))
        total = sum(math.exp(log_prob(policy, 0, y)) for y in range(len(row)))
        assert total == pytest.approx(1.0, abs=1e-9)


class TestOracles:

    def test_partition_function_two_outcomes(self, two_outcome_env):
        ref = two_outcome_env.reference_policy()
        assert partition_function(ref, two_outcome_env, 1.0, 0) == pytest.approx((1 + math.e) / 2, abs=1e-6)
        assert partition_function(ref, two_outcome_env, 1.0, 0) == pytest.approx(1.859141, abs=1e-6)

    def test_oracle_baseline_two_outcomes(self, two_outcome_env):
        ref = two_outcome_env.reference_policy()
        assert oracle_baseline(ref, two_outcome_env, 1.0, 0) == pytest.approx(0.620115, abs=1e-6)

    def test_optimal_policy_two_outcomes(self, two_outcome_env):
        ref = two_outcome_env.reference_policy()
        probs = optimal_policy(ref, two_outcome_env, 1.0).probs()
        assert probs[0, 1] == pytest.approx(0.731059, abs=1e-6)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_constant_rewards_leave_reference_unchanged(self):
        env = make_tabular(3, 2, 5, "constant(0.7)")
        ref = env.reference_policy()
        star = optimal_policy(ref, env, 0.5)
        assert np.allclose(star.probs(), ref.probs(), atol=1e-12)
        report = oracle_report(ref, env, 0.5)
        assert np.allclose(report.baseline, 0.7, atol=1e-12)

    def test_small_beta_does_not_overflow(self):
        env = make_tabular(1, 2, 4, "uniform_random")
        ref = env.reference_policy()
        log_z = log_partition_function(ref, env, 1e-4)
        assert np.all(np.isfinite(log_z))
        baseline = 1e-4 * log_z
        assert np.all(baseline <= env.rewards.max(axis=1) + 1e-9)

    def test_large_beta_partition_near_one(self):
        env = make_tabular(2, 3, 5, "bimodal")
        report = oracle_report(env.reference_policy(), env, 1e6)
        assert np.allclose(report.partition, 1.0, atol=1e-5)

    def test_tiny_beta_concentrates_on_argmax(self):
        env = reference_env()
        probs = optimal_policy(env.reference_policy(), env, 1e-3).probs()
        assert np.all(probs[np.arange(2), env.rewards.argmax(axis=1)] > 0.999)

    def test_baseline_between_min_and_max_reward(self):
        env = make_tabular(8, 3, 6, "bimodal")
        report = oracle_report(env.reference_policy(), env, 0.7)
        assert np.all(report.baseline >= env.rewards.min(axis=1) - 1e-12)
        assert np.all(report.baseline <= env.rewards.max(axis=1) + 1e-12)

    def test_invalid_beta(self, two_outcome_env):
        ref = two_outcome_env.reference_policy()
        with pytest.raises(ValueError, match="beta"):
            partition_function(ref, two_outcome_env, 0.0, 0)
        with pytest.raises(ValueError, match="beta"):
            oracle_baseline(ref, two_outcome_env, -1.0, 0)

    def test_shape_mismatch(self, two_outcome_env):
        with pytest.raises(ValueError):
            log_partition_function(TabularPolicy(np.zeros((1, 3))), two_outcome_env, 1.0)


class TestKLDivergence:

    def test_known_value(self):
        p = TabularPolicy(np.zeros((1, 2)))
        q = TabularPolicy(np.log(np.array([[0.731059, 0.268941]])))
        assert kl_divergence(p, q, 0) == pytest.approx(0.120115, abs=1e-6)

    def test_self_divergence_is_zero(self):
        env = make_tabular(2, 2, 4)
        ref = env.reference_policy()
        assert kl_divergence(ref, ref, 1) == 0.0

    def test_weighted_method(self):
        env = make_tabular(2, 2, 4)
        ref = env.reference_policy()
        star = optimal_policy(ref, env, 0.3)
        expected = 0.5 * kl_divergence(star, ref, 0) + 0.5 * kl_divergence(star, ref, 1)
        assert star.kl_divergence(ref, env.prompt_weights) == pytest.approx(expected, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence(TabularPolicy(np.zeros((1, 2))), TabularPolicy(np.zeros((1, 3))), 0)


class TestSurrogateLikelihoods:

    def test_mse_surrogate(self):
        value = surrogate_log_prob_mse(np.array([0.1, 0.1]), np.zeros(2), 0.001)
        assert value == pytest.approx(-10.0, abs=1e-9)

    def test_mse_surrogate_zero_at_target(self):
        assert surrogate_log_prob_mse(np.ones(3), np.ones(3), 0.5) == 0.0

    def test_mse_surrogate_rejects_bad_input(self):
        with pytest.raises(ValueError):
            surrogate_log_prob_mse(np.zeros(2), np.zeros(3), 1.0)
        with pytest.raises(ValueError):
            surrogate_log_prob_mse(np.zeros(2), np.zeros(2), 0.0)

    def test_masked_surrogate_ignores_unmasked(self):
        assert surrogate_log_prob_masked(np.array([-1.0, -100.0, -3.0]), [0, 2]) == pytest.approx(-2.0)

    def test_masked_surrogate_rejects_empty_mask(self):
        with pytest.raises(ValueError):
            surrogate_log_prob_masked(np.array([-1.0]), [])

    def test_gaussian_policy_matches_surrogate(self):
        policy = GaussianPolicy(np.zeros((1, 2)), 0.001)
        value = policy.log_prob_batch(np.array([0]), np.array([[0.1, 0.1]]))
        assert value[0] == pytest.approx(-10.0, abs=1e-9)

    def test_masked_policy_uniform_log_prob(self):
        policy = MaskedTokenPolicy(np.zeros((1, 4, 5)), (1, 3))
        value = policy.log_prob_batch(np.array([0]), np.array([[0, 1, 2, 3]]))
        assert value[0] == pytest.approx(math.log(0.2), abs=1e-12)

    def test_masked_policy_rejects_bad_mask(self):
        with pytest.raises(ValueError):
            MaskedTokenPolicy(np.zeros((1, 3, 2)), (3,))


@pytest.mark.parametrize("policy_factory, outcomes", [
    (lambda: TabularPolicy(np.array([[0.2, -0.4, 1.0], [0.0, 0.3, -0.1]])), np.array([2, 0, 1])),
    (lambda: GaussianPolicy(np.array([[0.1, -0.2], [0.4, 0.0]]), 0.5), np.array([[0.0, 0.1], [0.3, 0.3], [1.0, -1.0]])),
    (
        lambda: MaskedTokenPolicy(np.linspace(-1, 1, 24).reshape(2, 4, 3), (0, 2)),
        np.array([[0, 1, 2, 0], [1, 1, 1, 1], [2, 0, 0, 2]]),
    ),
])
def test_policy_gradient_matches_finite_differences(policy_factory, outcomes):
    policy = policy_factory()
    prompts = np.array([0, 1, 0])
    coefficients = np.array([0.5, -1.2, 2.0])
    analytic = policy.gradient(prompts, outcomes, coefficients)

    params = policy.params
    numeric = np.zeros_like(params)
    h = 1e-6
    for index in np.ndindex(params.shape):
        up = params.copy()
        down = params.copy()
        up[index] += h
        down[index] -= h
        f_up = np.dot(coefficients, policy.with_params(up).log_prob_batch(prompts, outcomes))
        f_down = np.dot(coefficients, policy.with_params(down).log_prob_batch(prompts, outcomes))
        numeric[index] = (f_up - f_down) / (2 * h)
    assert np.allclose(analytic, numeric, atol=1e-6)
