"""Tests for the threshold-guided loss, the DPO and SFT baselines and gradient audits."""

import math

import numpy as np
import pytest

from src.alignment.objective import (
    PreferencePairs,
    TGOConfig,
    dpo_loss,
    gradient_check,
    implicit_policy_score,
    logistic_terms,
    max_relative_error,
    sft_loss,
    tgo_gradient_check,
    tgo_loss,
    tgo_loss_relative,
)
from src.alignment.policy import TabularPolicy, optimal_policy
from src.data.environments import make_stream, make_tabular
from src.data.feedback import ScoredDataset, Threshold

LN2 = math.log(2.0)


def threshold_at(value: float) -> Threshold:
    return Threshold(value, 0.5, "linear_interpolation", 1, 0.0)


def scored(prompts, outcomes, scores) -> ScoredDataset:
    return ScoredDataset(np.asarray(prompts), np.asarray(outcomes), np.asarray(scores, dtype=float))


@pytest.fixture
def random_batch():
    env = make_tabular(21, 3, 4)
    stream = make_stream(21, 1)
    prompts = stream.integers(0, 3, 40)
    outcomes = stream.integers(0, 4, 40)
    scores = stream.normal(0.0, 1.0, 40)
    policy = TabularPolicy(env.ref_logits + 0.3 * stream.standard_normal(env.ref_logits.shape))
    return env, policy, scored(prompts, outcomes, scores)


class TestTGOConfig:

    def test_defaults(self):
        config = TGOConfig()
        assert (config.beta, config.c, config.percentile) == (1.0, 5.0, 0.5)
        assert config.numeric_mode == "exact_logsigmoid"

    def test_clipped_mode_parses_eps(self):
        config = TGOConfig(numeric_mode="clipped_sigmoid(1e-9)")
        assert config.numeric_mode == "clipped_sigmoid"
        assert config.clip_eps == 1e-9

    @pytest.mark.parametrize("kwargs", [
        {"beta": 0.0}, {"c": -1.0}, {"percentile": 1.0}, {"numeric_mode": "fast"},
        {"percentile_method": "midpoint"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TGOConfig(**kwargs)


class TestImplicitScore:

    def test_identical_policies(self):
        assert implicit_policy_score(-1.2, -1.2, 3.0) == 0.0

    def test_scaling(self):
        assert implicit_policy_score(0.3, 0.0, 1.0) == pytest.approx(0.3)
        assert implicit_policy_score(0.3, 0.0, 10.0) == pytest.approx(3.0)


class TestTGOLoss:

    def test_anchor_value_at_reference(self):
        ref = TabularPolicy(np.zeros((2, 3)))
        breakdown = tgo_loss(ref, ref, scored([0], [1], [0.8]), threshold_at(0.8), TGOConfig())
        assert breakdown.total == pytest.approx(LN2, abs=1e-12)

    @pytest.mark.parametrize("size", [1, 7, 64])
    def test_anchor_independent_of_batch_size(self, size):
        ref = TabularPolicy(np.zeros((2, 3)))
        batch = scored(np.zeros(size, dtype=int), np.arange(size) % 3, np.full(size, 0.2))
        assert tgo_loss(ref, ref, batch, threshold_at(0.2), TGOConfig()).total == pytest.approx(LN2, abs=1e-12)

    def test_total_is_mean_of_terms(self, random_batch):
        env, policy, batch = random_batch
        breakdown = tgo_loss(policy, env.reference_policy(), batch, threshold_at(0.0), TGOConfig())
        assert breakdown.total == pytest.approx(np.mean(breakdown.per_sample), abs=1e-15)
        assert np.all(np.isfinite(breakdown.gradient))

    def test_saturated_terms(self):
        losses, _ = logistic_terms(np.array([20.0, 20.0]), np.array([1, 0]), np.array([1.0, 1.5]))
        assert losses[0] < 1e-8
        assert losses[1] == pytest.approx(1.5 * 20.0, rel=1e-8)

    def test_saturated_gradient_vanishes(self):
        _, slopes = logistic_terms(np.array([35.0, -35.0]), np.array([1, 0]), np.ones(2))
        assert np.linalg.norm(slopes) < 1e-8

    def test_exact_mode_finite_at_extremes(self):
        losses, slopes = logistic_terms(np.array([-700.0, 700.0]), np.array([1, 0]), np.ones(2))
        assert np.all(np.isfinite(losses)) and np.all(np.isfinite(slopes))
        assert losses == pytest.approx([700.0, 700.0])

    @pytest.mark.parametrize("label, z", [(1, -6.5), (1, 0.0), (1, 20.0), (0, -20.0), (0, 0.0), (0, 6.5)])
    def test_numeric_modes_agree(self, label, z):
        args = (np.array([z]), np.array([label]), np.array([1.0]))
        exact, _ = logistic_terms(*args, "exact_logsigmoid")
        clipped, _ = logistic_terms(*args, "clipped_sigmoid", 1e-12)
        assert abs(exact[0] - clipped[0]) < 1e-9

    @pytest.mark.parametrize("c", [0.0, 1.0, 5.0, 20.0])
    def test_weight_linearity(self, c, random_batch):
        env, policy, batch = random_batch
        ref = env.reference_policy()
        threshold = threshold_at(0.1)
        weighted = tgo_loss(policy, ref, batch, threshold, TGOConfig(c=c)).per_sample
        plain = tgo_loss(policy, ref, batch, threshold, TGOConfig(c=0.0)).per_sample
        expected = (1 + c * np.abs(batch.scores - 0.1)) * plain
        assert np.allclose(weighted, expected, rtol=1e-12, atol=0.0)

    @pytest.mark.parametrize("score, direction", [(1.0, 1), (-1.0, -1)])
    def test_step_moves_log_prob_with_label(self, score, direction):
        env = make_tabular(4, 2, 3)
        ref = env.reference_policy()
        policy = TabularPolicy(ref.logits + 0.1)
        batch = scored([1], [2], [score])
        breakdown = tgo_loss(policy, ref, batch, threshold_at(0.0), TGOConfig())
        stepped = policy.with_params(policy.params - 0.01 * breakdown.gradient)
        before = policy.log_prob_batch(batch.prompts, batch.outcomes)[0]
        after = stepped.log_prob_batch(batch.prompts, batch.outcomes)[0]
        assert np.sign(after - before) == direction

    def test_absent_prompt_has_zero_gradient(self):
        env = make_tabular(5, 3, 3)
        ref = env.reference_policy()
        policy = TabularPolicy(ref.logits + make_stream(5).standard_normal((3, 3)))
        batch = scored([0, 2, 0], [1, 1, 2], [0.4, -0.2, 1.0])
        gradient = tgo_loss(policy, ref, batch, threshold_at(0.0), TGOConfig()).gradient
        assert np.all(gradient[1] == 0.0)

    def test_batch_gradient_is_mean_of_singletons(self, random_batch):
        env, policy, batch = random_batch
        ref = env.reference_policy()
        config = TGOConfig()
        threshold = threshold_at(0.0)
        full = tgo_loss(policy, ref, batch, threshold, config).gradient
        singles = [
            tgo_loss(policy, ref, batch.subset(np.arange(len(batch)) == i), threshold, config).gradient
            for i in range(len(batch))
        ]
        assert np.allclose(full, np.mean(singles, axis=0), atol=1e-12)

    def test_empty_batch_rejected(self):
        ref = TabularPolicy(np.zeros((1, 2)))
        with pytest.raises(ValueError):
            tgo_loss(ref, ref, scored([], [], []), threshold_at(0.0), TGOConfig())

    @pytest.mark.parametrize("mode", ["exact_logsigmoid", "clipped_sigmoid(1e-12)"])
    def test_gradient_matches_finite_differences(self, mode, random_batch):
        env, policy, batch = random_batch
        error = tgo_gradient_check(
            policy, env.reference_policy(), batch, threshold_at(0.0), TGOConfig(numeric_mode=mode), floor=1e-3
        )
        assert error <= 1e-5

    def test_step_size_bounds(self, random_batch):
        env, policy, batch = random_batch
        with pytest.raises(ValueError):
            tgo_gradient_check(policy, env.reference_policy(), batch, threshold_at(0.0), TGOConfig(), h=1e-2)


class TestRelativeScores:

    def test_matches_dataset_path(self, random_batch):
        env, policy, batch = random_batch
        ref = env.reference_policy()
        threshold = threshold_at(0.37)
        config = TGOConfig(beta=0.7, c=3.0)
        from_dataset = tgo_loss(policy, ref, batch, threshold, config)
        from_relative = tgo_loss_relative(
            policy, ref, batch.prompts, batch.outcomes, batch.scores - threshold.value, config
        )
        assert from_relative.total == from_dataset.total
        assert np.array_equal(from_relative.per_sample, from_dataset.per_sample)
        assert np.array_equal(from_relative.gradient, from_dataset.gradient)

    def test_zero_relative_score_is_positive(self):
        ref = TabularPolicy(np.zeros((1, 2)))
        breakdown = tgo_loss_relative(ref, ref, np.array([0]), np.array([1]), np.array([0.0]), TGOConfig())
        assert breakdown.per_sample[0] == pytest.approx(LN2, abs=1e-12)
        # loss falls as the labelled outcome gains probability
        assert breakdown.gradient[0, 1] < 0

    def test_length_mismatch(self):
        ref = TabularPolicy(np.zeros((1, 2)))
        with pytest.raises(ValueError, match="equal length"):
            tgo_loss_relative(ref, ref, np.array([0, 0]), np.array([1, 0]), np.array([0.5]), TGOConfig())


class TestDPOLoss:

    def test_anchor_at_reference(self):
        ref = TabularPolicy(np.zeros((2, 3)))
        pairs = PreferencePairs(np.array([0, 1]), np.array([0, 2]), np.array([1, 0]))
        assert dpo_loss(ref, ref, pairs, 1.0).total == pytest.approx(LN2, abs=1e-12)

    def test_partition_function_cancels(self):
        env = make_tabular(9, 4, 5, "bimodal")
        ref = env.reference_policy()
        beta = 0.7
        star = optimal_policy(ref, env, beta)
        stream = make_stream(9)
        prompts = stream.integers(0, 4, 200)
        winners = stream.integers(0, 5, 200)
        losers = (winners + stream.integers(1, 5, 200)) % 5
        margins = dpo_loss(star, ref, PreferencePairs(prompts, winners, losers), beta).implicit_scores
        expected = env.rewards[prompts, winners] - env.rewards[prompts, losers]
        assert np.allclose(margins, expected, atol=1e-10)

    def test_swapping_negates_margin(self, random_batch):
        env, policy, _ = random_batch
        ref = env.reference_policy()
        pairs = PreferencePairs(np.array([0, 2]), np.array([1, 3]), np.array([0, 0]))
        swapped = PreferencePairs(pairs.prompts, pairs.losers, pairs.winners)
        a = dpo_loss(policy, ref, pairs, 1.0).implicit_scores
        b = dpo_loss(policy, ref, swapped, 1.0).implicit_scores
        assert np.allclose(a, -b, atol=1e-15)

    def test_identical_pair_rejected(self):
        ref = TabularPolicy(np.zeros((1, 2)))
        with pytest.raises(ValueError, match="identical"):
            dpo_loss(ref, ref, PreferencePairs(np.array([0]), np.array([1]), np.array([1])), 1.0)

    def test_gradient_matches_finite_differences(self, random_batch):
        env, policy, _ = random_batch
        ref = env.reference_policy()
        pairs = PreferencePairs(np.array([0, 1, 2, 1]), np.array([0, 1, 2, 3]), np.array([3, 2, 1, 0]))
        error = gradient_check(lambda p: dpo_loss(p, ref, pairs, 1.5), policy, floor=1e-3)
        assert error <= 1e-5


class TestSFTLoss:

    def test_uniform_policy(self):
        policy = TabularPolicy(np.zeros((1, 4)))
        assert sft_loss(policy, np.array([0, 0]), np.array([1, 3])).total == pytest.approx(math.log(4))

    def test_trained_to_point_mass(self):
        policy = TabularPolicy(np.zeros((1, 3)))
        prompts, outcomes = np.array([0]), np.array([2])
        for _ in range(2000):
            policy = policy.with_params(policy.params - 5.0 * sft_loss(policy, prompts, outcomes).gradient)
        assert sft_loss(policy, prompts, outcomes).total < 1e-2

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            sft_loss(TabularPolicy(np.zeros((1, 2))), np.array([], dtype=int), np.array([], dtype=int))

    def test_gradient_matches_finite_differences(self, random_batch):
        _, policy, batch = random_batch
        error = gradient_check(lambda p: sft_loss(p, batch.prompts, batch.outcomes), policy, floor=1e-3)
        assert error <= 1e-5


def test_max_relative_error_skips_tiny_coordinates():
    assert max_relative_error(np.array([1e-14, 1.0]), np.array([3e-14, 1.0])) == 0.0
    assert max_relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    assert max_relative_error(np.zeros(3), np.zeros(3)) == 0.0
