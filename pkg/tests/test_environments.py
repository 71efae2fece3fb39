"""Tests for environment construction and offline sampling."""

import numpy as np
import pytest

from src.alignment.policy import TabularPolicy
from src.data.environments import (
    RewardSpec,
    bimodal_suite,
    make_gaussian,
    make_masked,
    make_stream,
    make_tabular,
    reference_env,
    sample_dataset,
    shared_baseline_env,
)


class TestMakeTabular:

    def test_shapes_and_weights(self):
        env = make_tabular(3, k=2, m=5)
        assert env.rewards.shape == (2, 5)
        assert env.ref_logits.shape == (2, 5)
        assert env.prompt_weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_deterministic_in_seed(self):
        a = make_tabular(11, 3, 4, "bimodal")
        b = make_tabular(11, 3, 4, "bimodal")
        c = make_tabular(12, 3, 4, "bimodal")
        assert np.array_equal(a.rewards, b.rewards)
        assert np.array_equal(a.ref_logits, b.ref_logits)
        assert not np.array_equal(a.rewards, c.rewards)

    def test_constant_rewards(self):
        env = make_tabular(0, 2, 3, "constant(2.5)")
        assert np.all(env.rewards == 2.5)

    def test_uniform_rewards_in_unit_interval(self):
        env = make_tabular(5, 4, 6, "uniform_random")
        assert env.rewards.min() >= 0.0
        assert env.rewards.max() < 1.0

    def test_bimodal_rows_mix_both_modes(self):
        env = make_tabular(7, 5, 4, "bimodal")
        for row in env.rewards:
            assert (row > 0).sum() == 2
            assert (row < 0).sum() == 2

    def test_single_outcome_rejected(self):
        with pytest.raises(ValueError, match="at least two outcomes"):
            make_tabular(0, 2, 1)

    def test_unknown_reward_spec_rejected(self):
        with pytest.raises(ValueError, match="Unknown reward spec"):
            make_tabular(0, 2, 3, "triangular")

    def test_bad_prompt_weights_rejected(self):
        with pytest.raises(ValueError, match="prompt_weights"):
            make_tabular(0, 2, 3, prompt_weights=[0.7, 0.7])


def test_reward_spec_round_trip_text():
    assert str(RewardSpec.parse("constant(1.5)")) == "constant(1.5)"
    assert RewardSpec.parse(" bimodal ").kind == "bimodal"


class TestSampleDataset:

    def test_sample_count_and_ranges(self):
        env = make_tabular(1, 3, 4)
        samples = sample_dataset(env, env.reference_policy(), 500, make_stream(0))
        assert len(samples) == 500
        assert samples.prompts.min() >= 0 and samples.prompts.max() < 3
        assert samples.outcomes.min() >= 0 and samples.outcomes.max() < 4
        assert np.array_equal(samples.rewards, env.rewards[samples.prompts, samples.outcomes])

    def test_same_stream_same_samples(self):
        env = make_tabular(1, 3, 4)
        a = sample_dataset(env, env.reference_policy(), 100, make_stream(9, 1))
        b = sample_dataset(env, env.reference_policy(), 100, make_stream(9, 1))
        assert np.array_equal(a.outcomes, b.outcomes)

    def test_empirical_frequencies_match_policy(self):
        env = reference_env()
        samples = sample_dataset(env, env.reference_policy(), 30_000, make_stream(2))
        freq = np.bincount(samples.outcomes[samples.prompts == 0], minlength=3)
        freq = freq / freq.sum()
        assert np.allclose(freq, 1 / 3, atol=0.02)

    def test_zero_weight_prompt_never_sampled(self):
        env = make_tabular(4, 2, 3, prompt_weights=[1.0, 0.0])
        samples = sample_dataset(env, env.reference_policy(), 200, make_stream(0))
        assert np.all(samples.prompts == 0)

    def test_records_view(self):
        env = reference_env()
        samples = sample_dataset(env, env.reference_policy(), 5, make_stream(0), rng_tag="t")
        records = samples.records()
        assert len(records) == 5
        assert records[0].rng_tag == "t"
        assert records[0].reward == env.rewards[records[0].prompt_id, records[0].outcome]

    def test_mismatched_policy_rejected(self):
        env = make_tabular(1, 3, 4)
        other = make_tabular(1, 2, 4)
        with pytest.raises(ValueError):
            sample_dataset(env, other.reference_policy(), 10, make_stream(0))

    def test_zero_samples(self):
        env = make_tabular(1, 3, 4)
        samples = sample_dataset(env, env.reference_policy(), 0, make_stream(0))
        assert len(samples) == 0
        assert samples.records() == []

    def test_point_mass_policy_always_same_outcome(self):
        env = make_tabular(1, 3, 4)
        logits = np.full((3, 4), -1e3)
        logits[:, 2] = 0.0
        samples = sample_dataset(env, TabularPolicy(logits), 300, make_stream(0))
        assert np.all(samples.outcomes == 2)


class TestSurrogateEnvironments:

    def test_gaussian_samples_and_rewards(self):
        env = make_gaussian(0, 3, 4)
        samples = sample_dataset(env, env.reference_policy(), 50, make_stream(0))
        assert samples.outcomes.shape == (50, 4)
        assert np.all(samples.rewards <= 0)

    def test_gaussian_mean_reward_closed_form(self):
        env = make_gaussian(2, 2, 3, noise_scale=0.1)
        policy = env.reference_policy()
        gap = np.mean((policy.predictions - env.targets) ** 2, axis=1)
        expected = -np.dot(env.prompt_weights, gap) - 0.01
        assert env.mean_reward(policy) == pytest.approx(expected, abs=1e-12)

    def test_masked_samples_only_change_masked_positions(self):
        env = make_masked(0, 2, vocab_size=5, seq_len=6)
        samples = sample_dataset(env, env.reference_policy(), 40, make_stream(1))
        unmasked = [i for i in range(6) if i not in env.mask_set]
        truth = env.true_tokens[samples.prompts]
        assert np.array_equal(samples.outcomes[:, unmasked], truth[:, unmasked])
        assert np.all((samples.rewards >= 0) & (samples.rewards <= 1))

    def test_masked_mean_reward_of_uniform_policy(self):
        env = make_masked(0, 2, vocab_size=4, seq_len=5)
        policy = env.reference_policy().with_params(np.zeros_like(env.ref_logits))
        assert env.mean_reward(policy) == pytest.approx(0.25, abs=1e-12)


def test_bimodal_suite_is_distinct_and_reproducible():
    suite = bimodal_suite(3)
    again = bimodal_suite(3)
    assert len(suite) == 3
    assert np.array_equal(suite[2].rewards, again[2].rewards)
    assert not np.array_equal(suite[0].rewards, suite[1].rewards)


def test_shared_baseline_env_rows_are_permutations():
    env = shared_baseline_env()
    assert np.array_equal(np.sort(env.rewards[0]), np.sort(env.rewards[1]))


def test_make_stream_rejects_negative_keys():
    with pytest.raises(ValueError):
        make_stream(-1)
    with pytest.raises(ValueError):
        make_stream(0, -2)
