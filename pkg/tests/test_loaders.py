"""Tests for flat-file and CSV persistence."""

import numpy as np
import pandas as pd
import pytest

from src.alignment.policy import TabularPolicy
from src.data.environments import make_masked, make_stream, make_tabular, reference_env, sample_dataset
from src.data.feedback import ScoreModel, Threshold, score_dataset
from src.data.loaders import (
    atomic_write_text,
    file_fingerprint,
    load_dataset,
    load_environment,
    load_policy,
    load_threshold,
    parse_flat,
    parse_matrix,
    save_dataset,
    save_environment,
    save_policy,
    save_threshold,
    text_fingerprint,
    write_csv,
)


class TestParseFlat:

    def test_comments_and_blank_lines(self):
        items = parse_flat("# header\n\nseed = 7  # run seed\ntgo.c=5\n")
        assert items == {"seed": "7", "tgo.c": "5"}

    def test_missing_equals(self):
        with pytest.raises(ValueError, match=":2:"):
            parse_flat("a = 1\nbroken line\n", source="cfg")

    def test_duplicate_key(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_flat("a = 1\na = 2\n")

    def test_ragged_matrix(self):
        with pytest.raises(ValueError, match="Ragged"):
            parse_matrix("1,2;3")


class TestEnvironmentFiles:

    def test_tabular_reload_is_exact(self, tmp_path):
        env = make_tabular(13, 3, 5, "bimodal")
        loaded = load_environment(save_environment(env, tmp_path / "env.txt"))
        assert np.array_equal(loaded.rewards, env.rewards)
        assert np.array_equal(loaded.ref_logits, env.ref_logits)
        assert np.array_equal(loaded.prompt_weights, env.prompt_weights)

    def test_masked_reload_keeps_mask(self, tmp_path):
        env = make_masked(2, 2, vocab_size=4, seq_len=5)
        loaded = load_environment(save_environment(env, tmp_path / "env.txt"))
        assert loaded.mask_set == env.mask_set
        assert np.array_equal(loaded.ref_logits, env.ref_logits)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_environment(tmp_path / "absent.txt")

    def test_missing_key(self, tmp_path):
        path = tmp_path / "env.txt"
        path.write_text("kind = tabular\nrewards = 1,2\n")
        with pytest.raises(ValueError, match="missing required keys"):
            load_environment(path)

    def test_invalid_weights(self, tmp_path):
        path = tmp_path / "env.txt"
        path.write_text("kind = tabular\nrewards = 1,2\nref_logits = 0,0\nprompt_weights = 0.4\n")
        with pytest.raises(ValueError, match="prompt_weights"):
            load_environment(path)


def test_policy_and_threshold_files(tmp_path):
    policy = TabularPolicy(np.array([[0.1, -2.5, 3.0]]))
    assert np.array_equal(load_policy(save_policy(policy, tmp_path / "policy.txt")).logits, policy.logits)

    threshold = Threshold(0.8125, 0.5, "nearest_rank", 40, 0.03)
    assert load_threshold(save_threshold(threshold, tmp_path / "tau.txt")) == threshold


class TestDatasetFiles:

    def test_csv_layout(self, tmp_path):
        env = reference_env()
        samples = sample_dataset(env, env.reference_policy(), 30, make_stream(1))
        dataset = score_dataset(ScoreModel(noise_scale=0.1, stream=make_stream(2)), samples)
        path = save_dataset(dataset, tmp_path / "dataset.csv")
        assert path.read_text().splitlines()[0] == "prompt_id,outcome,score"

        loaded = load_dataset(path, env)
        assert np.array_equal(loaded.prompts, dataset.prompts)
        assert np.array_equal(loaded.outcomes, dataset.outcomes)
        assert np.allclose(loaded.scores, dataset.scores, rtol=1e-15, atol=0.0)

    def test_token_outcomes(self, tmp_path):
        env = make_masked(0, 2, vocab_size=4, seq_len=5)
        samples = sample_dataset(env, env.reference_policy(), 12, make_stream(3))
        dataset = score_dataset(ScoreModel(), samples)
        loaded = load_dataset(save_dataset(dataset, tmp_path / "dataset.csv"), env)
        assert loaded.outcomes.shape == (12, 5)
        assert np.array_equal(loaded.outcomes, dataset.outcomes)

    def test_out_of_range_outcome(self, tmp_path):
        path = tmp_path / "dataset.csv"
        pd.DataFrame({"prompt_id": [0], "outcome": [3], "score": [0.1]}).to_csv(path, index=False)
        with pytest.raises(ValueError, match="outcomes"):
            load_dataset(path, reference_env())

    def test_missing_column(self, tmp_path):
        path = tmp_path / "dataset.csv"
        pd.DataFrame({"prompt_id": [0], "outcome": [1]}).to_csv(path, index=False)
        with pytest.raises(ValueError, match="Missing required columns"):
            load_dataset(path, reference_env())


class TestWrites:

    def test_atomic_write_creates_parents(self, tmp_path):
        path = atomic_write_text(tmp_path / "a" / "b" / "out.txt", "hello\n")
        assert path.read_text() == "hello\n"
        assert [p.name for p in path.parent.iterdir()] == ["out.txt"]

    def test_csv_is_byte_stable(self, tmp_path):
        frame = pd.DataFrame({"x": [1, 2], "y": [0.1, 1 / 3]})
        first = write_csv(frame, tmp_path / "a.csv").read_bytes()
        second = write_csv(frame, tmp_path / "b.csv").read_bytes()
        assert first == second
        assert b"\r\n" not in first

    def test_fingerprints_agree(self, tmp_path):
        path = atomic_write_text(tmp_path / "x.txt", "seed = 1\n")
        assert file_fingerprint(path) == text_fingerprint("seed = 1\n")
        assert len(text_fingerprint("")) == 64
