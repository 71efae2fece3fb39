"""Scalar feedback: noisy monotone scores, percentile thresholds, pseudo-labels and weights.

Scores follow s = g(R(x, y)) + xi with g strictly increasing. The threshold tau is a
percentile of observed scores and stands in for the per-prompt oracle baseline; labels
are 1[s >= tau] (ties count as positive) and weights are 1 + c * |s - tau|.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from src.alignment.policy import TabularPolicy, oracle_report
from src.data.environments import Environment, TabularEnv, make_stream, sample_dataset

logger = logging.getLogger(__name__)

TRANSFORMS = ("identity", "affine", "logistic_squash")
NOISE_KINDS = ("gaussian", "uniform")
PERCENTILE_METHODS = ("nearest_rank", "linear_interpolation")


@dataclass
class ScoreModel:
    """Observation model s = g(reward) + noise.

    ``transform`` is one of identity, affine (a * r + b with a > 0) or logistic_squash
    (the logistic function). ``noise`` is gaussian with standard deviation ``noise_scale``
    or uniform on [-noise_scale, noise_scale]. Draws consume ``stream`` in call order.
    """

    transform: str = "identity"
    a: float = 1.0
    b: float = 0.0
    noise_scale: float = 0.0
    noise: str = "gaussian"
    stream: np.random.Generator = field(default_factory=lambda: make_stream(0))

    def __post_init__(self) -> None:
        if self.transform not in TRANSFORMS:
            raise ValueError(f"Unknown transform '{self.transform}', expected one of {TRANSFORMS}")
        if self.transform == "affine" and not self.a > 0:
            raise ValueError(f"Affine transform needs a > 0 to stay strictly increasing, got a={self.a}")
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"Unknown noise '{self.noise}', expected one of {NOISE_KINDS}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be non-negative, got {self.noise_scale}")

    def g(self, rewards: Any) -> Any:
        """The noiseless monotone transform."""
        if self.transform == "identity":
            return rewards
        if self.transform == "affine":
            return self.a * np.asarray(rewards, dtype=float) + self.b
        return expit(rewards)

    def sample_noise(self, size: int) -> np.ndarray:
        """Draw ``size`` noise terms from the model's stream (zeros when noiseless)."""
        if self.noise_scale == 0:
            return np.zeros(size)
        if self.noise == "gaussian":
            return self.noise_scale * self.stream.standard_normal(size)
        return self.stream.uniform(-self.noise_scale, self.noise_scale, size)


@dataclass(frozen=True, eq=False)
class ScoredDataset:
    """Offline samples with observed scores; latent rewards are kept out of this type."""

    prompts: np.ndarray
    outcomes: np.ndarray
    scores: np.ndarray
    source_policy_tag: str = "reference"

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("Scores must be finite")
        if not len(self.prompts) == len(self.outcomes) == len(self.scores):
            raise ValueError("prompts, outcomes and scores must have equal length")

    def __len__(self) -> int:
        return len(self.scores)

    def subset(self, mask: np.ndarray) -> "ScoredDataset":
        return ScoredDataset(self.prompts[mask], self.outcomes[mask], self.scores[mask], self.source_policy_tag)

    def to_frame(self) -> pd.DataFrame:
        """CSV layout ``prompt_id,outcome,score``; vector outcomes are space-joined."""
        if self.outcomes.ndim > 1:
            outcome_column = [" ".join(repr(v.item()) for v in row) for row in self.outcomes]
        else:
            outcome_column = self.outcomes
        return pd.DataFrame({
            'prompt_id': self.prompts.astype(int),
            'outcome': outcome_column,
            'score': self.scores.astype(float),
        })


@dataclass(frozen=True)
class Threshold:
    """Estimated percentile threshold with its estimation metadata."""

    value: float
    percentile: float
    method: str
    sample_count: int
    quantile_std_error: float


def score_sample(model: ScoreModel, reward: float) -> float:
    """Observe one reward through the score model."""
    return float(model.g(reward) + model.sample_noise(1)[0])


def score_rewards(model: ScoreModel, rewards: np.ndarray) -> np.ndarray:
    """Vectorized ``score_sample``; noise is drawn in record order."""
    rewards = np.asarray(rewards, dtype=float)
    return np.asarray(model.g(rewards), dtype=float) + model.sample_noise(len(rewards))


def score_dataset(model: ScoreModel, samples: Any, source_policy_tag: str = "reference") -> ScoredDataset:
    """Attach observed scores to a ``SampleSet``."""
    scores = score_rewards(model, samples.rewards)
    return ScoredDataset(samples.prompts, samples.outcomes, scores, source_policy_tag)


def _check_percentile(p: float) -> None:
    if not 0 < p < 1:
        raise ValueError(f"Percentile must lie strictly between 0 and 1, got {p}")


def _quantile_std_error(ordered: np.ndarray, p: float) -> float:
    """Asymptotic standard error sqrt(p(1-p)/n) / f(tau).

    The density is replaced by a finite difference of order statistics spaced
    about sqrt(n) ranks apart around the p-th rank.
    """
    n = len(ordered)
    if n < 2:
        return 0.0
    half_width = max(1, int(math.sqrt(n)))
    center = int(round(p * (n - 1)))
    lo = max(0, center - half_width)
    hi = min(n - 1, center + half_width)
    spread = ordered[hi] - ordered[lo]
    if spread <= 0:
        return 0.0
    inverse_density = spread * n / (hi - lo)
    return float(math.sqrt(p * (1 - p) / n) * inverse_density)


def estimate_threshold(
    scores: Sequence[float],
    p: float = 0.5,
    method: str = "linear_interpolation",
) -> Threshold:
    """Percentile threshold tau of observed scores.

    ``nearest_rank`` returns the order statistic of rank ceil(p * n) (an element of the
    sample); ``linear_interpolation`` interpolates between adjacent order statistics at
    position p * (n - 1).
    """
    values = np.asarray(scores, dtype=float)
    if values.size == 0:
        raise ValueError("Cannot estimate a threshold from an empty score list")
    _check_percentile(p)
    if method not in PERCENTILE_METHODS:
        raise ValueError(f"Unknown percentile method '{method}', expected one of {PERCENTILE_METHODS}")

    ordered = np.sort(values)
    numpy_method = "inverted_cdf" if method == "nearest_rank" else "linear"
    value = float(np.quantile(ordered, p, method=numpy_method))
    return Threshold(
        value=value,
        percentile=p,
        method=method,
        sample_count=int(values.size),
        quantile_std_error=_quantile_std_error(ordered, p),
    )


def _threshold_value(threshold: Union[Threshold, float]) -> float:
    return threshold.value if isinstance(threshold, Threshold) else float(threshold)


def pseudo_label(score: Any, threshold: Union[Threshold, float]) -> Any:
    """l = 1[s >= tau], inclusive at the threshold.

    Accepts a single score (returns an int) or an array of scores (returns an int array).
    ``threshold`` is a Threshold or a bare value; 0.0 labels precomputed s - tau.
    """
    labels = (np.asarray(score, dtype=float) >= _threshold_value(threshold)).astype(int)
    return int(labels) if labels.ndim == 0 else labels


def confidence_weight(score: Any, threshold: Union[Threshold, float], c: float) -> Any:
    """w(s, tau) = 1 + c * |s - tau| for a single score or an array of scores."""
    if c < 0:
        raise ValueError(f"Confidence scale c must be non-negative, got {c}")
    weights = 1.0 + c * np.abs(np.asarray(score, dtype=float) - _threshold_value(threshold))
    return float(weights) if weights.ndim == 0 else weights


def oracle_labels(env: TabularEnv, beta: float, prompts: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
    """l* = 1[R(x, y) >= tau*(x)] against the environment's reference policy."""
    baseline = oracle_report(env.reference_policy(), env, beta).baseline
    return (env.reward(prompts, outcomes) >= baseline[np.asarray(prompts, dtype=int)]).astype(int)


def calibration_error(
    dataset: ScoredDataset,
    env: TabularEnv,
    beta: float,
    threshold: Threshold,
) -> float:
    """Fraction of records whose pseudo-label disagrees with the oracle label.

    The threshold must live on the same scale as the scores; a threshold from another
    score scale cannot be detected here.
    """
    if len(dataset) == 0:
        raise ValueError("Cannot measure calibration on an empty dataset")
    labels = pseudo_label(dataset.scores, threshold)
    oracle = oracle_labels(env, beta, dataset.prompts, dataset.outcomes)
    return float(np.mean(labels != oracle))


def proxy_threshold(
    ref_policy: Any,
    env: Environment,
    model: ScoreModel,
    n_proxy: int,
    p: float,
    stream: np.random.Generator,
    method: str = "linear_interpolation",
) -> Threshold:
    """Estimate tau from a fresh proxy set drawn from the reference policy."""
    if n_proxy < 1:
        raise ValueError(f"Proxy set needs at least one sample, got n_proxy={n_proxy}")
    samples = sample_dataset(env, ref_policy, n_proxy, stream, rng_tag="proxy")
    scores = score_rewards(model, samples.rewards)
    threshold = estimate_threshold(scores, p, method)
    logger.debug(f"Proxy threshold {threshold.value:.6f} from {n_proxy} reference samples")
    return threshold


def population_threshold(env: TabularEnv, ref: TabularPolicy, model: ScoreModel, p: float) -> float:
    """Exact p-quantile inf{s : F(s) >= p} of noiseless scores under the reference sampling."""
    _check_percentile(p)
    mass = (env.prompt_weights[:, None] * ref.probs()).ravel()
    scores = np.asarray(model.g(env.rewards), dtype=float).ravel()
    order = np.argsort(scores, kind="stable")
    cumulative = np.cumsum(mass[order])
    index = int(np.searchsorted(cumulative, p - 1e-15, side="left"))
    return float(scores[order][min(index, len(order) - 1)])
