"""Tabular policies with exact log-likelihoods and the closed-form KL-regularized oracles.

The oracles here (partition function, oracle baseline, optimal policy) are intractable for
real generative models but exact on finite outcome spaces, which is what makes the
threshold rule testable against them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Protocol

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

if TYPE_CHECKING:
    from src.data.environments import TabularEnv

logger = logging.getLogger(__name__)


class LikelihoodModel(Protocol):
    """A trainable policy whose per-sample log-likelihood has an analytic gradient."""

    @property
    def params(self) -> np.ndarray: ...

    def with_params(self, params: np.ndarray) -> "LikelihoodModel": ...

    def copy(self) -> "LikelihoodModel": ...

    def log_prob_batch(self, prompts: np.ndarray, outcomes: np.ndarray) -> np.ndarray: ...

    def gradient(
        self, prompts: np.ndarray, outcomes: np.ndarray, coefficients: np.ndarray
    ) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Per-prompt softmax over a finite outcome set, stored as logits."""

    logits: np.ndarray

    def __post_init__(self) -> None:
        logits = np.array(self.logits, dtype=float)
        if logits.ndim != 2:
            raise ValueError(f"Policy logits must be a prompt x outcome matrix, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ValueError("Policy logits must be finite")
        object.__setattr__(self, "logits", logits)

    @property
    def num_prompts(self) -> int:
        return self.logits.shape[0]

    @property
    def num_outcomes(self) -> int:
        return self.logits.shape[1]

    @property
    def params(self) -> np.ndarray:
        return self.logits

    def with_params(self, params: np.ndarray) -> "TabularPolicy":
        return TabularPolicy(np.asarray(params, dtype=float).reshape(self.logits.shape))

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.logits)

    def log_probs(self) -> np.ndarray:
        """Log-probability matrix, one normalized row per prompt."""
        return log_softmax(self.logits, axis=1)

    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=1)

    def centered(self) -> np.ndarray:
        """Logits with each row mean removed (softmax gauge fixing)."""
        return self.logits - self.logits.mean(axis=1, keepdims=True)

    def log_prob_batch(self, prompts: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        prompts = np.asarray(prompts, dtype=int)
        outcomes = np.asarray(outcomes, dtype=int)
        return self.log_probs()[prompts, outcomes]

    def gradient(
        self, prompts: np.ndarray, outcomes: np.ndarray, coefficients: np.ndarray
    ) -> np.ndarray:
        """Sum of coefficient_i * d log pi(y_i|x_i) / d logits.

        For a softmax row the derivative of log pi(y|x) is e_y - pi(.|x), confined to row x.
        Rows are accumulated in batch order so the reduction is reproducible.
        """
        prompts = np.asarray(prompts, dtype=int)
        outcomes = np.asarray(outcomes, dtype=int)
        coefficients = np.asarray(coefficients, dtype=float)
        rows = -coefficients[:, None] * self.probs()[prompts]
        rows[np.arange(len(prompts)), outcomes] += coefficients
        grad = np.zeros_like(self.logits)
        np.add.at(grad, prompts, rows)
        return grad

    def kl_divergence(self, other: "TabularPolicy", weights: np.ndarray) -> float:
        """Prompt-weighted KL(self || other)."""
        per_prompt = [kl_divergence(self, other, x) for x in range(self.num_prompts)]
        return float(np.dot(weights, per_prompt))


@dataclass(frozen=True, eq=False)
class OracleReport:
    """Per-prompt partition function Z(x) and oracle baseline beta * log Z(x)."""

    partition: np.ndarray
    baseline: np.ndarray
    beta: float


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")


def _check_index(name: str, index: int, size: int) -> None:
    if not 0 <= index < size:
        raise IndexError(f"{name} index {index} out of range [0, {size})")


def _check_env_shape(ref: TabularPolicy, env: "TabularEnv") -> None:
    if ref.logits.shape != env.rewards.shape:
        raise ValueError(
            f"Reference policy shape {ref.logits.shape} does not match environment {env.rewards.shape}"
        )


def log_prob(policy: TabularPolicy, prompt: int, outcome: int) -> float:
    """log pi(outcome | prompt) as logit minus the row logsumexp."""
    _check_index("prompt", prompt, policy.num_prompts)
    _check_index("outcome", outcome, policy.num_outcomes)
    row = policy.logits[prompt]
    return float(row[outcome] - logsumexp(row))


def log_partition_function(ref: TabularPolicy, env: "TabularEnv", beta: float) -> np.ndarray:
    """log Z(x) for every prompt, computed with the logsumexp shift."""
    _check_beta(beta)
    _check_env_shape(ref, env)
    return logsumexp(ref.log_probs() + env.rewards / beta, axis=1)


def partition_function(ref: TabularPolicy, env: "TabularEnv", beta: float, prompt: int) -> float:
    """Z(x) = sum_y pi_ref(y|x) exp(R(x, y) / beta)."""
    _check_beta(beta)
    _check_index("prompt", prompt, ref.num_prompts)
    return float(np.exp(log_partition_function(ref, env, beta)[prompt]))


def oracle_baseline(ref: TabularPolicy, env: "TabularEnv", beta: float, prompt: int) -> float:
    """tau*(x) = beta * log Z(x), the instance-dependent baseline of the optimal policy."""
    _check_beta(beta)
    _check_index("prompt", prompt, ref.num_prompts)
    return float(beta * log_partition_function(ref, env, beta)[prompt])


def oracle_report(ref: TabularPolicy, env: "TabularEnv", beta: float) -> OracleReport:
    log_z = log_partition_function(ref, env, beta)
    return OracleReport(partition=np.exp(log_z), baseline=beta * log_z, beta=beta)


def optimal_policy(ref: TabularPolicy, env: "TabularEnv", beta: float) -> TabularPolicy:
    """Closed-form maximizer of the KL-regularized objective.

    The returned logits are the normalized log-probabilities
    log pi_ref(y|x) + R(x, y) / beta - log Z(x).
    """
    log_z = log_partition_function(ref, env, beta)
    return TabularPolicy(ref.log_probs() + env.rewards / beta - log_z[:, None])


def kl_divergence(p: TabularPolicy, q: TabularPolicy, prompt: int) -> float:
    """KL(p(.|x) || q(.|x)) for one prompt."""
    if p.logits.shape != q.logits.shape:
        raise ValueError(f"Policy shapes differ: {p.logits.shape} vs {q.logits.shape}")
    _check_index("prompt", prompt, p.num_prompts)
    log_p = log_softmax(p.logits[prompt])
    log_q = log_softmax(q.logits[prompt])
    value = float(np.sum(np.exp(log_p) * (log_p - log_q)))
    return max(value, 0.0)


def surrogate_log_prob_mse(prediction: np.ndarray, target: np.ndarray, temperature: float) -> float:
    """Gaussian-observation surrogate: log pi ~ -MSE(prediction, target) / T."""
    prediction = np.asarray(prediction, dtype=float)
    target = np.asarray(target, dtype=float)
    if prediction.shape != target.shape:
        raise ValueError(f"Prediction shape {prediction.shape} does not match target {target.shape}")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return float(-np.mean((prediction - target) ** 2) / temperature)


def surrogate_log_prob_masked(token_log_probs: np.ndarray, mask: Iterable[int]) -> float:
    """Mean log-likelihood of the true tokens over the masked positions only."""
    token_log_probs = np.asarray(token_log_probs, dtype=float)
    positions = sorted(set(mask))
    if not positions:
        raise ValueError("Mask must contain at least one position")
    for position in positions:
        _check_index("mask position", position, len(token_log_probs))
    return float(np.mean(token_log_probs[positions]))
