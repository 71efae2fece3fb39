"""Offline threshold-guided training from a fixed scored dataset.

The loop freezes a reference copy of the initial policy, samples and scores one offline
dataset from it, estimates the percentile threshold, then runs shuffled minibatch epochs of
gradient descent on the chosen objective. An optional per-epoch refresh replaces the
reference with the current policy. Scores are never recomputed after a refresh: they
belong to the fixed offline dataset.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.alignment.objective import (
    LossBreakdown,
    PreferencePairs,
    TGOConfig,
    dpo_loss,
    sft_loss,
    tgo_loss,
)
from src.alignment.policy import TabularPolicy, optimal_policy
from src.data.environments import Environment, TabularEnv, make_stream, sample_dataset
from src.data.feedback import (
    ScoreModel,
    ScoredDataset,
    Threshold,
    estimate_threshold,
    proxy_threshold,
    pseudo_label,
    score_dataset,
)

logger = logging.getLogger(__name__)

OBJECTIVES = ("tgo", "dpo", "sft")
OPTIMIZERS = ("sgd", "sgd_momentum")
THRESHOLD_SOURCES = ("dataset", "proxy")
REPORT_QUANTILES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

# Stream keys under the run seed.
SAMPLING_STREAM = 1
SHUFFLE_STREAM = 2
PROXY_STREAM = 3
PAIRING_STREAM = 4

_MOMENTUM_PATTERN = re.compile(r"^sgd_momentum\(\s*([-+0-9.eE]+)\s*\)$")


class NonFiniteLossError(FloatingPointError):
    """Loss or gradient became NaN/inf; carries the offending step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"Non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    """Offline training settings; ``optimizer`` also accepts ``sgd_momentum(mu)``."""

    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 0.1
    optimizer: str = "sgd"
    momentum: float = 0.9
    refresh_reference: bool = False
    reestimate_threshold_on_refresh: bool = True
    seed: int = 0
    objective: str = "tgo"
    tgo: TGOConfig = field(default_factory=TGOConfig)
    threshold_source: str = "dataset"
    proxy_size: int = 1000

    def __post_init__(self) -> None:
        match = _MOMENTUM_PATTERN.match(self.optimizer.strip())
        if match:
            object.__setattr__(self, "optimizer", "sgd_momentum")
            object.__setattr__(self, "momentum", float(match.group(1)))
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"Unknown optimizer '{self.optimizer}', expected one of {OPTIMIZERS}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"Unknown objective '{self.objective}', expected one of {OBJECTIVES}")
        if self.threshold_source not in THRESHOLD_SOURCES:
            raise ValueError(f"Unknown threshold_source '{self.threshold_source}'")
        if self.proxy_size < 1:
            raise ValueError(f"proxy_size must be at least 1, got {self.proxy_size}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True, eq=False)
class TrainReport:
    """Diagnostics of one offline run.

    ``loss_curve`` has one entry per optimizer step. The epoch curves have ``epochs + 1``
    entries; entry 0 describes the initial policy. ``kl_to_optimal_curve`` is empty for
    surrogate environments, where the optimal policy leaves the model family.
    """

    loss_curve: List[float]
    mean_reward_curve: List[float]
    kl_to_ref_curve: List[float]
    kl_to_optimal_curve: List[float]
    final_policy: Any
    threshold_history: List[Threshold]
    dataset: ScoredDataset
    step_epochs: List[int]

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'step': np.arange(len(self.loss_curve)),
            'epoch': self.step_epochs,
            'loss': self.loss_curve,
        })

    def epoch_frame(self) -> pd.DataFrame:
        n = len(self.mean_reward_curve)
        kl_opt = self.kl_to_optimal_curve if self.kl_to_optimal_curve else [np.nan] * n
        return pd.DataFrame({
            'epoch': np.arange(n),
            'mean_reward': self.mean_reward_curve,
            'kl_to_ref': self.kl_to_ref_curve,
            'kl_to_optimal': kl_opt,
        })

    def threshold_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                'update': i,
                'value': t.value,
                'percentile': t.percentile,
                'method': t.method,
                'sample_count': t.sample_count,
                'quantile_std_error': t.quantile_std_error,
            }
            for i, t in enumerate(self.threshold_history)
        ])


@dataclass(frozen=True)
class PolicyEvaluation:
    mean_reward: float
    median_reward: float
    reward_quantiles: Tuple[float, ...]


def weighted_quantiles(values: np.ndarray, weights: np.ndarray, quantiles: Any) -> np.ndarray:
    """inf{v : F(v) >= q} of a discrete distribution given as values with probability weights."""
    values = np.asarray(values, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    order = np.argsort(values, kind="stable")
    cumulative = np.cumsum(weights[order])
    cumulative /= cumulative[-1]
    index = np.searchsorted(cumulative, np.asarray(quantiles, dtype=float) - 1e-12, side="left")
    return values[order][np.minimum(index, len(values) - 1)]


def reward_distribution(env: TabularEnv, policy: TabularPolicy) -> Tuple[np.ndarray, np.ndarray]:
    """Exact reward distribution under ``policy``: (reward values, probabilities)."""
    env.check_policy(policy)
    mass = env.prompt_weights[:, None] * policy.probs()
    return env.rewards.ravel(), mass.ravel()


def evaluate_policy(env: TabularEnv, policy: TabularPolicy) -> PolicyEvaluation:
    """Exact mean, median and deciles of the reward under ``policy``."""
    if not isinstance(env, TabularEnv):
        raise ValueError("Exact reward quantiles require a tabular environment")
    values, mass = reward_distribution(env, policy)
    quantiles = weighted_quantiles(values, mass, REPORT_QUANTILES)
    return PolicyEvaluation(
        mean_reward=env.mean_reward(policy),
        median_reward=float(weighted_quantiles(values, mass, [0.5])[0]),
        reward_quantiles=tuple(float(q) for q in quantiles),
    )


def build_preference_pairs(dataset: ScoredDataset, stream: np.random.Generator) -> PreferencePairs:
    """Pair scalar-scored records sharing a prompt.

    Records of each prompt are shuffled and paired consecutively; the higher score wins.
    Pairs with equal outcomes or equal scores carry no preference and are dropped.
    """
    prompts, winners, losers = [], [], []
    for prompt in np.unique(dataset.prompts):
        members = stream.permutation(np.flatnonzero(dataset.prompts == prompt))
        for a, b in zip(members[0::2], members[1::2]):
            if dataset.scores[a] == dataset.scores[b]:
                continue
            if np.array_equal(dataset.outcomes[a], dataset.outcomes[b]):
                continue
            win, lose = (a, b) if dataset.scores[a] > dataset.scores[b] else (b, a)
            prompts.append(int(prompt))
            winners.append(dataset.outcomes[win])
            losers.append(dataset.outcomes[lose])
    if not prompts:
        return PreferencePairs(np.zeros(0, dtype=int), dataset.outcomes[:0], dataset.outcomes[:0])
    return PreferencePairs(np.array(prompts), np.array(winners), np.array(losers))


def _kl(policy: Any, other: Any, env: Environment) -> float:
    return float(policy.kl_divergence(other, env.prompt_weights))


class _Objective:
    """Binds the run's objective to its training units (records, positives or pairs)."""

    def __init__(self, config: TrainConfig, dataset: ScoredDataset, stream: np.random.Generator):
        self.config = config
        self.dataset = dataset
        self.positives: Optional[ScoredDataset] = None
        self.pairs: Optional[PreferencePairs] = None
        if config.objective == "dpo":
            self.pairs = build_preference_pairs(dataset, stream)
            if len(self.pairs) == 0:
                raise ValueError("No informative preference pairs could be formed from the dataset")
            logger.info(f"Built {len(self.pairs)} preference pairs from {len(dataset)} records")

    def relabel(self, threshold: Threshold) -> None:
        if self.config.objective != "sft":
            return
        keep = pseudo_label(self.dataset.scores, threshold) == 1
        self.positives = self.dataset.subset(keep)
        if len(self.positives) == 0:
            raise ValueError("No pseudo-positive records for SFT")

    def size(self) -> int:
        if self.pairs is not None:
            return len(self.pairs)
        if self.positives is not None:
            return len(self.positives)
        return len(self.dataset)

    def evaluate(self, policy: Any, ref: Any, threshold: Threshold, index: np.ndarray) -> LossBreakdown:
        if self.pairs is not None:
            subset = PreferencePairs(
                self.pairs.prompts[index], self.pairs.winners[index], self.pairs.losers[index]
            )
            return dpo_loss(policy, ref, subset, self.config.tgo.beta)
        if self.positives is not None:
            return sft_loss(policy, self.positives.prompts[index], self.positives.outcomes[index])
        batch = ScoredDataset(
            self.dataset.prompts[index], self.dataset.outcomes[index], self.dataset.scores[index]
        )
        return tgo_loss(policy, ref, batch, threshold, self.config.tgo)


def _estimate(
    config: TrainConfig,
    env: Environment,
    ref: Any,
    dataset: ScoredDataset,
    score_model: ScoreModel,
    proxy_stream: np.random.Generator,
) -> Threshold:
    tgo = config.tgo
    if config.threshold_source == "proxy":
        return proxy_threshold(
            ref, env, score_model, config.proxy_size, tgo.percentile, proxy_stream, tgo.percentile_method
        )
    return estimate_threshold(dataset.scores, tgo.percentile, tgo.percentile_method)


def run_offline(
    env: Environment,
    initial_policy: Any,
    score_model: ScoreModel,
    n_samples: int,
    config: TrainConfig,
    dataset: Optional[ScoredDataset] = None,
) -> TrainReport:
    """Offline training from scalar feedback.

    Args:
        env: Environment providing rewards and exact evaluation
        initial_policy: Starting policy; a frozen copy becomes the reference
        score_model: Observation model turning rewards into scores
        n_samples: Size of the offline dataset drawn from the reference
        config: Training settings
        dataset: Pre-scored dataset to train on instead of sampling a fresh one

    Returns:
        TrainReport with per-step loss and per-epoch reward/KL curves

    Raises:
        ValueError: If n_samples < batch_size or shapes disagree
        NonFiniteLossError: If a loss or gradient becomes non-finite
    """
    env.check_policy(initial_policy)
    if dataset is not None:
        n_samples = len(dataset)
    if n_samples < config.batch_size:
        raise ValueError(f"n_samples ({n_samples}) must be at least batch_size ({config.batch_size})")

    ref = initial_policy.copy()
    if dataset is None:
        samples = sample_dataset(env, ref, n_samples, make_stream(config.seed, SAMPLING_STREAM), "offline")
        dataset = score_dataset(score_model, samples)
    proxy_stream = make_stream(config.seed, PROXY_STREAM)
    shuffle_stream = make_stream(config.seed, SHUFFLE_STREAM)

    threshold = _estimate(config, env, ref, dataset, score_model, proxy_stream)
    history = [threshold]
    objective = _Objective(config, dataset, make_stream(config.seed, PAIRING_STREAM))
    objective.relabel(threshold)

    target = optimal_policy(ref, env, config.tgo.beta) if isinstance(env, TabularEnv) else None
    policy = initial_policy.copy()
    reward_curve = [env.mean_reward(policy)]
    kl_ref_curve = [_kl(policy, ref, env)]
    kl_opt_curve = [_kl(policy, target, env)] if target is not None else []
    loss_curve: List[float] = []

    logger.info(
        f"Training {config.objective} on {len(dataset)} records, tau={threshold.value:.6f}, "
        f"{config.epochs} epochs"
    )
    velocity = np.zeros_like(policy.params)
    mu = config.momentum if config.optimizer == "sgd_momentum" else 0.0
    step_epochs: List[int] = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_stream.permutation(objective.size())
        for start in range(0, len(order), config.batch_size):
            breakdown = objective.evaluate(policy, ref, threshold, order[start:start + config.batch_size])
            if not np.isfinite(breakdown.total) or not np.all(np.isfinite(breakdown.gradient)):
                raise NonFiniteLossError(len(loss_curve), breakdown.total)
            velocity = mu * velocity + breakdown.gradient
            policy = policy.with_params(policy.params - config.learning_rate * velocity)
            loss_curve.append(breakdown.total)
            step_epochs.append(epoch)

        reward_curve.append(env.mean_reward(policy))
        kl_ref_curve.append(_kl(policy, ref, env))
        if target is not None:
            kl_opt_curve.append(_kl(policy, target, env))
        logger.debug(
            f"[epoch {epoch}/{config.epochs}] loss={loss_curve[-1]:.6f} "
            f"reward={reward_curve[-1]:.6f} kl_ref={kl_ref_curve[-1]:.6f}"
        )

        if config.refresh_reference and epoch < config.epochs:
            ref = policy.copy()
            # dataset scores are fixed, so only a proxy threshold can move with the reference
            if config.reestimate_threshold_on_refresh and config.threshold_source == "proxy":
                threshold = _estimate(config, env, ref, dataset, score_model, proxy_stream)
                history.append(threshold)
                objective.relabel(threshold)

    logger.info(
        f"✓ Finished {len(loss_curve)} steps: reward {reward_curve[0]:.6f} -> {reward_curve[-1]:.6f}"
    )
    return TrainReport(
        loss_curve=loss_curve,
        mean_reward_curve=reward_curve,
        kl_to_ref_curve=kl_ref_curve,
        kl_to_optimal_curve=kl_opt_curve,
        final_policy=policy,
        threshold_history=history,
        dataset=dataset,
        step_epochs=step_epochs,
    )
