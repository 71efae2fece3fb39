"""Threshold-guided loss plus the DPO and SFT baselines, all with analytic gradients.

Every loss is expressed through the implicit policy score
``s_hat = beta * (log pi_theta(y|x) - log pi_ref(y|x))``. Gradients are taken with respect
to the trainable policy's parameters through its ``gradient`` method, so the same code
serves tabular logits, Gaussian prediction vectors and masked-token logits.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Any, Callable, Tuple

import numpy as np
from scipy.special import expit

from src.data.feedback import (
    PERCENTILE_METHODS,
    ScoredDataset,
    Threshold,
    confidence_weight,
    pseudo_label,
)

logger = logging.getLogger(__name__)

NUMERIC_MODES = ("exact_logsigmoid", "clipped_sigmoid")

_CLIPPED_PATTERN = re.compile(r"^clipped_sigmoid\(\s*([-+0-9.eE]+)\s*\)$")


@dataclass(frozen=True)
class TGOConfig:
    """Hyperparameters of the threshold-guided loss.

    ``numeric_mode`` also accepts ``clipped_sigmoid(eps)``, which sets ``clip_eps``.
    """

    beta: float = 1.0
    c: float = 5.0
    percentile: float = 0.5
    numeric_mode: str = "exact_logsigmoid"
    clip_eps: float = 1e-12
    percentile_method: str = "linear_interpolation"

    def __post_init__(self) -> None:
        match = _CLIPPED_PATTERN.match(self.numeric_mode.strip())
        if match:
            object.__setattr__(self, "numeric_mode", "clipped_sigmoid")
            object.__setattr__(self, "clip_eps", float(match.group(1)))
        if self.numeric_mode not in NUMERIC_MODES:
            raise ValueError(f"Unknown numeric_mode '{self.numeric_mode}', expected one of {NUMERIC_MODES}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.c < 0:
            raise ValueError(f"Confidence scale c must be non-negative, got {self.c}")
        if not 0 < self.percentile < 1:
            raise ValueError(f"percentile must lie strictly between 0 and 1, got {self.percentile}")
        if not self.clip_eps > 0:
            raise ValueError(f"clip_eps must be positive, got {self.clip_eps}")
        if self.percentile_method not in PERCENTILE_METHODS:
            raise ValueError(f"Unknown percentile method '{self.percentile_method}'")


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    """Batch-mean loss, per-sample terms, implicit scores and the analytic gradient."""

    total: float
    per_sample: np.ndarray
    implicit_scores: np.ndarray
    gradient: np.ndarray


@dataclass(frozen=True, eq=False)
class PreferencePairs:
    """Winner/loser outcomes sharing a prompt."""

    prompts: np.ndarray
    winners: np.ndarray
    losers: np.ndarray

    def __len__(self) -> int:
        return len(self.prompts)


def implicit_policy_score(theta_logp: Any, ref_logp: Any, beta: float) -> Any:
    """s_hat = beta * (log pi_theta - log pi_ref) for a single sample or an array."""
    score = beta * (np.asarray(theta_logp, dtype=float) - np.asarray(ref_logp, dtype=float))
    return float(score) if score.ndim == 0 else score


def logistic_terms(
    implicit_scores: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    numeric_mode: str = "exact_logsigmoid",
    clip_eps: float = 1e-12,
) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted logistic losses and their derivatives with respect to the implicit score.

    Exact mode uses -log sigma(z) = softplus(-z) and -log(1 - sigma(z)) = softplus(z).
    Clipped mode evaluates log(sigma + eps) and log1p(-sigma + eps) literally, which
    deviates from exact mode by about eps / q once the probability q inside a log is tiny.
    """
    z = np.asarray(implicit_scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    weights = np.asarray(weights, dtype=float)
    sig = expit(z)

    if numeric_mode == "exact_logsigmoid":
        losses = np.where(labels == 1, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
        slopes = sig - labels
    elif numeric_mode == "clipped_sigmoid":
        curvature = sig * (1.0 - sig)
        losses = -(labels * np.log(sig + clip_eps) + (1 - labels) * np.log1p(-sig + clip_eps))
        slopes = np.where(
            labels == 1, -curvature / (sig + clip_eps), curvature / (1.0 - sig + clip_eps)
        )
    else:
        raise ValueError(f"Unknown numeric_mode '{numeric_mode}'")
    return weights * losses, weights * slopes


def tgo_loss(
    policy: Any,
    ref: Any,
    batch: ScoredDataset,
    threshold: Threshold,
    config: TGOConfig,
) -> LossBreakdown:
    """Confidence-weighted logistic loss on pseudo-labels, averaged over the batch.

    Scores enter only through s - tau. The threshold must be on the same scale as the batch
    scores; a threshold estimated from a different score model is not detectable here.
    """
    if len(batch) == 0:
        raise ValueError("Cannot evaluate the loss on an empty batch")
    return tgo_loss_relative(
        policy, ref, batch.prompts, batch.outcomes, batch.scores - threshold.value, config
    )


def tgo_loss_relative(
    policy: Any,
    ref: Any,
    prompts: np.ndarray,
    outcomes: np.ndarray,
    relative_scores: np.ndarray,
    config: TGOConfig,
) -> LossBreakdown:
    """TGO loss on precomputed relative scores s - tau.

    Labels are 1[s - tau >= 0] and weights 1 + c * |s - tau|; the threshold itself never
    enters. ``tgo_loss`` is this function with ``relative_scores = batch.scores - tau``.
    """
    relative_scores = np.asarray(relative_scores, dtype=float)
    if relative_scores.size == 0:
        raise ValueError("Cannot evaluate the loss on an empty batch")
    if not len(prompts) == len(outcomes) == len(relative_scores):
        raise ValueError("prompts, outcomes and relative_scores must have equal length")
    theta_logp = policy.log_prob_batch(prompts, outcomes)
    ref_logp = ref.log_prob_batch(prompts, outcomes)
    implicit = implicit_policy_score(theta_logp, ref_logp, config.beta)
    labels = pseudo_label(relative_scores, 0.0)
    weights = confidence_weight(relative_scores, 0.0, config.c)

    per_sample, slopes = logistic_terms(implicit, labels, weights, config.numeric_mode, config.clip_eps)
    coefficients = slopes * config.beta / len(relative_scores)
    gradient = policy.gradient(prompts, outcomes, coefficients)
    return LossBreakdown(float(np.mean(per_sample)), per_sample, implicit, gradient)


def dpo_loss(policy: Any, ref: Any, pairs: PreferencePairs, beta: float) -> LossBreakdown:
    """-mean log sigma(beta * [delta_w - delta_l]) with delta = log pi_theta - log pi_ref.

    ``implicit_scores`` holds the per-pair margins.
    """
    if len(pairs) == 0:
        raise ValueError("Cannot evaluate the loss on an empty pair list")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    same = np.asarray(pairs.winners) == np.asarray(pairs.losers)
    if same.ndim > 1:
        same = same.all(axis=tuple(range(1, same.ndim)))
    if np.any(same):
        raise ValueError(f"{int(same.sum())} pair(s) have identical winner and loser outcomes")

    def delta(outcomes: np.ndarray) -> np.ndarray:
        return policy.log_prob_batch(pairs.prompts, outcomes) - ref.log_prob_batch(pairs.prompts, outcomes)

    delta_w, delta_l = delta(pairs.winners), delta(pairs.losers)
    margins = beta * (delta_w - delta_l)

    per_sample = np.logaddexp(0.0, -margins)
    coefficients = (expit(margins) - 1.0) * beta / len(pairs)
    gradient = policy.gradient(pairs.prompts, pairs.winners, coefficients)
    gradient = gradient + policy.gradient(pairs.prompts, pairs.losers, -coefficients)
    return LossBreakdown(float(np.mean(per_sample)), per_sample, margins, gradient)


def sft_loss(policy: Any, prompts: np.ndarray, outcomes: np.ndarray) -> LossBreakdown:
    """Negative mean log-likelihood of the given (prompt, outcome) pairs."""
    if len(prompts) == 0:
        raise ValueError("Cannot evaluate the SFT loss on an empty sample list")
    log_probs = policy.log_prob_batch(prompts, outcomes)
    coefficients = np.full(len(prompts), -1.0 / len(prompts))
    gradient = policy.gradient(prompts, outcomes, coefficients)
    return LossBreakdown(float(-np.mean(log_probs)), -log_probs, log_probs, gradient)


def finite_difference_gradient(loss: Callable[[np.ndarray], float], params: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of ``loss`` at ``params``, one coordinate at a time."""
    params = np.asarray(params, dtype=float)
    flat = params.ravel()
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        step = np.zeros_like(flat)
        step[j] = h
        f_plus = loss((flat + step).reshape(params.shape))
        f_minus = loss((flat - step).reshape(params.shape))
        grad[j] = (f_plus - f_minus) / (2 * h)
    return grad.reshape(params.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """max |a - n| / max(|a|, |n|, floor) over coordinates where |a| or |n| exceeds floor.

    Coordinates at or below ``floor`` in both gradients are skipped; 0 if none remain.
    """
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    keep = (np.abs(analytic) > floor) | (np.abs(numeric) > floor)
    if not np.any(keep):
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic[keep]), np.abs(numeric[keep])), floor)
    return float(np.max(np.abs(analytic[keep] - numeric[keep]) / scale))


def gradient_check(
    breakdown_fn: Callable[[Any], LossBreakdown], policy: Any, h: float = 1e-6, floor: float = 1e-12
) -> float:
    """Max relative error between ``breakdown_fn(policy).gradient`` and central differences."""
    if not 1e-8 <= h <= 1e-3:
        raise ValueError(f"Step h must lie in [1e-8, 1e-3], got {h}")
    analytic = breakdown_fn(policy).gradient
    numeric = finite_difference_gradient(
        lambda params: breakdown_fn(policy.with_params(params)).total, policy.params, h
    )
    return max_relative_error(analytic, numeric, floor)


def tgo_gradient_check(
    policy: Any,
    ref: Any,
    batch: ScoredDataset,
    threshold: Threshold,
    config: TGOConfig,
    h: float = 1e-6,
    floor: float = 1e-12,
) -> float:
    """Finite-difference audit of ``tgo_loss``'s analytic gradient."""
    return gradient_check(lambda p: tgo_loss(p, ref, batch, threshold, config), policy, h, floor)
