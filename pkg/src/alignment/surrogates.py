"""Surrogate-likelihood policies for continuous and masked-token outcomes.

Both classes follow the same likelihood-model protocol as ``TabularPolicy`` so the
objectives and the trainer never need to know which kind of model they are fitting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import log_softmax, softmax


@dataclass(frozen=True, eq=False)
class GaussianPolicy:
    """Per-prompt prediction vectors scored by the scaled negative MSE surrogate.

    log pi(y|x) ~ -MSE(y, prediction[x]) / T, i.e. an isotropic Gaussian with
    variance T * dim / 2 up to an additive constant.
    """

    predictions: np.ndarray
    temperature: float

    def __post_init__(self) -> None:
        predictions = np.array(self.predictions, dtype=float)
        if predictions.ndim != 2:
            raise ValueError(f"Predictions must be a prompt x dim matrix, got shape {predictions.shape}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        object.__setattr__(self, "predictions", predictions)

    @property
    def dim(self) -> int:
        return self.predictions.shape[1]

    @property
    def params(self) -> np.ndarray:
        return self.predictions

    def with_params(self, params: np.ndarray) -> "GaussianPolicy":
        return GaussianPolicy(np.asarray(params).reshape(self.predictions.shape), self.temperature)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.predictions, self.temperature)

    def log_prob_batch(self, prompts: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        residual = np.asarray(outcomes, dtype=float) - self.predictions[np.asarray(prompts, dtype=int)]
        return -np.mean(residual**2, axis=1) / self.temperature

    def gradient(
        self, prompts: np.ndarray, outcomes: np.ndarray, coefficients: np.ndarray
    ) -> np.ndarray:
        prompts = np.asarray(prompts, dtype=int)
        residual = np.asarray(outcomes, dtype=float) - self.predictions[prompts]
        scale = 2.0 / (self.temperature * self.dim)
        rows = scale * np.asarray(coefficients, dtype=float)[:, None] * residual
        grad = np.zeros_like(self.predictions)
        np.add.at(grad, prompts, rows)
        return grad

    def kl_divergence(self, other: "GaussianPolicy", weights: np.ndarray) -> float:
        """Prompt-weighted KL between the implied equal-variance Gaussians."""
        per_prompt = np.sum((self.predictions - other.predictions) ** 2, axis=1)
        return float(np.dot(weights, per_prompt) / (self.temperature * self.dim))


@dataclass(frozen=True, eq=False)
class MaskedTokenPolicy:
    """Per-prompt, per-position token logits; only masked positions carry likelihood."""

    logits: np.ndarray
    mask: Tuple[int, ...]

    def __post_init__(self) -> None:
        logits = np.array(self.logits, dtype=float)
        if logits.ndim != 3:
            raise ValueError(f"Token logits must be prompt x position x vocab, got shape {logits.shape}")
        mask = tuple(sorted(set(int(m) for m in self.mask)))
        if not mask:
            raise ValueError("Mask must contain at least one position")
        if mask[0] < 0 or mask[-1] >= logits.shape[1]:
            raise ValueError(f"Mask positions {mask} fall outside sequence length {logits.shape[1]}")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "mask", mask)

    @property
    def params(self) -> np.ndarray:
        return self.logits

    def with_params(self, params: np.ndarray) -> "MaskedTokenPolicy":
        return MaskedTokenPolicy(np.asarray(params).reshape(self.logits.shape), self.mask)

    def copy(self) -> "MaskedTokenPolicy":
        return MaskedTokenPolicy(self.logits, self.mask)

    def token_probs(self) -> np.ndarray:
        return softmax(self.logits, axis=2)

    def log_prob_batch(self, prompts: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        prompts = np.asarray(prompts, dtype=int)
        tokens = np.asarray(outcomes, dtype=int)[:, self.mask]
        positions = np.array(self.mask)
        log_probs = log_softmax(self.logits, axis=2)
        picked = log_probs[prompts[:, None], positions[None, :], tokens]
        return picked.mean(axis=1)

    def gradient(
        self, prompts: np.ndarray, outcomes: np.ndarray, coefficients: np.ndarray
    ) -> np.ndarray:
        prompts = np.asarray(prompts, dtype=int)
        tokens = np.asarray(outcomes, dtype=int)[:, self.mask]
        positions = np.array(self.mask)
        scaled = np.asarray(coefficients, dtype=float) / len(self.mask)

        probs = self.token_probs()[prompts[:, None], positions[None, :]]
        contributions = -scaled[:, None, None] * probs
        n, width = tokens.shape
        contributions[np.arange(n)[:, None], np.arange(width)[None, :], tokens] += scaled[:, None]

        grad = np.zeros_like(self.logits)
        np.add.at(grad, (prompts[:, None], positions[None, :]), contributions)
        return grad

    def kl_divergence(self, other: "MaskedTokenPolicy", weights: np.ndarray) -> float:
        """Prompt-weighted KL of the factorized masked-token distributions."""
        positions = list(self.mask)
        log_p = log_softmax(self.logits[:, positions], axis=2)
        log_q = log_softmax(other.logits[:, positions], axis=2)
        per_prompt = np.sum(np.exp(log_p) * (log_p - log_q), axis=(1, 2))
        return max(float(np.dot(weights, per_prompt)), 0.0)
