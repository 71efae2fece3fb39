"""Synthetic alignment environments and offline dataset sampling.

Three environment kinds share one reward pipeline: every outcome maps to a scalar reward
that the feedback layer later observes through a noisy monotone score.

- ``TabularEnv``: finite prompt and outcome sets, where the partition function is exact.
- ``GaussianSurrogateEnv``: outcomes are vectors, reward is the negative squared distance
  to a per-prompt target.
- ``MaskedTokenEnv``: outcomes are token sequences, reward is the accuracy on the masked
  positions.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.alignment.policy import TabularPolicy
from src.alignment.surrogates import GaussianPolicy, MaskedTokenPolicy

logger = logging.getLogger(__name__)

BIMODAL_CENTER = 1.5
BIMODAL_SPREAD = 0.25
REF_LOGIT_SCALE = 0.5

_CONSTANT_PATTERN = re.compile(r"^constant\(\s*([-+0-9.eE]+)\s*\)$")


def make_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent random stream derived from a seed and optional integer keys.

    Replicate ``i`` of a run seeded with ``seed`` uses ``make_stream(seed, i)``; the seed
    sequence mixes the integers so streams never overlap and results do not depend on
    which worker computed them.
    """
    if seed < 0 or any(key < 0 for key in keys):
        raise ValueError(f"Seeds and stream keys must be non-negative, got {seed}, {keys}")
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


@dataclass(frozen=True)
class RewardSpec:
    """How ``make_tabular`` fills the reward table."""

    kind: str
    value: float = 0.0

    KINDS = ("uniform_random", "bimodal", "constant")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"Unknown reward spec '{self.kind}', expected one of {self.KINDS}")

    @classmethod
    def parse(cls, text: str) -> "RewardSpec":
        text = text.strip()
        match = _CONSTANT_PATTERN.match(text)
        if match:
            return cls("constant", float(match.group(1)))
        return cls(text)

    def __str__(self) -> str:
        return f"constant({self.value!r})" if self.kind == "constant" else self.kind


def _uniform_weights(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k)


def _check_weights(weights: np.ndarray, k: int) -> None:
    if weights.shape != (k,):
        raise ValueError(f"prompt_weights must have length {k}, got shape {weights.shape}")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError("prompt_weights must be non-negative and sum to 1")


@dataclass(frozen=True, eq=False)
class TabularEnv:
    """Finite prompt/outcome world with a reward table and reference logits."""

    rewards: np.ndarray
    ref_logits: np.ndarray
    prompt_weights: np.ndarray

    kind = "tabular"

    def __post_init__(self) -> None:
        rewards = np.array(self.rewards, dtype=float)
        ref_logits = np.array(self.ref_logits, dtype=float)
        weights = np.array(self.prompt_weights, dtype=float)
        if rewards.ndim != 2 or rewards.shape != ref_logits.shape:
            raise ValueError(
                f"rewards {rewards.shape} and ref_logits {ref_logits.shape} must share a K x M shape"
            )
        if not (np.all(np.isfinite(rewards)) and np.all(np.isfinite(ref_logits))):
            raise ValueError("Environment entries must be finite")
        _check_weights(weights, rewards.shape[0])
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "ref_logits", ref_logits)
        object.__setattr__(self, "prompt_weights", weights)

    @property
    def num_prompts(self) -> int:
        return self.rewards.shape[0]

    @property
    def num_outcomes(self) -> int:
        return self.rewards.shape[1]

    def reference_policy(self) -> TabularPolicy:
        return TabularPolicy(self.ref_logits)

    def check_policy(self, policy: Any) -> None:
        if not isinstance(policy, TabularPolicy) or policy.logits.shape != self.rewards.shape:
            raise ValueError(f"Policy does not match tabular environment of shape {self.rewards.shape}")

    def reward(self, prompts: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        return self.rewards[np.asarray(prompts, dtype=int), np.asarray(outcomes, dtype=int)]

    def sample_outcomes(
        self, policy: TabularPolicy, prompts: np.ndarray, stream: np.random.Generator
    ) -> np.ndarray:
        cdf = np.cumsum(policy.probs()[prompts], axis=1)
        draws = stream.random(len(prompts))
        outcomes = (draws[:, None] >= cdf).sum(axis=1)
        return np.minimum(outcomes, self.num_outcomes - 1)

    def mean_reward(self, policy: TabularPolicy) -> float:
        """Exact expected reward sum_x w_x sum_y pi(y|x) R(x, y)."""
        per_prompt = np.sum(policy.probs() * self.rewards, axis=1)
        return float(np.dot(self.prompt_weights, per_prompt))


@dataclass(frozen=True, eq=False)
class GaussianSurrogateEnv:
    """Vector outcomes scored by distance to a per-prompt target."""

    targets: np.ndarray
    ref_predictions: np.ndarray
    temperature: float
    noise_scale: float
    prompt_weights: np.ndarray

    kind = "gaussian"

    def __post_init__(self) -> None:
        targets = np.array(self.targets, dtype=float)
        ref_predictions = np.array(self.ref_predictions, dtype=float)
        weights = np.array(self.prompt_weights, dtype=float)
        if targets.ndim != 2 or targets.shape[1] < 1:
            raise ValueError(f"targets must be a prompt x dim matrix with dim >= 1, got {targets.shape}")
        if ref_predictions.shape != targets.shape:
            raise ValueError("ref_predictions must match the shape of targets")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be non-negative, got {self.noise_scale}")
        _check_weights(weights, targets.shape[0])
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "ref_predictions", ref_predictions)
        object.__setattr__(self, "prompt_weights", weights)

    @property
    def num_prompts(self) -> int:
        return self.targets.shape[0]

    @property
    def dim(self) -> int:
        return self.targets.shape[1]

    def reference_policy(self) -> GaussianPolicy:
        return GaussianPolicy(self.ref_predictions, self.temperature)

    def check_policy(self, policy: Any) -> None:
        if not isinstance(policy, GaussianPolicy) or policy.predictions.shape != self.targets.shape:
            raise ValueError(f"Policy does not match Gaussian environment of shape {self.targets.shape}")

    def reward(self, prompts: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        residual = np.asarray(outcomes, dtype=float) - self.targets[np.asarray(prompts, dtype=int)]
        return -np.mean(residual**2, axis=1)

    def sample_outcomes(
        self, policy: GaussianPolicy, prompts: np.ndarray, stream: np.random.Generator
    ) -> np.ndarray:
        noise = stream.standard_normal((len(prompts), self.dim))
        return policy.predictions[prompts] + self.noise_scale * noise

    def mean_reward(self, policy: GaussianPolicy) -> float:
        """E[-||y - t||^2 / dim] for y ~ N(prediction, noise_scale^2 I)."""
        gap = np.mean((policy.predictions - self.targets) ** 2, axis=1)
        return float(np.dot(self.prompt_weights, -gap) - self.noise_scale**2)


@dataclass(frozen=True, eq=False)
class MaskedTokenEnv:
    """Token sequences where only masked positions are generated and rewarded."""

    vocab_size: int
    seq_len: int
    mask_set: Tuple[int, ...]
    true_tokens: np.ndarray
    ref_logits: np.ndarray
    prompt_weights: np.ndarray

    kind = "masked"

    def __post_init__(self) -> None:
        mask = tuple(sorted(set(int(m) for m in self.mask_set)))
        true_tokens = np.array(self.true_tokens, dtype=int)
        ref_logits = np.array(self.ref_logits, dtype=float)
        weights = np.array(self.prompt_weights, dtype=float)
        if not mask:
            raise ValueError("mask_set must be non-empty")
        if mask[0] < 0 or mask[-1] >= self.seq_len:
            raise ValueError(f"mask_set {mask} must lie within [0, {self.seq_len})")
        if true_tokens.ndim != 2 or true_tokens.shape[1] != self.seq_len:
            raise ValueError(f"true_tokens must be prompt x {self.seq_len}, got {true_tokens.shape}")
        if np.any(true_tokens < 0) or np.any(true_tokens >= self.vocab_size):
            raise ValueError(f"Token indices must lie in [0, {self.vocab_size})")
        expected = (true_tokens.shape[0], self.seq_len, self.vocab_size)
        if ref_logits.shape != expected:
            raise ValueError(f"ref_logits must have shape {expected}, got {ref_logits.shape}")
        _check_weights(weights, true_tokens.shape[0])
        object.__setattr__(self, "mask_set", mask)
        object.__setattr__(self, "true_tokens", true_tokens)
        object.__setattr__(self, "ref_logits", ref_logits)
        object.__setattr__(self, "prompt_weights", weights)

    @property
    def num_prompts(self) -> int:
        return self.true_tokens.shape[0]

    def reference_policy(self) -> MaskedTokenPolicy:
        return MaskedTokenPolicy(self.ref_logits, self.mask_set)

    def check_policy(self, policy: Any) -> None:
        if (
            not isinstance(policy, MaskedTokenPolicy)
            or policy.logits.shape != self.ref_logits.shape
            or policy.mask != self.mask_set
        ):
            raise ValueError("Policy does not match masked-token environment")

    def reward(self, prompts: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        positions = list(self.mask_set)
        truth = self.true_tokens[np.asarray(prompts, dtype=int)][:, positions]
        return np.mean(np.asarray(outcomes, dtype=int)[:, positions] == truth, axis=1)

    def sample_outcomes(
        self, policy: MaskedTokenPolicy, prompts: np.ndarray, stream: np.random.Generator
    ) -> np.ndarray:
        positions = np.array(self.mask_set)
        tokens = self.true_tokens[prompts].copy()
        cdf = np.cumsum(policy.token_probs()[prompts[:, None], positions[None, :]], axis=2)
        draws = stream.random((len(prompts), len(positions)))
        sampled = (draws[:, :, None] >= cdf).sum(axis=2)
        tokens[:, positions] = np.minimum(sampled, self.vocab_size - 1)
        return tokens

    def mean_reward(self, policy: MaskedTokenPolicy) -> float:
        """Expected masked-token accuracy, mean over positions of p(true token)."""
        positions = np.array(self.mask_set)
        probs = policy.token_probs()[:, positions]
        truth = self.true_tokens[:, positions]
        hit = np.take_along_axis(probs, truth[:, :, None], axis=2)[:, :, 0]
        return float(np.dot(self.prompt_weights, hit.mean(axis=1)))


Environment = Union[TabularEnv, GaussianSurrogateEnv, MaskedTokenEnv]


@dataclass(frozen=True)
class SampleRecord:
    """One sampled (prompt, outcome) with its latent reward; the reward is never trained on."""

    prompt_id: int
    outcome: Any
    reward: float
    rng_tag: str


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Column-oriented batch of sample records."""

    prompts: np.ndarray
    outcomes: np.ndarray
    rewards: np.ndarray
    rng_tag: str = ""

    def __len__(self) -> int:
        return len(self.prompts)

    def records(self) -> List[SampleRecord]:
        return [
            SampleRecord(int(x), self.outcomes[i], float(self.rewards[i]), self.rng_tag)
            for i, x in enumerate(self.prompts)
        ]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'prompt_id': self.prompts,
            'outcome': list(self.outcomes) if self.outcomes.ndim > 1 else self.outcomes,
            'reward': self.rewards,
            'rng_tag': self.rng_tag,
        })


def sample_dataset(
    env: Environment,
    policy: Any,
    n: int,
    stream: np.random.Generator,
    rng_tag: str = "",
) -> SampleSet:
    """Draw ``n`` offline samples: prompts from the prompt weights, outcomes from ``policy``."""
    env.check_policy(policy)
    if n < 0:
        raise ValueError(f"Sample count must be non-negative, got {n}")
    prompts = stream.choice(env.num_prompts, size=n, p=env.prompt_weights).astype(int)
    outcomes = env.sample_outcomes(policy, prompts, stream)
    rewards = env.reward(prompts, outcomes)
    return SampleSet(prompts, outcomes, rewards, rng_tag)


def make_tabular(
    seed: int,
    k: int,
    m: int,
    reward_spec: Union[RewardSpec, str] = "uniform_random",
    prompt_weights: Optional[Sequence[float]] = None,
) -> TabularEnv:
    """Build a random tabular environment, deterministic in ``seed``.

    Reference logits are zero-mean Gaussian; rewards follow ``reward_spec``:
    ``uniform_random`` draws U(0, 1); ``bimodal`` draws from N(+1.5, 0.25^2) and N(-1.5, 0.25^2)
    with component membership balanced per row (a random half of each row, rounded up, comes
    from the high mode) so every prompt has clear positives and clear negatives;
    ``constant(v)`` fills every entry with v.
    """
    if k < 1:
        raise ValueError(f"Need at least one prompt, got k={k}")
    if m < 2:
        raise ValueError(
            f"Need at least two outcomes per prompt (m={m}): the policy-ratio monotonicity "
            "property requires an alternative response"
        )
    spec = RewardSpec.parse(reward_spec) if isinstance(reward_spec, str) else reward_spec
    stream = make_stream(seed)

    ref_logits = REF_LOGIT_SCALE * stream.standard_normal((k, m))
    if spec.kind == "uniform_random":
        rewards = stream.uniform(0.0, 1.0, size=(k, m))
    elif spec.kind == "bimodal":
        high = np.array([stream.permutation(m) < (m + 1) // 2 for _ in range(k)])
        signs = np.where(high, 1.0, -1.0)
        rewards = signs * BIMODAL_CENTER + BIMODAL_SPREAD * stream.standard_normal((k, m))
    else:
        rewards = np.full((k, m), spec.value)

    weights = _uniform_weights(k) if prompt_weights is None else np.asarray(prompt_weights, dtype=float)
    return TabularEnv(rewards=rewards, ref_logits=ref_logits, prompt_weights=weights)


def make_gaussian(
    seed: int,
    k: int,
    dim: int,
    temperature: float = 0.001,
    noise_scale: float = 0.05,
    ref_offset: float = 0.3,
) -> GaussianSurrogateEnv:
    """Targets ~ N(0, I); the reference predictions sit ``ref_offset`` away on average."""
    if k < 1 or dim < 1:
        raise ValueError(f"Need k >= 1 and dim >= 1, got k={k}, dim={dim}")
    stream = make_stream(seed)
    targets = stream.standard_normal((k, dim))
    ref_predictions = targets + ref_offset * stream.standard_normal((k, dim))
    return GaussianSurrogateEnv(
        targets=targets,
        ref_predictions=ref_predictions,
        temperature=temperature,
        noise_scale=noise_scale,
        prompt_weights=_uniform_weights(k),
    )


def make_masked(
    seed: int,
    k: int,
    vocab_size: int,
    seq_len: int,
    mask_fraction: float = 0.5,
) -> MaskedTokenEnv:
    """Random true sequences with a random mask covering ``mask_fraction`` of positions."""
    if k < 1 or vocab_size < 2 or seq_len < 1:
        raise ValueError(f"Need k >= 1, vocab_size >= 2, seq_len >= 1; got {k}, {vocab_size}, {seq_len}")
    stream = make_stream(seed)
    true_tokens = stream.integers(0, vocab_size, size=(k, seq_len))
    mask_size = max(1, math.ceil(mask_fraction * seq_len))
    mask = tuple(sorted(int(i) for i in stream.permutation(seq_len)[:mask_size]))
    ref_logits = REF_LOGIT_SCALE * stream.standard_normal((k, seq_len, vocab_size))
    return MaskedTokenEnv(
        vocab_size=vocab_size,
        seq_len=seq_len,
        mask_set=mask,
        true_tokens=true_tokens,
        ref_logits=ref_logits,
        prompt_weights=_uniform_weights(k),
    )


def bimodal_suite(count: int = 10, k: int = 3, m: int = 4, base_seed: int = 100) -> List[TabularEnv]:
    """The shipped bimodal suite used by the training-efficacy checks."""
    return [make_tabular(base_seed + i, k, m, "bimodal") for i in range(count)]


def reference_env() -> TabularEnv:
    """Small fixed bimodal environment for the estimator experiments.

    Two prompts, three outcomes, uniform reference. Rewards sit in two modes around +1 and
    -1 so that each row mixes pseudo-positives and a pseudo-negative at the median.
    """
    rewards = np.array([
        [1.1, 0.9, -1.0],
        [1.0, 0.8, -1.1],
    ])
    return TabularEnv(rewards=rewards, ref_logits=np.zeros_like(rewards), prompt_weights=_uniform_weights(2))


def shared_baseline_env() -> TabularEnv:
    """Two prompts whose reward rows are permutations of each other under a uniform reference.

    Every prompt then has the same oracle baseline for any beta, so a single global
    threshold can reproduce the oracle labels exactly.
    """
    rewards = np.array([
        [0.9, 0.1, 0.5, 0.3],
        [0.3, 0.5, 0.9, 0.1],
    ])
    return TabularEnv(rewards=rewards, ref_logits=np.zeros_like(rewards), prompt_weights=_uniform_weights(2))
