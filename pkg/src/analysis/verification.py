"""Property and statistical-rate checks run by ``tgo-lab verify``.

Each ``check_*`` function takes a seed and returns ``(passed, detail)``. ``run_suite``
times them, turns exceptions into failures and reports skipped checks as skipped, never as
passed.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np
import pandas as pd

from src.alignment.objective import (
    PreferencePairs,
    TGOConfig,
    dpo_loss,
    gradient_check,
    logistic_terms,
    sft_loss,
    tgo_loss,
)
from src.alignment.policy import TabularPolicy, optimal_policy, oracle_report
from src.alignment.trainer import TrainConfig, run_offline
from src.analysis.experiments import (
    ExperimentConfig,
    bias_experiment,
    calibration_experiment,
    consistency_experiment,
    population_minimizer,
    run_replicates,
    threshold_sensitivity,
)
from src.config import ScoreConfig
from src.data.environments import (
    TabularEnv,
    bimodal_suite,
    make_stream,
    make_tabular,
    reference_env,
    shared_baseline_env,
)
from src.data.feedback import ScoredDataset, Threshold, estimate_threshold

logger = logging.getLogger(__name__)

LEVELS = ("fast", "full")
RANDOM_ENVS = 100
MONOTONICITY_GRID = 20
GRADIENT_BATCHES = 50
# Gradient coordinates below this magnitude in both gradients are left out of the comparison.
GRADIENT_FLOOR = 1e-3
SWEEP_PERCENTILES = (0.1, 0.3, 0.5, 0.7, 0.9)
WEIGHT_SCALES = (0.0, 1.0, 5.0, 20.0)
CALIBRATION_REPLICATES = 50

CheckOutcome = Tuple[bool, str]


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: str
    detail: str
    seconds: float

    @property
    def passed(self) -> bool:
        return self.status == "passed"


def _random_envs(seed: int, count: int = RANDOM_ENVS) -> List[Tuple[TabularEnv, float]]:
    """Random tabular environments (K <= 5, M <= 8) paired with a random beta."""
    stream = make_stream(seed, 901)
    envs = []
    for i in range(count):
        k = int(stream.integers(1, 6))
        m = int(stream.integers(2, 9))
        env = make_tabular(seed * 1000 + i, k, m, "uniform_random")
        envs.append((env, float(stream.uniform(0.1, 5.0))))
    return envs


@functools.lru_cache(maxsize=None)
def _reference_minimizer() -> TabularPolicy:
    """theta* of the reference environment, shared by the consistency and bias checks."""
    env = reference_env()
    config = ExperimentConfig()
    return population_minimizer(env, env.reference_policy(), config.score_model(), config.tgo, config.ridge)


# ---------------------------------------------------------------------------
# Exact identities
# ---------------------------------------------------------------------------

def check_monotonicity(seed: int = 0) -> CheckOutcome:
    """pi*/pi_ref at a swept outcome rises strictly with its reward.

    The sweep spans +-3 beta around the mean of the row's other rewards, so pi* stays out of
    saturation even at small beta.
    """
    stream = make_stream(seed, 902)
    offsets = np.linspace(-3.0, 3.0, MONOTONICITY_GRID)
    worst = math.inf
    for env, beta in _random_envs(seed):
        x = int(stream.integers(env.num_prompts))
        y = int(stream.integers(env.num_outcomes))
        others = np.delete(env.rewards[x], y)
        grid = beta * offsets + float(np.mean(others))
        ratios = []
        for value in grid:
            rewards = env.rewards.copy()
            rewards[x, y] = value
            swept = dataclasses.replace(env, rewards=rewards)
            ref = swept.reference_policy()
            target = optimal_policy(ref, swept, beta)
            ratios.append(math.exp(target.log_probs()[x, y] - ref.log_probs()[x, y]))
        worst = min(worst, float(np.min(np.diff(ratios))))
    return worst >= 1e-12, f"smallest consecutive ratio increase {worst:.3e}"


def check_decision_rule(seed: int = 0) -> CheckOutcome:
    """sign(log pi* - log pi_ref) = sign(R - tau*) away from ties."""
    violations = 0
    cells = 0
    for env, beta in _random_envs(seed):
        ref = env.reference_policy()
        margin = optimal_policy(ref, env, beta).log_probs() - ref.log_probs()
        gap = env.rewards - oracle_report(ref, env, beta).baseline[:, None]
        decided = np.abs(gap) > 1e-10
        violations += int(np.sum(np.sign(margin[decided]) != np.sign(gap[decided])))
        cells += int(decided.sum())
    return violations == 0, f"{violations} violations over {cells} cells"


def check_reparameterization(seed: int = 0) -> CheckOutcome:
    """R = beta * log(pi*/pi_ref) + tau* on every cell."""
    worst = 0.0
    for env, beta in _random_envs(seed):
        ref = env.reference_policy()
        log_ratio = optimal_policy(ref, env, beta).log_probs() - ref.log_probs()
        rebuilt = beta * log_ratio + oracle_report(ref, env, beta).baseline[:, None]
        worst = max(worst, float(np.max(np.abs(rebuilt - env.rewards))))
    return worst <= 1e-10, f"max reconstruction error {worst:.3e}"


def check_dpo_cancellation(seed: int = 0, pairs: int = 10_000) -> CheckOutcome:
    """Pairwise reward differences recovered from pi*/pi_ref, with tau* cancelling."""
    stream = make_stream(seed, 903)
    envs = _random_envs(seed)
    worst = 0.0
    for i in range(pairs):
        env, beta = envs[i % len(envs)]
        ref = env.reference_policy()
        log_ratio = optimal_policy(ref, env, beta).log_probs() - ref.log_probs()
        x = int(stream.integers(env.num_prompts))
        w, l = stream.choice(env.num_outcomes, size=2, replace=False)
        rebuilt = beta * (log_ratio[x, w] - log_ratio[x, l])
        worst = max(worst, abs(rebuilt - (env.rewards[x, w] - env.rewards[x, l])))
    return worst <= 1e-10, f"max pair error {worst:.3e} over {pairs} pairs"


def check_anchor(seed: int = 0) -> CheckOutcome:
    """At theta = ref and s = tau the per-sample loss is ln 2."""
    env = reference_env()
    ref = env.reference_policy()
    threshold = Threshold(0.8, 0.5, "linear_interpolation", 1, 0.0)
    batch = ScoredDataset(np.array([1]), np.array([1]), np.array([0.8]))
    value = float(tgo_loss(ref, ref, batch, threshold, TGOConfig()).per_sample[0])
    error = abs(value - math.log(2))
    return error <= 1e-12, f"loss {value!r}, |loss - ln 2| = {error:.3e}"


def check_numeric_modes(seed: int = 0) -> CheckOutcome:
    """Clipped and exact log-sigmoid agree within 1e-9 where the log argument is >= ~1e-3."""
    worst = 0.0
    for label, grid in ((1.0, np.linspace(-6.5, 20.0, 400)), (0.0, np.linspace(-20.0, 6.5, 400))):
        labels = np.full(grid.size, label)
        weights = np.ones(grid.size)
        exact, _ = logistic_terms(grid, labels, weights, "exact_logsigmoid")
        clipped, _ = logistic_terms(grid, labels, weights, "clipped_sigmoid", 1e-12)
        worst = max(worst, float(np.max(np.abs(exact - clipped))))
    return worst <= 1e-9, f"max disagreement {worst:.3e}"


def _random_batch(env: TabularEnv, stream: np.random.Generator, size: int) -> ScoredDataset:
    prompts = stream.integers(env.num_prompts, size=size)
    outcomes = stream.integers(env.num_outcomes, size=size)
    scores = env.reward(prompts, outcomes) + 0.1 * stream.standard_normal(size)
    return ScoredDataset(prompts, outcomes, scores)


def check_weight_linearity(seed: int = 0) -> CheckOutcome:
    """Per-sample loss scales as 1 + c * |s - tau| times the unweighted loss, for c in 0, 1, 5, 20."""
    stream = make_stream(seed, 904)
    worst = 0.0
    for env, beta in _random_envs(seed, 20):
        ref = env.reference_policy()
        policy = TabularPolicy(ref.logits + 0.3 * stream.standard_normal(ref.logits.shape))
        batch = _random_batch(env, stream, 16)
        threshold = estimate_threshold(batch.scores)
        plain = tgo_loss(policy, ref, batch, threshold, TGOConfig(beta=beta, c=0.0)).per_sample
        for c in WEIGHT_SCALES:
            weighted = tgo_loss(policy, ref, batch, threshold, TGOConfig(beta=beta, c=c)).per_sample
            expected = (1.0 + c * np.abs(batch.scores - threshold.value)) * plain
            worst = max(worst, float(np.max(np.abs(weighted - expected) / np.maximum(expected, 1e-300))))
    return worst <= 1e-12, f"max relative deviation {worst:.3e}"


def check_gradients(seed: int = 0, h: float = 1e-6) -> CheckOutcome:
    """Analytic TGO, DPO and SFT gradients against central differences.

    Coordinates where both gradients are at or below GRADIENT_FLOOR are skipped; central
    difference round-off at h = 1e-6 is around 1e-10.
    """
    stream = make_stream(seed, 905)
    worst = {"tgo": 0.0, "dpo": 0.0, "sft": 0.0}
    for env, beta in _random_envs(seed, GRADIENT_BATCHES):
        ref = env.reference_policy()
        policy = TabularPolicy(ref.logits + 0.5 * stream.standard_normal(ref.logits.shape))
        batch = _random_batch(env, stream, 16)
        threshold = estimate_threshold(batch.scores)
        config = TGOConfig(beta=beta)
        worst["tgo"] = max(worst["tgo"], gradient_check(
            lambda p: tgo_loss(p, ref, batch, threshold, config), policy, h, GRADIENT_FLOOR
        ))

        winners = batch.outcomes
        losers = (winners + 1 + stream.integers(env.num_outcomes - 1, size=len(winners))) % env.num_outcomes
        pairs = PreferencePairs(batch.prompts, winners, losers)
        worst["dpo"] = max(worst["dpo"], gradient_check(
            lambda p: dpo_loss(p, ref, pairs, beta), policy, h, GRADIENT_FLOOR
        ))
        worst["sft"] = max(worst["sft"], gradient_check(
            lambda p: sft_loss(p, batch.prompts, batch.outcomes), policy, h, GRADIENT_FLOOR
        ))
    detail = ", ".join(f"{name} {value:.2e}" for name, value in worst.items())
    return max(worst.values()) <= 1e-5, f"max relative error: {detail}"


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _TrainTask:
    env: TabularEnv
    objective: str
    seed: int


def _train_summary(task: _TrainTask) -> Tuple[float, float, float, float]:
    config = TrainConfig(seed=task.seed, objective=task.objective)
    report = run_offline(
        task.env, task.env.reference_policy(), ScoreConfig().build(task.seed), 2000, config
    )
    return (
        report.mean_reward_curve[0],
        report.mean_reward_curve[-1],
        report.kl_to_optimal_curve[0],
        report.kl_to_optimal_curve[-1],
    )


def check_training_efficacy(seed: int = 0) -> CheckOutcome:
    """TGO beats the reference's mean reward and halves KL to pi* on the bimodal suite."""
    tasks = [_TrainTask(env, "tgo", seed + s) for env in bimodal_suite() for s in range(5)]
    results = run_replicates(_train_summary, tasks)
    improved = np.mean([after > before for before, after, _, _ in results])
    closer = np.mean([kl_after <= 0.5 * kl_before for _, _, kl_before, kl_after in results])
    detail = f"reward improved in {improved:.0%}, KL to pi* halved in {closer:.0%} of {len(results)} runs"
    return bool(improved >= 0.9 and closer >= 0.8), detail


def check_tgo_versus_sft(seed: int = 0, runs: int = 25) -> CheckOutcome:
    """TGO's final mean reward is at least SFT's on the same data."""
    suite = bimodal_suite()
    tasks = []
    for r in range(runs):
        tasks.append(_TrainTask(suite[r % len(suite)], "tgo", seed + r))
        tasks.append(_TrainTask(suite[r % len(suite)], "sft", seed + r))
    results = run_replicates(_train_summary, tasks)
    wins = [tgo[1] >= sft[1] for tgo, sft in zip(results[0::2], results[1::2])]
    share = float(np.mean(wins))
    return share >= 0.8, f"TGO >= SFT in {share:.0%} of {runs} runs"


def check_determinism(seed: int = 0) -> CheckOutcome:
    """Two identical training runs produce byte-identical CSV text."""
    env = bimodal_suite(1)[0]
    texts = []
    for _ in range(2):
        report = run_offline(
            env, env.reference_policy(), ScoreConfig().build(seed), 500, TrainConfig(seed=seed, epochs=3)
        )
        frames = (report.loss_frame(), report.epoch_frame(), report.threshold_frame())
        texts.append("".join(frame.to_csv(index=False, lineterminator="\n") for frame in frames))
    return texts[0] == texts[1], "outputs identical" if texts[0] == texts[1] else "outputs differ"


# ---------------------------------------------------------------------------
# Statistical rates
# ---------------------------------------------------------------------------

def check_consistency(seed: int = 0) -> CheckOutcome:
    """Empirical minimizers approach theta* at the root-n rate."""
    report = consistency_experiment(
        reference_env(), ExperimentConfig(), (100, 1000, 10_000), 20, seed,
        theta_star=_reference_minimizer(),
    )
    errors = report.mean_param_error
    decreasing = all(b < a for a, b in zip(errors, errors[1:]))
    in_range = -0.65 <= report.loglog_slope <= -0.35
    detail = f"errors {[round(e, 5) for e in errors]}, slope {report.loglog_slope:.3f}"
    return decreasing and in_range and not any(report.failures), detail


def check_bias_rate(seed: int = 0) -> CheckOutcome:
    """Mean signed error of the empirical minimizer shrinks like 1/n."""
    report = bias_experiment(
        reference_env(), ExperimentConfig(), (100, 1000, 10_000), 200, seed,
        theta_star=_reference_minimizer(),
    )
    in_range = -1.4 <= report.fitted_slope <= -0.6
    detail = (
        f"slope {report.fitted_slope:.3f} (raw {report.raw_slope:.3f}), "
        f"H positive definite: {report.hessian_positive_definite}, "
        f"predicted |B1| {report.predicted_bias_norm:.4g}"
    )
    return in_range and report.hessian_positive_definite, detail


def check_calibration_decay(seed: int = 0) -> CheckOutcome:
    """Pseudo-label disagreement falls with score noise and vanishes at zero noise."""
    frame = calibration_experiment(
        shared_baseline_env(), 1.0, (1.0, 0.3, 0.1, 0.03, 0.0), 500, CALIBRATION_REPLICATES, seed
    )
    means = frame['mean_error'].tolist()
    spreads = frame['std_error'].tolist()
    monotone = all(means[i + 1] <= means[i] + spreads[i] for i in range(len(means) - 1))
    detail = f"errors {[round(m, 4) for m in means]}"
    return monotone and means[-1] == 0.0, detail


def check_percentile_sensitivity(seed: int = 0) -> CheckOutcome:
    """p = 0.5 ranks in the top two percentiles by final mean reward."""
    grid = threshold_sensitivity(bimodal_suite(), TrainConfig(), SWEEP_PERCENTILES, 10, seed)
    share = grid.top_k_fraction(0.5, k=2)
    medians = grid.aggregate().set_index('value')['positive_count']
    ordered = medians[0.9] < medians[0.1]
    detail = f"p=0.5 in top 2 for {share:.0%} of replicates; positives p=0.9 {medians[0.9]} vs p=0.1 {medians[0.1]}"
    return share >= 0.7 and ordered, detail


# (name, check, runs at fast level)
CHECKS: List[Tuple[str, Callable[[int], CheckOutcome], bool]] = [
    ("monotonicity", check_monotonicity, True),
    ("oracle_decision_rule", check_decision_rule, True),
    ("reparameterization_identity", check_reparameterization, True),
    ("dpo_cancellation", check_dpo_cancellation, True),
    ("gradient_correctness", check_gradients, True),
    ("anchor_value", check_anchor, True),
    ("weight_linearity", check_weight_linearity, True),
    ("numeric_mode_agreement", check_numeric_modes, True),
    ("training_efficacy", check_training_efficacy, True),
    ("tgo_vs_sft", check_tgo_versus_sft, True),
    ("consistency_rate", check_consistency, True),
    ("bias_rate", check_bias_rate, False),
    ("calibration_decay", check_calibration_decay, True),
    ("percentile_sensitivity", check_percentile_sensitivity, False),
    ("determinism", check_determinism, True),
]


def run_check(name: str, check: Callable[[int], CheckOutcome], seed: int) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail = check(seed)
    except Exception as e:
        passed, detail = False, f"error: {type(e).__name__}: {e}"
    seconds = time.perf_counter() - start
    status = "passed" if passed else "failed"
    marker = "✓" if passed else "✗"
    logger.info(f"{marker} {name}: {detail} ({seconds:.1f}s)")
    return CheckResult(name, status, detail, seconds)


def run_suite(level: str = "fast", seed: int = 0) -> List[CheckResult]:
    """Run every check allowed at ``level``; the others are reported as skipped."""
    if level not in LEVELS:
        raise ValueError(f"Unknown verify level '{level}', expected one of {LEVELS}")
    logger.info("=" * 80)
    logger.info(f"VERIFICATION SUITE ({level})")
    logger.info("=" * 80)

    results = []
    for i, (name, check, fast) in enumerate(CHECKS, start=1):
        logger.info(f"[{i}/{len(CHECKS)}] {name}")
        if level == "fast" and not fast:
            results.append(CheckResult(name, "skipped", "runs at the full level only", 0.0))
            continue
        results.append(run_check(name, check, seed))

    failed = [r.name for r in results if r.status == "failed"]
    passed = sum(r.passed for r in results)
    logger.info(f"Result: {passed}/{len(results)} checks passed, {len(failed)} failed")
    return results


def results_frame(results: List[CheckResult]) -> pd.DataFrame:
    return pd.DataFrame(
        [dataclasses.asdict(r) for r in results], columns=['name', 'status', 'detail', 'seconds']
    )
