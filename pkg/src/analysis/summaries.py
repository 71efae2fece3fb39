"""Exact reward-distribution summaries for tabular policies."""

import logging

import numpy as np
import pandas as pd

from src.alignment.policy import TabularPolicy
from src.alignment.trainer import REPORT_QUANTILES, evaluate_policy
from src.data.environments import TabularEnv

logger = logging.getLogger(__name__)


def _statistic_names() -> list:
    return ['mean', 'median'] + [f'q{int(round(q * 100)):02d}' for q in REPORT_QUANTILES]


def distribution_summary(
    env: TabularEnv,
    policy_before: TabularPolicy,
    policy_after: TabularPolicy,
) -> pd.DataFrame:
    """Mean, median and deciles of the exact reward distribution before and after training.

    A uniform positive shift across deciles is a global right-shift of the distribution;
    shifts concentrated in the top or bottom deciles are tail effects.

    Args:
        env: Tabular environment both policies live in
        policy_before: Policy before training (usually the reference)
        policy_after: Trained policy

    Returns:
        DataFrame with columns: statistic, before, after, shift
    """
    before = evaluate_policy(env, policy_before)
    after = evaluate_policy(env, policy_after)
    before_values = [before.mean_reward, before.median_reward, *before.reward_quantiles]
    after_values = [after.mean_reward, after.median_reward, *after.reward_quantiles]

    summary = pd.DataFrame({
        'statistic': _statistic_names(),
        'before': before_values,
        'after': after_values,
    })
    summary['shift'] = summary['after'] - summary['before']
    return summary


def win_rate(env: TabularEnv, policy_a: TabularPolicy, policy_b: TabularPolicy) -> float:
    """Probability that A's outcome out-scores B's for the same prompt (ties count one half).

    Both outcomes are drawn independently for a prompt drawn from the prompt weights, so the
    result is exact: 0.5 for identical policies and 1 - win_rate(b, a) in general.
    """
    env.check_policy(policy_a)
    env.check_policy(policy_b)
    pa = policy_a.probs()
    pb = policy_b.probs()
    # comparison[x, i, j] compares outcome i of A against outcome j of B
    diff = env.rewards[:, :, None] - env.rewards[:, None, :]
    comparison = np.where(diff > 0, 1.0, np.where(diff < 0, 0.0, 0.5))
    per_prompt = np.einsum('xi,xij,xj->x', pa, comparison, pb)
    return float(np.dot(env.prompt_weights, per_prompt))
