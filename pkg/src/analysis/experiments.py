"""Statistical experiments on tabular environments: minimizers, consistency, bias, sweeps.

On a finite environment the expected threshold-guided loss is an exact weighted sum over
(prompt, outcome) cells, so the population minimizer, its Hessian, the score covariance and
the third-derivative tensor are all computed exactly rather than by Monte Carlo. Empirical
minimizers reuse the same cell objective with sample frequencies in place of the
population masses.

Pure threshold-guided loss on softmax logits has no finite minimizer as soon as a row holds a
pseudo-negative (its probability is pushed to zero), so every minimization here adds a ridge
(ridge / 2) * ||theta - theta_ref||^2. The ridge keeps each row mean at the reference's,
which also fixes the softmax gauge.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg, optimize, stats
from scipy.special import expit, log_softmax

from src.alignment.objective import TGOConfig
from src.alignment.policy import TabularPolicy, oracle_report
from src.alignment.trainer import TrainConfig, run_offline
from src.config import ScoreConfig, max_workers
from src.data.environments import TabularEnv, make_stream, sample_dataset
from src.data.feedback import (
    ScoreModel,
    ScoredDataset,
    Threshold,
    calibration_error,
    confidence_weight,
    estimate_threshold,
    population_threshold,
    pseudo_label,
    score_rewards,
)

logger = logging.getLogger(__name__)

THRESHOLD_MODES = ("population", "empirical")
CONSISTENCY_MIN_REPLICATES = 20
BIAS_MIN_REPLICATES = 200
ILL_CONDITIONED = 1e8
NEWTON_POLISH_STEPS = 20


class ConvergenceError(RuntimeError):
    """Minimization stopped before the gradient norm reached the tolerance."""

    def __init__(self, gradient_norm: float, iterations: int):
        super().__init__(
            f"Minimizer did not converge: gradient norm {gradient_norm:.3e} after {iterations} iterations"
        )
        self.gradient_norm = gradient_norm
        self.iterations = iterations


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings shared by the population and empirical minimizations."""

    tgo: TGOConfig = field(default_factory=TGOConfig)
    ridge: float = 1.0
    threshold_mode: str = "population"
    score_transform: str = "identity"
    tolerance: float = 1e-9
    gtol: float = 1e-11
    max_iter: int = 500
    fd_step: float = 1e-5

    def __post_init__(self) -> None:
        if self.ridge < 0:
            raise ValueError(f"ridge must be non-negative, got {self.ridge}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValueError(
                f"Unknown threshold_mode '{self.threshold_mode}', expected one of {THRESHOLD_MODES}"
            )

    def score_model(self) -> ScoreModel:
        return ScoreModel(transform=self.score_transform)


# ---------------------------------------------------------------------------
# Cell objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CellObjective:
    """Ridge-regularized threshold-guided loss written as a sum over cells.

    ``mass`` holds the population probability (or sample frequency) of each
    (prompt, outcome) cell; ``labels`` and ``weights`` are the cell's pseudo-label and
    confidence weight. Parameters are the flattened K x M logits.
    """

    ref: TabularPolicy
    mass: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    beta: float
    ridge: float

    @property
    def shape(self) -> Tuple[int, int]:
        return self.ref.logits.shape

    def _terms(self, params: np.ndarray) -> Tuple[np.ndarray, ...]:
        theta = np.asarray(params, dtype=float).reshape(self.shape)
        log_p = log_softmax(theta, axis=1)
        z = self.beta * (log_p - self.ref.log_probs())
        sig = expit(z)
        slope = sig - self.labels
        curvature = sig * expit(-z)
        losses = np.where(self.labels == 1, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
        return theta, np.exp(log_p), losses, slope, curvature

    def value(self, params: np.ndarray) -> float:
        theta, _, losses, _, _ = self._terms(params)
        penalty = 0.5 * self.ridge * np.sum((theta - self.ref.logits) ** 2)
        return float(np.sum(self.mass * self.weights * losses) + penalty)

    def gradient(self, params: np.ndarray) -> np.ndarray:
        theta, p, _, slope, _ = self._terms(params)
        a = self.mass * self.weights * slope * self.beta
        grad = a - a.sum(axis=1, keepdims=True) * p + self.ridge * (theta - self.ref.logits)
        return grad.ravel()

    def hessian(self, params: np.ndarray) -> np.ndarray:
        _, p, _, slope, curvature = self._terms(params)
        k, m = self.shape
        a = self.mass * self.weights * slope * self.beta
        b = self.mass * self.weights * curvature * self.beta**2
        u = np.eye(m)[None, :, :] - p[:, None, :]
        softmax_jacobian = np.einsum('xi,ij->xij', p, np.eye(m)) - np.einsum('xi,xj->xij', p, p)
        blocks = (
            np.einsum('xy,xyi,xyj->xij', b, u, u)
            - a.sum(axis=1)[:, None, None] * softmax_jacobian
            + self.ridge * np.eye(m)[None, :, :]
        )
        return linalg.block_diag(*blocks)

    def cell_gradients(self, params: np.ndarray) -> np.ndarray:
        """Per-cell loss gradients (ridge excluded), one flattened row per cell."""
        _, p, _, slope, _ = self._terms(params)
        k, m = self.shape
        u = np.eye(m)[None, :, :] - p[:, None, :]
        rows = (self.weights * slope * self.beta)[:, :, None] * u
        full = np.zeros((k, m, k, m))
        for x in range(k):
            full[x, :, x, :] = rows[x]
        return full.reshape(k * m, k * m)

    def cell_hessians(self, params: np.ndarray) -> np.ndarray:
        """Per-cell loss Hessians (ridge excluded), shape (cells, params, params)."""
        _, p, _, slope, curvature = self._terms(params)
        k, m = self.shape
        u = np.eye(m)[None, :, :] - p[:, None, :]
        full = np.zeros((k, m, k * m, k * m))
        for x in range(k):
            softmax_jacobian = np.diag(p[x]) - np.outer(p[x], p[x])
            for y in range(m):
                block = self.weights[x, y] * (
                    self.beta**2 * curvature[x, y] * np.outer(u[x, y], u[x, y])
                    - self.beta * slope[x, y] * softmax_jacobian
                )
                full[x, y, x * m:(x + 1) * m, x * m:(x + 1) * m] = block
        return full.reshape(k * m, k * m, k * m)


def cell_objective(
    env: TabularEnv,
    ref: TabularPolicy,
    mass: np.ndarray,
    tau: float,
    config: ExperimentConfig,
) -> CellObjective:
    """Cell objective with labels and weights from the noiseless scores g(R) and ``tau``."""
    scores = np.asarray(config.score_model().g(env.rewards), dtype=float)
    threshold = Threshold(tau, config.tgo.percentile, config.tgo.percentile_method, 0, 0.0)
    return CellObjective(
        ref=ref,
        mass=np.asarray(mass, dtype=float),
        labels=pseudo_label(scores, threshold).astype(float),
        weights=confidence_weight(scores, threshold, config.tgo.c),
        beta=config.tgo.beta,
        ridge=config.ridge,
    )


def minimize_objective(objective: CellObjective, config: ExperimentConfig) -> np.ndarray:
    """Trust-region Newton minimization, polished with plain Newton steps.

    Raises:
        ConvergenceError: If the final gradient norm is not below ``config.tolerance``
    """
    x0 = objective.ref.logits.ravel()
    result = optimize.minimize(
        objective.value,
        x0,
        jac=objective.gradient,
        hess=objective.hessian,
        method="trust-exact",
        options={"gtol": config.gtol, "maxiter": config.max_iter},
    )
    theta = result.x
    for _ in range(NEWTON_POLISH_STEPS):
        grad = objective.gradient(theta)
        if np.linalg.norm(grad) < config.tolerance:
            break
        try:
            factor = linalg.cho_factor(objective.hessian(theta))
        except linalg.LinAlgError:
            break
        theta = theta - linalg.cho_solve(factor, grad)

    gradient_norm = float(np.linalg.norm(objective.gradient(theta)))
    if not gradient_norm < config.tolerance:
        raise ConvergenceError(gradient_norm, int(result.nit))
    return theta


def population_mass(env: TabularEnv, ref: TabularPolicy) -> np.ndarray:
    """Probability of each (prompt, outcome) cell under reference sampling."""
    return env.prompt_weights[:, None] * ref.probs()


def population_tau(env: TabularEnv, ref: TabularPolicy, config: ExperimentConfig) -> float:
    return population_threshold(env, ref, config.score_model(), config.tgo.percentile)


def population_minimizer(
    env: TabularEnv,
    ref: TabularPolicy,
    score_model: ScoreModel,
    tgo_config: TGOConfig,
    ridge: float = 1.0,
    tolerance: float = 1e-9,
) -> TabularPolicy:
    """Exact minimizer of the expected loss under reference sampling, threshold fixed at the
    population quantile of noiseless scores.

    Raises:
        ValueError: If the score model is noisy
        ConvergenceError: If the gradient norm does not reach ``tolerance``
    """
    if score_model.noise_scale != 0:
        raise ValueError("The population problem needs a noiseless score model")
    env.check_policy(ref)
    config = ExperimentConfig(
        tgo=tgo_config, ridge=ridge, score_transform=score_model.transform, tolerance=tolerance
    )
    tau = population_tau(env, ref, config)
    objective = cell_objective(env, ref, population_mass(env, ref), tau, config)
    theta = minimize_objective(objective, config)
    gradient_norm = np.linalg.norm(objective.gradient(theta))
    logger.debug(f"Population minimizer: tau={tau:.6f}, |grad|={gradient_norm:.2e}")
    return TabularPolicy(theta.reshape(ref.logits.shape))


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------

def run_replicates(
    fn: Callable[[Any], Any], tasks: Sequence[Any], workers: Optional[int] = None
) -> List[Any]:
    """Apply ``fn`` to every task, in worker processes when allowed.

    Results come back in task order whatever order workers finish in, so parallelism
    never changes an experiment's output.
    """
    workers = max_workers() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]

    results: List[Any] = [None] * len(tasks)
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as executor:
        futures = {executor.submit(fn, task): i for i, task in enumerate(tasks)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return results


def derive_seed(seed: int, *keys: int) -> int:
    """Non-negative integer seed mixed from ``seed`` and ``keys``."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class _FitTask:
    env: TabularEnv
    config: ExperimentConfig
    theta_star: np.ndarray
    tau: float
    n: int
    seed: int
    size_index: int
    replicate: int


@dataclass(frozen=True, eq=False)
class _FitResult:
    size_index: int
    replicate: int
    theta_hat: Optional[np.ndarray]
    gradient_at_star: Optional[np.ndarray]
    failure: str = ""


def _fit_replicate(task: _FitTask) -> _FitResult:
    env, config = task.env, task.config
    ref = env.reference_policy()
    stream = make_stream(task.seed, task.size_index, task.replicate)
    samples = sample_dataset(env, ref, task.n, stream, rng_tag=f"n{task.n}-r{task.replicate}")
    counts = np.bincount(
        samples.prompts * env.num_outcomes + samples.outcomes, minlength=env.rewards.size
    ).reshape(env.rewards.shape)

    tau = task.tau
    if config.threshold_mode == "empirical":
        scores = score_rewards(config.score_model(), samples.rewards)
        tau = estimate_threshold(scores, config.tgo.percentile, config.tgo.percentile_method).value

    objective = cell_objective(env, ref, counts / task.n, tau, config)
    try:
        theta_hat = minimize_objective(objective, config)
    except ConvergenceError as e:
        return _FitResult(task.size_index, task.replicate, None, None, str(e))
    return _FitResult(task.size_index, task.replicate, theta_hat, objective.gradient(task.theta_star))


def _check_sizes(sample_sizes: Sequence[int]) -> List[int]:
    sizes = [int(n) for n in sample_sizes]
    if not sizes:
        raise ValueError("sample_sizes must be non-empty")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"sample_sizes must be strictly increasing, got {sizes}")
    if sizes[0] < 1:
        raise ValueError("sample sizes must be positive")
    if sizes[0] < 100 or sizes[-1] > 100_000:
        logger.warning(f"Sample sizes {sizes} leave the [1e2, 1e5] range the rate checks assume")
    return sizes


def loglog_slope(sizes: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log10(values) against log10(sizes); NaN when undefined."""
    sizes_arr = np.asarray(sizes, dtype=float)
    values_arr = np.asarray(values, dtype=float)
    keep = np.isfinite(values_arr) & (values_arr > 0)
    if keep.sum() < 2:
        return float('nan')
    return float(stats.linregress(np.log10(sizes_arr[keep]), np.log10(values_arr[keep])).slope)


def _run_fits(
    env: TabularEnv,
    config: ExperimentConfig,
    theta_star: TabularPolicy,
    sizes: List[int],
    replicates: int,
    seed: int,
    workers: Optional[int],
) -> List[_FitResult]:
    tau = population_tau(env, env.reference_policy(), config)
    tasks = [
        _FitTask(env, config, theta_star.logits.ravel(), tau, n, seed, i, r)
        for i, n in enumerate(sizes)
        for r in range(replicates)
    ]
    results = run_replicates(_fit_replicate, tasks, workers)
    failed = [r for r in results if r.theta_hat is None]
    if failed:
        logger.warning(f"✗ {len(failed)}/{len(results)} replicate fits failed to converge")
    return results


# ---------------------------------------------------------------------------
# Consistency
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConsistencyReport:
    sample_sizes: List[int]
    mean_param_error: List[float]
    std_param_error: List[float]
    loglog_slope: float
    replicates: int
    failures: List[int]
    theta_star: TabularPolicy

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'n': self.sample_sizes,
            'mean_param_error': self.mean_param_error,
            'std_param_error': self.std_param_error,
            'replicates': self.replicates,
            'failures': self.failures,
        })


def consistency_experiment(
    env: TabularEnv,
    config: ExperimentConfig,
    sample_sizes: Sequence[int],
    replicates: int,
    seed: int,
    theta_star: Optional[TabularPolicy] = None,
    workers: Optional[int] = None,
) -> ConsistencyReport:
    """Mean gauge-fixed distance between empirical minimizers and the population minimizer."""
    sizes = _check_sizes(sample_sizes)
    if replicates < 1:
        raise ValueError(f"replicates must be at least 1, got {replicates}")
    if replicates < CONSISTENCY_MIN_REPLICATES:
        logger.warning(
            f"Consistency experiment with {replicates} replicates (< {CONSISTENCY_MIN_REPLICATES})"
        )
    ref = env.reference_policy()
    if theta_star is None:
        theta_star = population_minimizer(
            env, ref, config.score_model(), config.tgo, config.ridge, config.tolerance
        )

    results = _run_fits(env, config, theta_star, sizes, replicates, seed, workers)
    star = theta_star.centered()
    means, spreads, failures = [], [], []
    for i in range(len(sizes)):
        errors = [
            float(np.linalg.norm(TabularPolicy(r.theta_hat.reshape(star.shape)).centered() - star))
            for r in results
            if r.size_index == i and r.theta_hat is not None
        ]
        failures.append(replicates - len(errors))
        means.append(float(np.mean(errors)) if errors else float('nan'))
        spreads.append(float(np.std(errors)) if errors else float('nan'))

    slope = loglog_slope(sizes, means)
    logger.info(f"Consistency: errors {[f'{e:.4g}' for e in means]} slope={slope:.3f}")
    return ConsistencyReport(sizes, means, spreads, slope, replicates, failures, theta_star)


# ---------------------------------------------------------------------------
# Bias
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BiasReport:
    """Replicate-mean signed error of the empirical minimizer against n.

    ``mean_signed_error`` is the raw replicate mean; ``corrected_signed_error`` subtracts the
    mean-zero first-order term -H^{-1} grad L_n(theta*) from every replicate before
    averaging, which leaves the expectation unchanged and removes most of the Monte Carlo
    noise. ``fitted_slope`` uses the corrected norms.
    """

    sample_sizes: List[int]
    mean_signed_error: List[np.ndarray]
    corrected_signed_error: List[np.ndarray]
    fitted_slope: float
    raw_slope: float
    hessian_at_opt: np.ndarray
    hessian_positive_definite: bool
    condition_number: float
    score_covariance: np.ndarray
    third_moment_tensor_norm: float
    predicted_bias: np.ndarray
    predicted_bias_norm: float
    expansion_applicable: bool
    replicates: int
    failures: List[int]
    notes: List[str]

    @property
    def ill_conditioned(self) -> bool:
        return self.condition_number > ILL_CONDITIONED

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'n': self.sample_sizes,
            'raw_bias_norm': [float(np.linalg.norm(v)) for v in self.mean_signed_error],
            'corrected_bias_norm': [float(np.linalg.norm(v)) for v in self.corrected_signed_error],
            'scaled_bias_norm': [
                float(n * np.linalg.norm(v)) for n, v in zip(self.sample_sizes, self.corrected_signed_error)
            ],
            'predicted_bias_norm': self.predicted_bias_norm,
            'replicates': self.replicates,
            'failures': self.failures,
        })


def third_derivative_tensor(objective: CellObjective, params: np.ndarray, h: float) -> np.ndarray:
    """J[i, j, k] = d H[i, j] / d theta_k by central differences of the analytic Hessian."""
    params = np.asarray(params, dtype=float)
    size = params.size
    tensor = np.zeros((size, size, size))
    for k in range(size):
        step = np.zeros(size)
        step[k] = h
        tensor[:, :, k] = (objective.hessian(params + step) - objective.hessian(params - step)) / (2 * h)
    return tensor


def predicted_bias(
    objective: CellObjective, params: np.ndarray, h: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Second-order bias coefficient B1 with E[theta_hat] - theta* ~ B1 / n.

    B1 = H^{-1} E[V H^{-1} g] - 1/2 H^{-1} J : (H^{-1} S H^{-1}), where g and V are the
    centered per-cell gradient and per-cell Hessian. Returns (B1, S, J).
    """
    hessian = objective.hessian(params)
    h_inv = np.linalg.inv(hessian)
    q = objective.mass.ravel()
    gradients = objective.cell_gradients(params)
    centered = gradients - q @ gradients
    covariance = (q[:, None] * centered).T @ centered
    cross = np.einsum('c,cij,cj->i', q, objective.cell_hessians(params), centered @ h_inv)
    tensor = third_derivative_tensor(objective, params, h)
    sandwich = h_inv @ covariance @ h_inv
    b1 = h_inv @ cross - 0.5 * h_inv @ np.einsum('ijk,jk->i', tensor, sandwich)
    return b1, covariance, tensor


def bias_experiment(
    env: TabularEnv,
    config: ExperimentConfig,
    sample_sizes: Sequence[int],
    replicates: int,
    seed: int,
    theta_star: Optional[TabularPolicy] = None,
    workers: Optional[int] = None,
) -> BiasReport:
    """Replicate-mean signed error of empirical minimizers and its log-log rate in n."""
    sizes = _check_sizes(sample_sizes)
    if replicates < 1:
        raise ValueError(f"replicates must be at least 1, got {replicates}")
    if replicates < BIAS_MIN_REPLICATES:
        logger.warning(f"Bias experiment with {replicates} replicates (< {BIAS_MIN_REPLICATES})")
    if sizes[-1] < 100 * sizes[0]:
        logger.warning(f"Sample sizes {sizes} span less than two decades")

    ref = env.reference_policy()
    if theta_star is None:
        theta_star = population_minimizer(
            env, ref, config.score_model(), config.tgo, config.ridge, config.tolerance
        )
    tau = population_tau(env, ref, config)
    objective = cell_objective(env, ref, population_mass(env, ref), tau, config)
    star = theta_star.logits.ravel()

    notes: List[str] = []
    labels = objective.labels[objective.mass > 0]
    applicable = bool(labels.min() != labels.max())
    if not applicable:
        notes.append("quadratic expansion inapplicable: every sample carries the same pseudo-label")

    hessian = objective.hessian(star)
    eigenvalues = np.linalg.eigvalsh(hessian)
    positive_definite = bool(eigenvalues.min() > 0)
    condition = float(eigenvalues.max() / eigenvalues.min()) if positive_definite else float('inf')
    if not positive_definite:
        notes.append("Hessian at the population minimizer is not positive definite")
    elif condition > ILL_CONDITIONED:
        notes.append(f"Hessian ill-conditioned (condition number {condition:.3e})")
    for note in notes:
        logger.warning(note)

    if positive_definite:
        b1, covariance, tensor = predicted_bias(objective, star, config.fd_step)
        h_inv = np.linalg.inv(hessian)
    else:
        b1 = np.full(star.size, np.nan)
        gradients = objective.cell_gradients(star)
        centered = gradients - objective.mass.ravel() @ gradients
        covariance = (objective.mass.ravel()[:, None] * centered).T @ centered
        tensor = third_derivative_tensor(objective, star, config.fd_step)
        h_inv = np.linalg.pinv(hessian)

    results = _run_fits(env, config, theta_star, sizes, replicates, seed, workers)
    raw_means, corrected_means, failures = [], [], []
    for i in range(len(sizes)):
        fits = [r for r in results if r.size_index == i and r.theta_hat is not None]
        failures.append(replicates - len(fits))
        if not fits:
            raw_means.append(np.full(star.size, np.nan))
            corrected_means.append(np.full(star.size, np.nan))
            continue
        raw = np.array([r.theta_hat - star for r in fits])
        corrected = raw + np.array([h_inv @ r.gradient_at_star for r in fits])
        raw_means.append(raw.mean(axis=0))
        corrected_means.append(corrected.mean(axis=0))

    corrected_norms = [float(np.linalg.norm(v)) for v in corrected_means]
    raw_norms = [float(np.linalg.norm(v)) for v in raw_means]
    report = BiasReport(
        sample_sizes=sizes,
        mean_signed_error=raw_means,
        corrected_signed_error=corrected_means,
        fitted_slope=loglog_slope(sizes, corrected_norms),
        raw_slope=loglog_slope(sizes, raw_norms),
        hessian_at_opt=hessian,
        hessian_positive_definite=positive_definite,
        condition_number=condition,
        score_covariance=covariance,
        third_moment_tensor_norm=float(np.linalg.norm(tensor)),
        predicted_bias=b1,
        predicted_bias_norm=float(np.linalg.norm(b1)),
        expansion_applicable=applicable,
        replicates=replicates,
        failures=failures,
        notes=notes,
    )
    logger.info(
        f"Bias: corrected norms {[f'{v:.3g}' for v in corrected_norms]} slope={report.fitted_slope:.3f}, "
        f"predicted |B1|={report.predicted_bias_norm:.4g}"
    )
    return report


# ---------------------------------------------------------------------------
# Threshold estimation and calibration
# ---------------------------------------------------------------------------

def threshold_spread_experiment(
    env: TabularEnv,
    score: ScoreConfig,
    p: float,
    sample_sizes: Sequence[int],
    replicates: int,
    seed: int,
    method: str = "linear_interpolation",
) -> pd.DataFrame:
    """Replicate spread of tau against n, next to the mean estimated standard error."""
    sizes = _check_sizes(sample_sizes)
    ref = env.reference_policy()
    rows = []
    for i, n in enumerate(sizes):
        values, errors = [], []
        for r in range(replicates):
            model = score.build(derive_seed(seed, i, r))
            samples = sample_dataset(env, ref, n, make_stream(seed, i, r))
            threshold = estimate_threshold(score_rewards(model, samples.rewards), p, method)
            values.append(threshold.value)
            errors.append(threshold.quantile_std_error)
        rows.append({
            'n': n,
            'tau_mean': float(np.mean(values)),
            'tau_std': float(np.std(values, ddof=1)) if replicates > 1 else 0.0,
            'mean_std_error': float(np.mean(errors)),
            'replicates': replicates,
        })
    return pd.DataFrame(rows)


def common_oracle_threshold(env: TabularEnv, beta: float, tolerance: float = 1e-12) -> Threshold:
    """The oracle baseline as a Threshold, for environments where it is the same for every prompt."""
    baseline = oracle_report(env.reference_policy(), env, beta).baseline
    if np.ptp(baseline) > tolerance:
        raise ValueError(f"Oracle baseline differs across prompts (spread {np.ptp(baseline):.3e})")
    return Threshold(float(baseline[0]), 0.5, "oracle", 0, 0.0)


def calibration_experiment(
    env: TabularEnv,
    beta: float,
    noise_scales: Sequence[float],
    n_samples: int,
    replicates: int,
    seed: int,
    threshold: Optional[Threshold] = None,
    noise: str = "gaussian",
) -> pd.DataFrame:
    """Pseudo-label disagreement with oracle labels for each score-noise scale.

    The threshold defaults to the common oracle baseline, which requires every prompt to
    share the same baseline. Replicate r uses the same samples at every noise scale.
    """
    if threshold is None:
        threshold = common_oracle_threshold(env, beta)
    ref = env.reference_policy()
    rows = []
    for j, scale in enumerate(noise_scales):
        errors = []
        for r in range(replicates):
            samples = sample_dataset(env, ref, n_samples, make_stream(seed, r))
            model = ScoreModel(noise_scale=float(scale), noise=noise, stream=make_stream(seed, r, j + 1))
            scores = score_rewards(model, samples.rewards)
            dataset = ScoredDataset(samples.prompts, samples.outcomes, scores)
            errors.append(calibration_error(dataset, env, beta, threshold))
        rows.append({
            'noise_scale': float(scale),
            'mean_error': float(np.mean(errors)),
            'std_error': float(np.std(errors, ddof=1)) if replicates > 1 else 0.0,
            'replicates': replicates,
        })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Hyperparameter sweeps
# ---------------------------------------------------------------------------

SWEEP_METRICS = ('mean_reward', 'kl_to_optimal', 'calibration_error', 'positive_count')


@dataclass(frozen=True, eq=False)
class SensitivityGrid:
    """One row per (value, replicate) of a hyperparameter sweep."""

    parameter: str
    values: List[float]
    rows: pd.DataFrame

    @property
    def percentiles(self) -> List[float]:
        return self.values

    def aggregate(self) -> pd.DataFrame:
        """Per-value medians of every metric, in sweep order."""
        grouped = self.rows.groupby('value', sort=False)[list(SWEEP_METRICS)].median()
        return grouped.reindex(self.values).reset_index()

    @property
    def metric_rows(self) -> pd.DataFrame:
        return self.aggregate()

    def to_frame(self) -> pd.DataFrame:
        raw = self.rows.assign(kind='replicate')
        medians = self.aggregate().assign(kind='median', replicate=pd.NA)
        columns = ['kind', 'parameter', 'value', 'replicate', *SWEEP_METRICS]
        combined = pd.concat([raw, medians.assign(parameter=self.parameter)], ignore_index=True)
        combined['replicate'] = combined['replicate'].astype('Int64')
        return combined[columns]

    def top_k_fraction(self, value: float, k: int = 2, metric: str = 'mean_reward') -> float:
        """Fraction of replicates in which ``value`` ranks within the top ``k`` by ``metric``."""
        hits = 0
        replicates = self.rows['replicate'].unique()
        for replicate in replicates:
            block = self.rows[self.rows['replicate'] == replicate]
            ranked = block.sort_values(metric, ascending=False, kind='stable')['value'].tolist()
            hits += value in ranked[:k]
        return hits / len(replicates) if len(replicates) else 0.0


@dataclass(frozen=True, eq=False)
class _SweepTask:
    env: TabularEnv
    train: TrainConfig
    score: ScoreConfig
    n_samples: int
    value: float
    replicate: int


def _with_parameter(train: TrainConfig, parameter: str, value: float) -> TrainConfig:
    return dataclasses.replace(train, tgo=dataclasses.replace(train.tgo, **{parameter: value}))


def _sweep_cell(task: _SweepTask) -> dict:
    env, train = task.env, task.train
    report = run_offline(env, env.reference_policy(), task.score.build(train.seed), task.n_samples, train)
    threshold = report.threshold_history[0]
    return {
        'parameter': None,
        'value': task.value,
        'replicate': task.replicate,
        'mean_reward': report.mean_reward_curve[-1],
        'kl_to_optimal': report.kl_to_optimal_curve[-1],
        'calibration_error': calibration_error(report.dataset, env, train.tgo.beta, threshold),
        'positive_count': int(np.sum(pseudo_label(report.dataset.scores, threshold))),
    }


def hyperparameter_sweep(
    envs: Union[TabularEnv, Sequence[TabularEnv]],
    train: TrainConfig,
    parameter: str,
    values: Sequence[float],
    replicates: int,
    seed: int,
    score: Optional[ScoreConfig] = None,
    n_samples: int = 2000,
    workers: Optional[int] = None,
) -> SensitivityGrid:
    """Full training run per (value, replicate) for ``parameter`` in {percentile, c, beta}.

    Replicate r trains on ``envs[r % len(envs)]`` with one derived seed shared by every value,
    so values are compared on identical data.
    """
    if parameter not in ("percentile", "c", "beta"):
        raise ValueError(f"Cannot sweep '{parameter}', expected percentile, c or beta")
    values = [float(v) for v in values]
    if not values:
        raise ValueError("Sweep values must be non-empty")
    if replicates < 1:
        raise ValueError(f"replicates must be at least 1, got {replicates}")
    suite = [envs] if isinstance(envs, TabularEnv) else list(envs)
    score = score or ScoreConfig()

    tasks = []
    for r in range(replicates):
        run_seed = derive_seed(seed, r)
        for value in values:
            config = dataclasses.replace(_with_parameter(train, parameter, value), seed=run_seed)
            tasks.append(_SweepTask(suite[r % len(suite)], config, score, n_samples, value, r))

    logger.info(f"Sweeping {parameter} over {values} with {replicates} replicates ({len(tasks)} runs)")
    rows = pd.DataFrame(run_replicates(_sweep_cell, tasks, workers)).assign(parameter=parameter)
    return SensitivityGrid(parameter, values, rows)


def threshold_sensitivity(
    envs: Union[TabularEnv, Sequence[TabularEnv]],
    train: TrainConfig,
    percentiles: Sequence[float],
    replicates: int,
    seed: int,
    score: Optional[ScoreConfig] = None,
    n_samples: int = 2000,
    workers: Optional[int] = None,
) -> SensitivityGrid:
    """Percentile sweep: the ``percentile`` case of ``hyperparameter_sweep``."""
    return hyperparameter_sweep(
        envs, train, "percentile", percentiles, replicates, seed, score, n_samples, workers
    )
