#!/usr/bin/env python3
"""Command-line entry point: ``tgo-lab <simulate|train|verify|sweep>``.

Exit codes: 0 success, 1 verification failure, 2 input/IO error, 3 numeric failure.
Every command writes ``manifest.txt`` to the output directory before anything else, so a
directory holding only a manifest marks a run that crashed.
"""

import argparse
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

from src import __version__
from src.alignment.trainer import (
    SAMPLING_STREAM,
    NonFiniteLossError,
    TrainReport,
    run_offline,
)
from src.analysis.experiments import SWEEP_METRICS, ConvergenceError, hyperparameter_sweep
from src.analysis.summaries import distribution_summary, win_rate
from src.analysis.verification import LEVELS, results_frame, run_suite
from src.config import LabConfig, load_config
from src.data.environments import Environment, TabularEnv, make_stream, sample_dataset
from src.data.feedback import estimate_threshold, score_dataset
from src.data.loaders import (
    environment_items,
    file_fingerprint,
    format_flat,
    format_float,
    load_dataset,
    save_dataset,
    save_environment,
    save_policy,
    save_threshold,
    text_fingerprint,
    write_csv,
    write_flat_file,
)
from src.viz.charts import curve_charts, sweep_charts

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_NUMERIC_ERROR = 3

SWEEP_SUITE_SIZE = 10


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: str
    seed: int
    output_dir: str
    tool_version: str
    env_fingerprint: str

    def write(self) -> Path:
        items = {key: str(value) for key, value in asdict(self).items()}
        return write_flat_file(Path(self.output_dir) / 'manifest.txt', items)


def _load_env(config: LabConfig) -> tuple:
    """Environment plus the sha256 of its source file, or of the ``env.txt`` the run will write."""
    env = config.env.build(config.seed)
    if config.env.file:
        return env, file_fingerprint(config.env.file)
    return env, text_fingerprint(format_flat(environment_items(env)))


def suite_fingerprint(envs: List[Environment]) -> str:
    """sha256 of the generated suite's env files concatenated in index order."""
    return text_fingerprint("".join(format_flat(environment_items(env)) for env in envs))


def _start(command: str, config: LabConfig, config_path: Optional[str], fingerprint: str) -> Path:
    out = Path(config.output_dir)
    manifest = RunManifest(
        command=command,
        config_path=config_path or '',
        seed=config.seed,
        output_dir=str(out),
        tool_version=__version__,
        env_fingerprint=fingerprint,
    )
    manifest.write()
    logger.info(f"✓ Wrote run manifest to {out / 'manifest.txt'}")
    return out


def cmd_simulate(config: LabConfig, config_path: Optional[str] = None) -> int:
    """Sample and score the offline dataset the train command would use."""
    env, fingerprint = _load_env(config)
    out = _start('simulate', config, config_path, fingerprint)

    logger.info("[1/3] Sampling dataset...")
    stream = make_stream(config.seed, SAMPLING_STREAM)
    samples = sample_dataset(env, env.reference_policy(), config.data.n_samples, stream, "offline")
    dataset = score_dataset(config.score.build(config.seed), samples)

    logger.info("[2/3] Estimating threshold...")
    threshold = estimate_threshold(dataset.scores, config.tgo.percentile, config.tgo.percentile_method)
    logger.info(f"✓ tau = {threshold.value:.6f} at p = {threshold.percentile}")

    logger.info("[3/3] Writing outputs...")
    save_environment(env, out / 'env.txt')
    save_dataset(dataset, out / 'dataset.csv')
    save_threshold(threshold, out / 'threshold.txt')
    return EXIT_OK


def _write_train_outputs(env: Environment, report: TrainReport, out: Path) -> None:
    loss_frame = report.loss_frame()
    epoch_frame = report.epoch_frame()
    write_csv(loss_frame, out / 'loss.csv')
    write_csv(epoch_frame, out / 'epochs.csv')
    write_csv(report.threshold_frame(), out / 'thresholds.csv')
    save_policy(report.final_policy, out / 'policy.txt')
    curve_charts(epoch_frame, loss_frame, out)

    final = {
        'final_loss': format_float(report.loss_curve[-1]) if report.loss_curve else 'nan',
        'final_mean_reward': format_float(report.mean_reward_curve[-1]),
        'final_kl_to_ref': format_float(report.kl_to_ref_curve[-1]),
    }
    if isinstance(env, TabularEnv):
        ref = env.reference_policy()
        write_csv(distribution_summary(env, ref, report.final_policy), out / 'summary.csv')
        final['final_kl_to_optimal'] = format_float(report.kl_to_optimal_curve[-1])
        final['win_rate_vs_reference'] = format_float(win_rate(env, report.final_policy, ref))
    write_flat_file(out / 'report.txt', final)


def cmd_train(config: LabConfig, config_path: Optional[str] = None) -> int:
    """Offline training run; writes curves, the final policy and charts."""
    env, fingerprint = _load_env(config)
    out = _start('train', config, config_path, fingerprint)
    if not config.env.file:
        save_environment(env, out / 'env.txt')

    dataset = None
    if config.data.file:
        logger.info(f"[1/3] Loading dataset from {config.data.file}...")
        dataset = load_dataset(config.data.file, env)
    else:
        logger.info("[1/3] Dataset will be sampled from the reference policy")

    logger.info(f"[2/3] Training ({config.train.objective}, {config.train.epochs} epochs)...")
    score_model = config.score.build(config.seed)
    report = run_offline(
        env, env.reference_policy(), score_model, config.data.n_samples, config.train, dataset
    )

    logger.info("[3/3] Writing outputs...")
    _write_train_outputs(env, report, out)
    logger.info(
        f"✓ Mean reward {report.mean_reward_curve[0]:.4f} -> {report.mean_reward_curve[-1]:.4f}"
    )
    return EXIT_OK


def cmd_verify(config: LabConfig, level: str, config_path: Optional[str] = None) -> int:
    """Run the property suite; exit 1 naming every failed check."""
    out = _start('verify', config, config_path, '')
    results = run_suite(level, config.seed)
    write_csv(results_frame(results), out / 'verify.csv')
    failed = [r.name for r in results if r.status == 'failed']
    if failed:
        logger.error(f"✗ Failed checks: {', '.join(failed)}")
        return EXIT_VERIFY_FAILED
    return EXIT_OK


def cmd_sweep(config: LabConfig, config_path: Optional[str] = None) -> int:
    """Hyperparameter sweep over ``sweep.values``; grid CSV plus one bar chart per metric."""
    values = list(config.sweep.values)
    if len(values) < 2:
        raise ValueError(f"sweep needs at least two values of {config.sweep.parameter}, got {values}")
    if config.env.file:
        env, fingerprint = _load_env(config)
        envs: List[Environment] = [env]
    else:
        envs = [config.env.build(config.seed + i) for i in range(SWEEP_SUITE_SIZE)]
        fingerprint = suite_fingerprint(envs)
    if not all(isinstance(env, TabularEnv) for env in envs):
        raise ValueError("Sweeps need a tabular environment")
    out = _start('sweep', config, config_path, fingerprint)
    if not config.env.file:
        for i, env in enumerate(envs):
            save_environment(env, out / 'envs' / f'env_{i:02d}.txt')

    grid = hyperparameter_sweep(
        envs,
        config.train,
        config.sweep.parameter,
        values,
        config.sweep.replicates,
        config.seed,
        config.score,
        config.data.n_samples,
    )
    frame = grid.to_frame()
    write_csv(frame, out / 'sweep.csv')
    medians = frame[frame['kind'] == 'median']
    sweep_charts(medians, config.sweep.parameter, SWEEP_METRICS, out)
    logger.info(f"✓ Wrote {len(frame)} sweep rows to {out / 'sweep.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='tgo-lab', description='Threshold-guided alignment experiments on enumerable environments'
    )
    parser.add_argument('command', choices=['simulate', 'train', 'verify', 'sweep'])
    parser.add_argument('--config', help='Flat key = value config file (defaults when omitted)')
    parser.add_argument('--seed', type=int, help='Run seed, overriding the config')
    parser.add_argument('--out', help='Output directory, overriding output.dir')
    parser.add_argument('--level', choices=LEVELS, default='fast', help='Verification level')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )
    try:
        config = load_config(args.config, seed=args.seed, output_dir=args.out)
        if args.command == 'simulate':
            return cmd_simulate(config, args.config)
        if args.command == 'train':
            return cmd_train(config, args.config)
        if args.command == 'verify':
            return cmd_verify(config, args.level, args.config)
        return cmd_sweep(config, args.config)
    except NonFiniteLossError as e:
        logger.error(f"✗ {e}")
        return EXIT_NUMERIC_ERROR
    except ConvergenceError as e:
        logger.error(f"✗ {e}")
        return EXIT_NUMERIC_ERROR
    except (FileNotFoundError, OSError, ValueError, IndexError) as e:
        logger.error(f"✗ {e}")
        return EXIT_INPUT_ERROR


if __name__ == '__main__':
    sys.exit(main())
