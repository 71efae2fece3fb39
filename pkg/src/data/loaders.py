"""Flat-text and CSV persistence for environments, policies, thresholds and datasets.

Flat files hold one ``key = value`` per line with ``#`` comments. Matrices are written as
comma-separated rows joined by ``;``; floats use ``repr`` so a reload is exact.
"""

import hashlib
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import pandas as pd

from src.alignment.policy import TabularPolicy
from src.alignment.surrogates import GaussianPolicy, MaskedTokenPolicy
from src.data.environments import Environment, GaussianSurrogateEnv, MaskedTokenEnv, TabularEnv
from src.data.feedback import ScoredDataset, Threshold

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DATASET_COLUMNS = ['prompt_id', 'outcome', 'score']


def parse_flat(text: str, source: str = "<string>") -> Dict[str, str]:
    """Parse ``key = value`` lines into a dict.

    Args:
        text: File contents
        source: Name used in error messages

    Returns:
        Ordered mapping of keys to raw string values

    Raises:
        ValueError: If a line has no '=' or a key repeats
    """
    items: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ValueError(f"{source}:{number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise ValueError(f"{source}:{number}: empty key")
        if key in items:
            raise ValueError(f"{source}:{number}: duplicate key '{key}'")
        items[key] = value
    return items


def format_flat(items: Dict[str, Any]) -> str:
    return "".join(f"{key} = {value}\n" for key, value in items.items())


def format_float(value: float) -> str:
    return repr(float(value))


def format_vector(values: Any) -> str:
    return ",".join(format_float(v) for v in np.asarray(values, dtype=float).ravel())


def format_matrix(matrix: Any) -> str:
    matrix = np.asarray(matrix, dtype=float)
    return ";".join(format_vector(row) for row in matrix)


def parse_vector(text: str) -> np.ndarray:
    if not text.strip():
        raise ValueError("Empty vector value")
    return np.array([float(v) for v in text.split(',')])


def parse_matrix(text: str) -> np.ndarray:
    """Inverse of ``format_matrix``; rejects ragged rows."""
    rows = [parse_vector(row) for row in text.split(';')]
    widths = {len(row) for row in rows}
    if len(widths) != 1:
        raise ValueError(f"Ragged matrix rows with widths {sorted(widths)}")
    return np.vstack(rows)


def atomic_write_text(path: PathLike, text: str) -> Path:
    """Write via a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def write_csv(df: pd.DataFrame, path: PathLike) -> Path:
    """Atomic CSV write with a header and ``\\n`` line endings."""
    return atomic_write_text(path, df.to_csv(index=False, lineterminator='\n'))


def read_flat_file(path: PathLike) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    return parse_flat(path.read_text(encoding='utf-8'), source=str(path))


def write_flat_file(path: PathLike, items: Dict[str, Any]) -> Path:
    return atomic_write_text(path, format_flat(items))


def text_fingerprint(text: str) -> str:
    """sha256 hex digest of the UTF-8 bytes a text file would hold."""
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def file_fingerprint(path: PathLike) -> str:
    """sha256 hex digest of a file's bytes."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(items: Dict[str, str], keys: List[str], source: str) -> None:
    missing = [key for key in keys if key not in items]
    if missing:
        raise ValueError(f"{source}: missing required keys {missing}")


def _mask_text(mask: Any) -> str:
    return ",".join(str(int(m)) for m in mask)


def _parse_mask(text: str) -> tuple:
    return tuple(int(v) for v in text.split(','))


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------

def environment_items(env: Environment) -> Dict[str, str]:
    """Flat-file representation of any environment kind."""
    if isinstance(env, TabularEnv):
        return {
            'kind': env.kind,
            'num_prompts': str(env.num_prompts),
            'num_outcomes': str(env.num_outcomes),
            'rewards': format_matrix(env.rewards),
            'ref_logits': format_matrix(env.ref_logits),
            'prompt_weights': format_vector(env.prompt_weights),
        }
    if isinstance(env, GaussianSurrogateEnv):
        return {
            'kind': env.kind,
            'num_prompts': str(env.num_prompts),
            'dim': str(env.dim),
            'temperature': format_float(env.temperature),
            'noise_scale': format_float(env.noise_scale),
            'targets': format_matrix(env.targets),
            'ref_predictions': format_matrix(env.ref_predictions),
            'prompt_weights': format_vector(env.prompt_weights),
        }
    k = env.num_prompts
    return {
        'kind': env.kind,
        'num_prompts': str(k),
        'vocab_size': str(env.vocab_size),
        'seq_len': str(env.seq_len),
        'mask_set': _mask_text(env.mask_set),
        'true_tokens': ";".join(",".join(str(int(t)) for t in row) for row in env.true_tokens),
        'ref_logits': format_matrix(env.ref_logits.reshape(k, -1)),
        'prompt_weights': format_vector(env.prompt_weights),
    }


def environment_from_items(items: Dict[str, str], source: str = "<env>") -> Environment:
    _require(items, ['kind'], source)
    kind = items['kind']
    if kind == 'tabular':
        _require(items, ['rewards', 'ref_logits', 'prompt_weights'], source)
        return TabularEnv(
            rewards=parse_matrix(items['rewards']),
            ref_logits=parse_matrix(items['ref_logits']),
            prompt_weights=parse_vector(items['prompt_weights']),
        )
    if kind == 'gaussian':
        _require(items, ['targets', 'ref_predictions', 'temperature', 'noise_scale', 'prompt_weights'], source)
        return GaussianSurrogateEnv(
            targets=parse_matrix(items['targets']),
            ref_predictions=parse_matrix(items['ref_predictions']),
            temperature=float(items['temperature']),
            noise_scale=float(items['noise_scale']),
            prompt_weights=parse_vector(items['prompt_weights']),
        )
    if kind == 'masked':
        _require(
            items, ['vocab_size', 'seq_len', 'mask_set', 'true_tokens', 'ref_logits', 'prompt_weights'], source
        )
        vocab_size = int(items['vocab_size'])
        seq_len = int(items['seq_len'])
        true_tokens = parse_matrix(items['true_tokens']).astype(int)
        ref_logits = parse_matrix(items['ref_logits']).reshape(true_tokens.shape[0], seq_len, vocab_size)
        return MaskedTokenEnv(
            vocab_size=vocab_size,
            seq_len=seq_len,
            mask_set=_parse_mask(items['mask_set']),
            true_tokens=true_tokens,
            ref_logits=ref_logits,
            prompt_weights=parse_vector(items['prompt_weights']),
        )
    raise ValueError(f"{source}: unknown environment kind '{kind}'")


def save_environment(env: Environment, path: PathLike) -> Path:
    written = write_flat_file(path, environment_items(env))
    logger.info(f"✓ Wrote {env.kind} environment to {written}")
    return written


def load_environment(path: PathLike) -> Environment:
    """Load an environment file.

    Raises:
        FileNotFoundError: If the file doesn't exist
        ValueError: If keys are missing or values malformed
    """
    env = environment_from_items(read_flat_file(path), source=str(path))
    logger.info(f"Loaded {env.kind} environment with {env.num_prompts} prompts from {path}")
    return env


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

def policy_items(policy: Any) -> Dict[str, str]:
    if isinstance(policy, TabularPolicy):
        return {'kind': 'tabular', 'logits': format_matrix(policy.logits)}
    if isinstance(policy, GaussianPolicy):
        return {
            'kind': 'gaussian',
            'temperature': format_float(policy.temperature),
            'predictions': format_matrix(policy.predictions),
        }
    if isinstance(policy, MaskedTokenPolicy):
        k, seq_len, vocab_size = policy.logits.shape
        return {
            'kind': 'masked',
            'seq_len': str(seq_len),
            'vocab_size': str(vocab_size),
            'mask': _mask_text(policy.mask),
            'logits': format_matrix(policy.logits.reshape(k, -1)),
        }
    raise ValueError(f"Cannot serialize policy of type {type(policy).__name__}")


def save_policy(policy: Any, path: PathLike) -> Path:
    return write_flat_file(path, policy_items(policy))


def load_policy(path: PathLike) -> Any:
    items = read_flat_file(path)
    source = str(path)
    _require(items, ['kind'], source)
    kind = items['kind']
    if kind == 'tabular':
        _require(items, ['logits'], source)
        return TabularPolicy(parse_matrix(items['logits']))
    if kind == 'gaussian':
        _require(items, ['predictions', 'temperature'], source)
        return GaussianPolicy(parse_matrix(items['predictions']), float(items['temperature']))
    if kind == 'masked':
        _require(items, ['logits', 'seq_len', 'vocab_size', 'mask'], source)
        flat = parse_matrix(items['logits'])
        logits = flat.reshape(flat.shape[0], int(items['seq_len']), int(items['vocab_size']))
        return MaskedTokenPolicy(logits, _parse_mask(items['mask']))
    raise ValueError(f"{source}: unknown policy kind '{kind}'")


# ---------------------------------------------------------------------------
# Thresholds and datasets
# ---------------------------------------------------------------------------

def save_threshold(threshold: Threshold, path: PathLike) -> Path:
    return write_flat_file(path, {
        'value': format_float(threshold.value),
        'percentile': format_float(threshold.percentile),
        'method': threshold.method,
        'sample_count': str(threshold.sample_count),
        'quantile_std_error': format_float(threshold.quantile_std_error),
    })


def load_threshold(path: PathLike) -> Threshold:
    items = read_flat_file(path)
    _require(items, ['value', 'percentile', 'method', 'sample_count', 'quantile_std_error'], str(path))
    return Threshold(
        value=float(items['value']),
        percentile=float(items['percentile']),
        method=items['method'],
        sample_count=int(items['sample_count']),
        quantile_std_error=float(items['quantile_std_error']),
    )


def save_dataset(dataset: ScoredDataset, path: PathLike) -> Path:
    written = write_csv(dataset.to_frame(), path)
    logger.info(f"✓ Wrote {len(dataset)} scored records to {written}")
    return written


def load_dataset(path: PathLike, env: Environment, source_policy_tag: str = "reference") -> ScoredDataset:
    """Load a scored dataset CSV and decode outcomes for ``env``'s outcome type.

    Args:
        path: CSV with header prompt_id,outcome,score
        env: Environment the records belong to
        source_policy_tag: Tag recorded on the loaded dataset

    Returns:
        ScoredDataset with rows in file order

    Raises:
        FileNotFoundError: If CSV doesn't exist
        ValueError: If required columns are missing or records don't fit ``env``
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV not found: {path}")

    df = pd.read_csv(path, dtype={'outcome': str})
    missing = [col for col in DATASET_COLUMNS if col not in df.columns]
    if missing:
        raise ValueError(f"Missing required columns in {path}: {missing}")

    prompts = df['prompt_id'].to_numpy(dtype=int)
    if len(prompts) and (prompts.min() < 0 or prompts.max() >= env.num_prompts):
        raise ValueError(f"{path}: prompt ids fall outside [0, {env.num_prompts})")

    if isinstance(env, TabularEnv):
        outcomes = df['outcome'].astype(int).to_numpy()
        if len(outcomes) and (outcomes.min() < 0 or outcomes.max() >= env.num_outcomes):
            raise ValueError(f"{path}: outcomes fall outside [0, {env.num_outcomes})")
    else:
        dtype = float if isinstance(env, GaussianSurrogateEnv) else int
        width = env.dim if isinstance(env, GaussianSurrogateEnv) else env.seq_len
        rows = [np.array(text.split(), dtype=float) for text in df['outcome']]
        if any(len(row) != width for row in rows):
            raise ValueError(f"{path}: every outcome must have {width} components")
        outcomes = np.vstack(rows).astype(dtype) if rows else np.zeros((0, width), dtype=dtype)

    dataset = ScoredDataset(prompts, outcomes, df['score'].to_numpy(dtype=float), source_policy_tag)
    logger.info(f"Loaded {len(dataset)} scored records from {path}")
    return dataset
