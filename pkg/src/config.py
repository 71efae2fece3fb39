"""Experiment configuration: flat ``key = value`` files parsed into frozen dataclasses.

Sections use dotted keys (``tgo.beta = 1``, ``train.epochs = 30``); the bare key ``seed``
seeds the whole run. Unknown keys are rejected so that typos never fall back to defaults.

Example::

    seed = 7
    env.kind = tabular
    env.reward_spec = bimodal
    score.noise_scale = 0.1
    tgo.c = 5
    train.epochs = 30
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from src.alignment.objective import TGOConfig
from src.alignment.trainer import TrainConfig
from src.data.environments import (
    Environment,
    make_gaussian,
    make_masked,
    make_stream,
    make_tabular,
)
from src.data.feedback import ScoreModel
from src.data.loaders import load_environment, parse_flat, read_flat_file

logger = logging.getLogger(__name__)

THREADS_VARIABLE = "TGO_LAB_THREADS"
SCORING_STREAM = 5
SWEEP_PARAMETERS = ("percentile", "c", "beta")


@dataclass(frozen=True)
class EnvConfig:
    """Which environment to build, or a file to load it from."""

    kind: str = "tabular"
    file: Optional[str] = None
    k: int = 3
    m: int = 4
    reward_spec: str = "bimodal"
    dim: int = 4
    temperature: float = 0.001
    noise_scale: float = 0.05
    vocab_size: int = 8
    seq_len: int = 6
    mask_fraction: float = 0.5

    def build(self, seed: int) -> Environment:
        if self.file:
            return load_environment(self.file)
        if self.kind == "tabular":
            return make_tabular(seed, self.k, self.m, self.reward_spec)
        if self.kind == "gaussian":
            return make_gaussian(seed, self.k, self.dim, self.temperature, self.noise_scale)
        if self.kind == "masked":
            return make_masked(seed, self.k, self.vocab_size, self.seq_len, self.mask_fraction)
        raise ValueError(f"Unknown env.kind '{self.kind}', expected tabular, gaussian or masked")


@dataclass(frozen=True)
class ScoreConfig:
    transform: str = "identity"
    a: float = 1.0
    b: float = 0.0
    noise_scale: float = 0.1
    noise: str = "gaussian"

    def build(self, seed: int) -> ScoreModel:
        """Score model drawing its noise from the run's scoring stream."""
        return ScoreModel(
            transform=self.transform,
            a=self.a,
            b=self.b,
            noise_scale=self.noise_scale,
            noise=self.noise,
            stream=make_stream(seed, SCORING_STREAM),
        )


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 2000
    file: Optional[str] = None


@dataclass(frozen=True)
class SweepConfig:
    parameter: str = "percentile"
    values: Tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    replicates: int = 10

    def __post_init__(self) -> None:
        if self.parameter not in SWEEP_PARAMETERS:
            raise ValueError(f"Unknown sweep.parameter '{self.parameter}', expected one of {SWEEP_PARAMETERS}")
        if self.replicates < 1:
            raise ValueError(f"sweep.replicates must be at least 1, got {self.replicates}")


@dataclass(frozen=True)
class LabConfig:
    seed: int = 0
    output_dir: str = "output"
    env: EnvConfig = field(default_factory=EnvConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @property
    def tgo(self) -> TGOConfig:
        return self.train.tgo


_SECTIONS = {
    'env': EnvConfig,
    'score': ScoreConfig,
    'data': DataConfig,
    'train': TrainConfig,
    'tgo': TGOConfig,
    'sweep': SweepConfig,
}
# Fields set through their own section or the top-level seed.
_RESERVED = {('train', 'tgo'), ('train', 'seed')}


def _convert(raw: str, default: Any, key: str) -> Any:
    """Coerce a raw string to the type of the field's default value."""
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
                raise ValueError(raw)
            return lowered in ('true', '1', 'yes')
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(',') if v.strip())
    except ValueError:
        raise ValueError(f"Config key '{key}': cannot parse '{raw}' as {type(default).__name__}") from None
    if default is None:
        return raw or None
    return raw


def _section_values(cls: Any, name: str, items: Dict[str, str]) -> Dict[str, Any]:
    defaults = cls()
    fields = {f.name for f in dataclasses.fields(cls)}
    values: Dict[str, Any] = {}
    for key, raw in items.items():
        if key not in fields or (name, key) in _RESERVED:
            raise ValueError(f"Unknown config key '{name}.{key}'")
        values[key] = _convert(raw, getattr(defaults, key), f"{name}.{key}")
    return values


def config_from_items(
    items: Dict[str, str],
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> LabConfig:
    """Build a LabConfig from parsed flat items, applying command-line overrides.

    ``sweep.percentiles`` is accepted as an alias of ``sweep.values``.
    """
    sections: Dict[str, Dict[str, str]] = {name: {} for name in _SECTIONS}
    top: Dict[str, str] = {}
    for key, value in items.items():
        if key == 'sweep.percentiles':
            sections['sweep'].setdefault('values', value)
            continue
        if key == 'output.dir':
            top['output_dir'] = value
            continue
        if '.' not in key:
            if key != 'seed':
                raise ValueError(f"Unknown config key '{key}'")
            top[key] = value
            continue
        section, name = key.split('.', 1)
        if section not in _SECTIONS:
            raise ValueError(f"Unknown config key '{key}'")
        sections[section][name] = value

    run_seed = int(top.get('seed', 0)) if seed is None else seed
    if run_seed < 0:
        raise ValueError(f"seed must be non-negative, got {run_seed}")
    built = {name: _section_values(cls, name, sections[name]) for name, cls in _SECTIONS.items()}

    tgo = TGOConfig(**built['tgo'])
    train = TrainConfig(**built['train'], tgo=tgo, seed=run_seed)
    return LabConfig(
        seed=run_seed,
        output_dir=output_dir or top.get('output_dir', LabConfig.output_dir),
        env=EnvConfig(**built['env']),
        score=ScoreConfig(**built['score']),
        data=DataConfig(**built['data']),
        train=train,
        sweep=SweepConfig(**built['sweep']),
    )


def load_config(
    path: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> LabConfig:
    """Read a config file (or defaults when ``path`` is None).

    Raises:
        FileNotFoundError: If the config file doesn't exist
        ValueError: On unknown keys or unparsable values
    """
    items = read_flat_file(path) if path is not None else {}
    config = config_from_items(items, seed=seed, output_dir=output_dir)
    logger.info(f"Loaded config (seed={config.seed}, env={config.env.kind}, objective={config.train.objective})")
    return config


def parse_config_text(text: str) -> LabConfig:
    return config_from_items(parse_flat(text, source="<config>"))


def max_workers() -> int:
    """Worker cap from TGO_LAB_THREADS, defaulting to the machine's CPU count."""
    raw = os.environ.get(THREADS_VARIABLE)
    if raw is None or not raw.strip():
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_VARIABLE} must be a positive integer, got '{raw}'") from None
    if value < 1:
        raise ValueError(f"{THREADS_VARIABLE} must be a positive integer, got '{raw}'")
    return value
