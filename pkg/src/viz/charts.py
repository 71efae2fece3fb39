"""Static SVG charts of training curves and sweep grids.

Every chart is built from the DataFrame that is also written to CSV, so an SVG can always
be regenerated from its CSV. The SVG hash salt and the date metadata are pinned, making
the output byte-identical across runs.
"""

from io import StringIO
from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from src.data.loaders import atomic_write_text  # noqa: E402

plt.rcParams['svg.hashsalt'] = 'tgo-lab'
plt.rcParams['svg.fonttype'] = 'none'

PathLike = Union[str, Path]

LINE_COLOR = '#1f77b4'
BAR_COLOR = '#2ca02c'


def _save_svg(fig: plt.Figure, path: PathLike) -> Path:
    buffer = StringIO()
    fig.savefig(buffer, format='svg', metadata={'Date': None})
    plt.close(fig)
    return atomic_write_text(path, buffer.getvalue())


def line_chart(df: pd.DataFrame, x: str, y: str, path: PathLike, title: str = '') -> Path:
    """Polyline of column ``y`` against column ``x``.

    Args:
        df: Data to chart (usually a curve CSV)
        x: Column for the horizontal axis
        y: Column for the vertical axis
        path: Output .svg path
        title: Chart title, defaulting to ``y``

    Returns:
        Path of the written SVG

    Raises:
        ValueError: If either column is missing
    """
    for column in (x, y):
        if column not in df.columns:
            raise ValueError(f"Column '{column}' not in frame (columns: {list(df.columns)})")

    fig, ax = plt.subplots(figsize=(6, 4))
    data = df[[x, y]].dropna()
    ax.plot(data[x], data[y], color=LINE_COLOR, linewidth=1.5)
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_title(title or y)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _save_svg(fig, path)


def bar_chart(df: pd.DataFrame, category: str, value: str, path: PathLike, title: str = '') -> Path:
    """One bar per row: ``value`` for each ``category`` label, in frame order."""
    for column in (category, value):
        if column not in df.columns:
            raise ValueError(f"Column '{column}' not in frame (columns: {list(df.columns)})")

    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f'{v:g}' if isinstance(v, float) else str(v) for v in df[category]]
    ax.bar(labels, df[value].astype(float), color=BAR_COLOR)
    ax.set_xlabel(category)
    ax.set_ylabel(value)
    ax.set_title(title or value)
    ax.grid(True, axis='y', alpha=0.3)
    fig.tight_layout()
    return _save_svg(fig, path)


def curve_charts(epoch_frame: pd.DataFrame, loss_frame: pd.DataFrame, out_dir: PathLike) -> list:
    """Loss curve per step plus one chart per epoch curve that has data."""
    out = Path(out_dir)
    paths = [line_chart(loss_frame, 'step', 'loss', out / 'loss_curve.svg', 'Training loss')]
    for column in ('mean_reward', 'kl_to_ref', 'kl_to_optimal'):
        if epoch_frame[column].notna().any():
            paths.append(line_chart(epoch_frame, 'epoch', column, out / f'{column}_curve.svg'))
    return paths


def sweep_charts(
    aggregate: pd.DataFrame, parameter: str, metrics: Sequence[str], out_dir: PathLike
) -> list:
    """Bar chart of the per-value median of each metric."""
    out = Path(out_dir)
    return [
        bar_chart(aggregate, 'value', metric, out / f'sweep_{metric}.svg', f'Median {metric} by {parameter}')
        for metric in metrics
    ]
