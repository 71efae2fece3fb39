"""Tests for the SVG chart writers."""

import numpy as np
import pandas as pd
import pytest

from src.viz.charts import bar_chart, curve_charts, line_chart, sweep_charts


@pytest.fixture
def epoch_frame():
    return pd.DataFrame({
        'epoch': [0, 1, 2],
        'mean_reward': [0.1, 0.3, 0.4],
        'kl_to_ref': [0.0, 0.05, 0.08],
        'kl_to_optimal': [np.nan, np.nan, np.nan],
    })


@pytest.fixture
def loss_frame():
    return pd.DataFrame({'step': [0, 1, 2, 3], 'loss': [0.69, 0.6, 0.55, 0.52]})


def test_line_chart_writes_svg(tmp_path, loss_frame):
    path = line_chart(loss_frame, 'step', 'loss', tmp_path / 'loss.svg')
    text = path.read_text()
    assert text.lstrip().startswith('<?xml')
    assert '</svg>' in text


def test_missing_column(tmp_path, loss_frame):
    with pytest.raises(ValueError, match="epoch"):
        line_chart(loss_frame, 'epoch', 'loss', tmp_path / 'x.svg')
    with pytest.raises(ValueError, match="reward"):
        bar_chart(loss_frame, 'step', 'reward', tmp_path / 'y.svg')


def test_reruns_are_byte_identical(tmp_path, loss_frame):
    first = line_chart(loss_frame, 'step', 'loss', tmp_path / 'a.svg').read_bytes()
    second = line_chart(loss_frame, 'step', 'loss', tmp_path / 'b.svg').read_bytes()
    assert first == second

    frame = pd.DataFrame({'value': [0.1, 0.5], 'final_mean_reward': [0.2, 0.4]})
    first = bar_chart(frame, 'value', 'final_mean_reward', tmp_path / 'c.svg').read_bytes()
    second = bar_chart(frame, 'value', 'final_mean_reward', tmp_path / 'd.svg').read_bytes()
    assert first == second


def test_curve_charts_skip_empty_curves(tmp_path, epoch_frame, loss_frame):
    paths = curve_charts(epoch_frame, loss_frame, tmp_path)
    assert sorted(p.name for p in paths) == ['kl_to_ref_curve.svg', 'loss_curve.svg', 'mean_reward_curve.svg']
    assert not (tmp_path / 'kl_to_optimal_curve.svg').exists()


def test_sweep_chart_names(tmp_path):
    aggregate = pd.DataFrame({'value': [0.0, 5.0], 'final_mean_reward': [0.3, 0.5], 'final_kl_to_ref': [0.1, 0.2]})
    paths = sweep_charts(aggregate, 'c', ['final_mean_reward', 'final_kl_to_ref'], tmp_path)
    assert [p.name for p in paths] == ['sweep_final_mean_reward.svg', 'sweep_final_kl_to_ref.svg']
    assert all(p.exists() for p in paths)
