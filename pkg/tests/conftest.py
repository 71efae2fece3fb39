"""Pytest configuration for TGO lab tests."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path so we can import src modules
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.data.environments import TabularEnv, reference_env  # noqa: E402


@pytest.fixture(autouse=True)
def serial_workers(monkeypatch):
    """Keep replicate work in-process during tests."""
    monkeypatch.setenv("TGO_LAB_THREADS", "1")


@pytest.fixture
def two_outcome_env():
    """One prompt, uniform reference over two outcomes with rewards (0, 1)."""
    return TabularEnv(
        rewards=np.array([[0.0, 1.0]]),
        ref_logits=np.zeros((1, 2)),
        prompt_weights=np.array([1.0]),
    )


@pytest.fixture
def small_env():
    return reference_env()
