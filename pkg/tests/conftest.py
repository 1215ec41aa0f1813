"""Pytest configuration and shared fixtures for affinity-refine tests."""

import logging
from collections.abc import Generator
from pathlib import Path

import numpy as np
import pytest

from affinity_refine.common.logging_config import COMPILER_LOGGERS, StderrFormatter
from affinity_refine.constants import config
from affinity_refine.numba_pipelines import set_thread_count
from affinity_refine.tensor_core import LabelMap

DATA_DIR = Path(__file__).resolve().parent / "data"


@pytest.fixture(scope="session", autouse=True)
def silence_noisy_logging():
    """Numba debug output floods with SSA/IR details during JIT compilation."""
    for name in COMPILER_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)
    yield


@pytest.fixture(autouse=True)
def reset_config() -> Generator[None, None, None]:
    """CLI runs call config.set() and attach a stderr handler; keep both from leaking between tests."""
    config.clear()
    yield
    config.clear()
    set_thread_count(1)
    root = logging.getLogger()
    for handler in [h for h in root.handlers if isinstance(h.formatter, StderrFormatter)]:
        root.removeHandler(handler)


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def two_by_two_labels() -> LabelMap:
    """[[1, 1], [0, 255]]: two fg pixels, one bg pixel, one neutral."""
    return LabelMap.from_array([[1, 1], [0, 255]])


@pytest.fixture
def two_by_two_probs() -> np.ndarray:
    probs = np.empty((2, 2, 2))
    probs[0, 0] = probs[0, 1] = [0.9, 0.1]
    probs[1, 0] = [0.1, 0.9]
    probs[1, 1] = [0.5, 0.5]
    return probs
