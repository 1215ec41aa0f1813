"""Seeded random inputs for gradient checks, oracle comparisons and benchmarks."""

from __future__ import annotations

import re

import numpy as np
from scipy.special import softmax

from affinity_refine.constants import NEUTRAL_LABEL
from affinity_refine.errors import ArgumentError
from affinity_refine.tensor_core import LabelMap, Rng

_SIZE_RE = re.compile(r"^\s*(\d+)\s*[xX]\s*(\d+)\s*[xX]\s*(\d+)\s*$")


def parse_size(text: str) -> tuple[int, int, int]:
    """``"HxWxC"`` -> (H, W, C), all positive."""
    m = _SIZE_RE.match(text)
    if m is None:
        raise ArgumentError(f"size must look like HxWxC, got {text!r}")
    dims = tuple(int(g) for g in m.groups())
    if min(dims) <= 0:
        raise ArgumentError(f"size entries must be positive, got {text!r}")
    return dims  # type: ignore[return-value]


def random_labels(rng: Rng, height: int, width: int, num_classes: int, neutral_frac: float = 0.1) -> LabelMap:
    cls = rng.integers_array((height, width), num_classes).astype(np.uint8)
    neutral = rng.uniform_array((height, width)) < neutral_frac
    cls[neutral] = NEUTRAL_LABEL
    return LabelMap.from_array(cls)


def random_blob_labels(rng: Rng, height: int, width: int, num_classes: int, neutral_frac: float = 0.1) -> LabelMap:
    """Piecewise-constant labels on a coarse grid, upsampled, so positive pairs are common."""
    cell = max(2, min(height, width) // 4)
    gh = -(-height // cell)
    gw = -(-width // cell)
    coarse = rng.integers_array((gh, gw), num_classes).astype(np.uint8)
    labels = np.repeat(np.repeat(coarse, cell, axis=0), cell, axis=1)[:height, :width].copy()
    neutral = rng.uniform_array((height, width)) < neutral_frac
    labels[neutral] = NEUTRAL_LABEL
    return LabelMap.from_array(labels)


def random_probs(rng: Rng, height: int, width: int, num_classes: int, spread: float = 0.5) -> np.ndarray:
    """Softmax of U(-spread, spread) logits, float64 (H, W, C)."""
    logits = rng.uniform_array((height, width, num_classes), -spread, spread)
    return softmax(logits, axis=2)


def random_conf(rng: Rng, height: int, width: int) -> np.ndarray:
    return rng.uniform_array((height, width))


def random_embed(rng: Rng, height: int, width: int, channels: int) -> np.ndarray:
    return rng.normal_array((height, width, channels))
