"""Multi-dilation 3x3 pixel pair enumeration.

For every dilation ``d`` and every non-neutral center pixel ``i``, one ordered
pair ``(i, j)`` is emitted per in-bounds, non-neutral neighbour ``j`` at offset
``d * (dy, dx)`` with ``(dy, dx)`` walking the 3x3 neighbourhood row-major
minus the centre. Symmetric pairs appear once per direction because the pair
divergence is asymmetric. Pairs with equal foreground labels go to ``fg_pos``,
equal background labels to ``bg_pos``, and differing labels to ``neg``.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from affinity_refine.constants import KERNEL_PRESETS, NEUTRAL_LABEL
from affinity_refine.errors import ArgumentError
from affinity_refine.numba_pipelines import NEIGHBOR_OFFSETS, enumerate_dilated_pairs
from affinity_refine.tensor_core import LabelMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class KernelSet:
    """Ordered, strictly increasing set of positive dilations."""

    dilations: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.dilations:
            raise ArgumentError("kernel set must not be empty")
        for d in self.dilations:
            if not isinstance(d, (int, np.integer)) or isinstance(d, bool) or d <= 0:
                raise ArgumentError(f"dilations must be positive integers, got {list(self.dilations)}")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:], strict=False)):
            raise ArgumentError(f"dilations must be strictly increasing, got {list(self.dilations)}")

    @classmethod
    def of(cls, dilations: list[int] | tuple[int, ...]) -> KernelSet:
        return cls(tuple(int(d) for d in dilations))

    @classmethod
    def parse(cls, text: str) -> KernelSet:
        """Parse ``"4-8-12-24"``, ``"4,8,12,24"`` or a preset name."""
        text = text.strip()
        if text in KERNEL_PRESETS:
            return cls(KERNEL_PRESETS[text])
        parts = [p for p in re.split(r"[,\-\s]+", text) if p]
        if not parts:
            raise ArgumentError("kernel set must not be empty")
        try:
            values = tuple(int(p) for p in parts)
        except ValueError:
            raise ArgumentError(f"invalid kernel set {text!r}") from None
        return cls(values)

    @classmethod
    def preset(cls, name: str) -> KernelSet:
        try:
            return cls(KERNEL_PRESETS[name])
        except KeyError:
            raise ArgumentError(
                f"unknown kernel preset {name!r}; known: {', '.join(KERNEL_PRESETS)}"
            ) from None

    def scaled(self, factor: float) -> KernelSet:
        """Dilations multiplied by ``factor``, rounded, floored at 1, duplicates dropped.

        ``KernelSet.preset("4-8-12-24").scaled(0.25)`` gives ``(1, 2, 3, 6)``; the
        desk-scale set used for 64x64 scenes is the explicit ``TOY_KERNELS``.
        """
        if factor <= 0:
            raise ArgumentError(f"scale factor must be positive, got {factor}")
        scaled = sorted({max(1, round(d * factor)) for d in self.dilations})
        return KernelSet(tuple(scaled))

    def __str__(self) -> str:
        return "-".join(str(d) for d in self.dilations)


@dataclass(frozen=True, slots=True)
class DilationPairs:
    """Pairs at one dilation as (n, 2) int64 arrays of flat pixel indices."""

    dilation: int
    fg_pos: np.ndarray
    bg_pos: np.ndarray
    neg: np.ndarray

    def counts(self) -> tuple[int, int, int]:
        return int(self.fg_pos.shape[0]), int(self.bg_pos.shape[0]), int(self.neg.shape[0])

    @property
    def total(self) -> int:
        return sum(self.counts())


@dataclass(frozen=True, slots=True)
class PairSet:
    height: int
    width: int
    by_dilation: tuple[DilationPairs, ...] = field(default_factory=tuple)

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    @property
    def total(self) -> int:
        return sum(p.total for p in self.by_dilation)

    def __iter__(self):
        return iter(self.by_dilation)


def build_pairs(labels: LabelMap, kernels: KernelSet) -> PairSet:
    """Enumerate fg / bg / neg pairs for every dilation in ``kernels``."""
    if labels.height < 2 or labels.width < 2:
        raise ArgumentError(
            f"label map must be at least 2x2 to hold any pair, got {labels.height}x{labels.width}"
        )
    arr = np.ascontiguousarray(labels.labels)
    groups = []
    for d in kernels.dilations:
        fg, bg, neg = enumerate_dilated_pairs(arr, int(d), NEUTRAL_LABEL, NEIGHBOR_OFFSETS)
        for a in (fg, bg, neg):
            a.flags.writeable = False
        groups.append(DilationPairs(int(d), fg, bg, neg))
    pairs = PairSet(labels.height, labels.width, tuple(groups))
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("built pairs %dx%d kernels=%s counts=%s", labels.height, labels.width, kernels, pair_counts(pairs))
    return pairs


def pair_counts(pairs: PairSet) -> dict[int, tuple[int, int, int]]:
    """(|fg_pos|, |bg_pos|, |neg|) per dilation."""
    return {p.dilation: p.counts() for p in pairs.by_dilation}
