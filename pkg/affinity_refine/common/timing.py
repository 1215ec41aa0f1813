"""Phase timing utilities.

Provides PhaseTimer for instrumenting named phases of a training step or a
benchmark iteration, rolling statistics backed by numba kernels, and
format_rate_summary for a human-readable stderr line.
"""

import math
import time
from typing import TYPE_CHECKING

import numpy as np
from numba import njit

if TYPE_CHECKING:
    from typing import Self


# Power of 2 so the ring index wraps with a bitmask
BUFFER_SIZE = 1024
BUFFER_MASK = 1023


@njit(cache=True)
def _quickselect_partition(arr: np.ndarray, left: int, right: int) -> int:
    """Partition array around last element as pivot. Returns pivot index."""
    pivot = arr[right]
    i = left - 1
    for j in range(left, right):
        if arr[j] <= pivot:
            i += 1
            arr[i], arr[j] = arr[j], arr[i]
    arr[i + 1], arr[right] = arr[right], arr[i + 1]
    return i + 1


@njit(cache=True)
def _quickselect(arr: np.ndarray, k: int) -> float:
    """Find k-th smallest element in-place. Modifies arr."""
    left = 0
    right = len(arr) - 1
    while left < right:
        pivot_idx = _quickselect_partition(arr, left, right)
        if pivot_idx == k:
            return arr[k]
        elif pivot_idx < k:
            left = pivot_idx + 1
        else:
            right = pivot_idx - 1
    return arr[k]


@njit(cache=True)
def compute_sample_stats(
    samples: np.ndarray, scratch: np.ndarray, n: int
) -> tuple[float, float, float, float, float]:
    """Mean, std, min, max and p95 of the first ``n`` samples.

    Single-pass Welford for mean and variance. p95 uses quickselect on the
    scratch copy so ``samples`` keeps its order.
    """
    if n == 0:
        return 0.0, 0.0, 0.0, 0.0, 0.0

    mean = 0.0
    m2 = 0.0
    min_val = samples[0]
    max_val = samples[0]
    for i in range(n):
        x = samples[i]
        delta = x - mean
        mean += delta / (i + 1)
        m2 += delta * (x - mean)
        if x < min_val:
            min_val = x
        if x > max_val:
            max_val = x
    std = math.sqrt(m2 / n)

    if n >= 20:
        for i in range(n):
            scratch[i] = samples[i]
        p95 = _quickselect(scratch[:n], int(n * 0.95))
    else:
        p95 = max_val
    return mean, std, min_val, max_val, p95


class PhaseMetrics:
    """Rolling statistics for a single phase."""

    __slots__ = (
        "_buffer",
        "_scratch",
        "_buffer_idx",
        "_buffer_count",
        "count",
        "last_s",
        "mean_s",
        "std_s",
        "min_s",
        "max_s",
        "p95_s",
    )

    def __init__(self) -> None:
        self._buffer = np.zeros(BUFFER_SIZE, dtype=np.float64)
        self._scratch = np.zeros(BUFFER_SIZE, dtype=np.float64)
        self._buffer_idx = 0
        self._buffer_count = 0
        self.count = 0
        self.last_s = 0.0
        self.mean_s = 0.0
        self.std_s = 0.0
        self.min_s = 0.0
        self.max_s = 0.0
        self.p95_s = 0.0

    def record(self, duration: float) -> None:
        """Record a duration sample."""
        self.last_s = duration
        self.count += 1
        self._buffer[self._buffer_idx] = duration
        self._buffer_idx = (self._buffer_idx + 1) & BUFFER_MASK
        if self._buffer_count < BUFFER_SIZE:
            self._buffer_count += 1

    def compute_stats(self) -> None:
        """Compute statistics from buffer."""
        if self._buffer_count == 0:
            return
        mean, std, min_val, max_val, p95 = compute_sample_stats(
            self._buffer, self._scratch, self._buffer_count
        )
        self.mean_s = mean
        self.std_s = std
        self.min_s = min_val
        self.max_s = max_val
        self.p95_s = p95


class PhaseTimer:
    """Timer for measuring durations of multiple named phases.

    Usage:
        timer = PhaseTimer(["forward", "backward"])
        for _ in range(repeat):
            with timer.phase("forward"):
                run_forward()
            with timer.phase("backward"):
                run_backward()
        stats = timer.summary()

    Phases not declared up front are created on first use.
    """

    def __init__(self, phase_names: list[str] | None = None):
        self._phases: dict[str, PhaseMetrics] = {
            name: PhaseMetrics() for name in phase_names or []
        }
        self._current_phase: str | None = None
        self._phase_start: float = 0.0

    @property
    def phases(self) -> dict[str, PhaseMetrics]:
        """Access phase metrics by name."""
        return self._phases

    def start(self, phase: str) -> None:
        """Start timing a phase."""
        self._current_phase = phase
        self._phase_start = time.perf_counter()

    def stop(self) -> float:
        """Stop timing current phase and record duration. Returns duration."""
        if self._current_phase is None:
            return 0.0
        duration = time.perf_counter() - self._phase_start
        metrics = self._phases.get(self._current_phase)
        if metrics is None:
            metrics = self._phases[self._current_phase] = PhaseMetrics()
        metrics.record(duration)
        self._current_phase = None
        return duration

    def phase(self, name: str) -> "PhaseContext":
        """Context manager for timing a phase."""
        return PhaseContext(self, name)

    def summary(self) -> dict[str, dict[str, float]]:
        """Compute and return per-phase stats in milliseconds."""
        out: dict[str, dict[str, float]] = {}
        for name, p in self._phases.items():
            p.compute_stats()
            out[name] = {
                "count": float(p.count),
                "mean_ms": p.mean_s * 1000,
                "std_ms": p.std_s * 1000,
                "min_ms": p.min_s * 1000,
                "max_ms": p.max_s * 1000,
                "p95_ms": p.p95_s * 1000,
            }
        return out


class PhaseContext:
    """Context manager for timing a phase."""

    __slots__ = ("_timer", "_phase")

    def __init__(self, timer: PhaseTimer, phase: str):
        self._timer = timer
        self._phase = phase

    def __enter__(self) -> "Self":
        self._timer.start(self._phase)
        return self

    def __exit__(self, *args: object) -> None:
        self._timer.stop()


def format_rate_summary(m: PhaseMetrics, work_per_sample: float, unit: str) -> str:
    """Format metrics as 'X.XXe+NN unit/s mean=X.XXms σ=X.XXms p95=X.XXms'."""
    if m.mean_s <= 0:
        return f"0 {unit}/s mean=0.00ms σ=0.00ms p95=0.00ms"
    rate = work_per_sample / m.mean_s
    return (
        f"{rate:.3g} {unit}/s mean={m.mean_s * 1000:.2f}ms "
        f"σ={m.std_s * 1000:.2f}ms p95={m.p95_s * 1000:.2f}ms"
    )
