"""Tests for phase timing statistics."""

import numpy as np
import pytest

from affinity_refine.common.timing import PhaseMetrics, PhaseTimer, compute_sample_stats, format_rate_summary


@pytest.mark.unit
class TestSampleStats:
    def test_small_sample_uses_max_for_p95(self):
        samples = np.array([1.0, 2.0, 3.0, 4.0])
        mean, std, lo, hi, p95 = compute_sample_stats(samples, np.zeros(4), 4)
        assert mean == pytest.approx(2.5)
        assert std == pytest.approx(np.std(samples))
        assert (lo, hi, p95) == (1.0, 4.0, 4.0)

    def test_p95_with_enough_samples(self):
        samples = np.arange(100, dtype=np.float64)[::-1].copy()
        *_, p95 = compute_sample_stats(samples, np.zeros(100), 100)
        assert p95 == 95.0
        assert samples[0] == 99.0

    def test_empty(self):
        assert compute_sample_stats(np.zeros(4), np.zeros(4), 0) == (0.0, 0.0, 0.0, 0.0, 0.0)


@pytest.mark.unit
class TestPhaseTimer:
    def test_phases_record_and_summarise(self):
        timer = PhaseTimer(["a"])
        for _ in range(3):
            with timer.phase("a"):
                pass
        with timer.phase("late"):
            pass
        summary = timer.summary()
        assert set(summary) == {"a", "late"}
        assert summary["a"]["count"] == 3.0
        assert summary["a"]["min_ms"] <= summary["a"]["mean_ms"] <= summary["a"]["max_ms"]

    def test_stop_without_start(self):
        assert PhaseTimer().stop() == 0.0

    def test_rate_summary(self):
        m = PhaseMetrics()
        assert format_rate_summary(m, 100, "pairs").startswith("0 pairs/s")
        m.record(0.5)
        m.compute_stats()
        assert format_rate_summary(m, 100, "pairs").startswith("200 pairs/s mean=500.00ms")
