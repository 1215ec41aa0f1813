"""Tests for logging setup and environment-driven configuration."""

import logging

import pytest

from affinity_refine.common.logging_config import TRACE, StderrFormatter, configure_logging
from affinity_refine.constants import config


@pytest.mark.unit
class TestConfigureLogging:
    def test_single_handler_across_calls(self):
        configure_logging(logging.INFO)
        configure_logging(logging.DEBUG)
        root = logging.getLogger()
        ours = [h for h in root.handlers if isinstance(h.formatter, StderrFormatter)]
        assert len(ours) == 1
        assert root.level == logging.DEBUG

    def test_numba_stays_quiet_at_info(self):
        configure_logging(logging.INFO)
        assert logging.getLogger("numba").level == logging.WARNING
        assert logging.getLogger("numba.core.ssa").getEffectiveLevel() == logging.WARNING
        configure_logging(logging.DEBUG)
        assert logging.getLogger("numba").level == logging.DEBUG
        configure_logging(logging.INFO)

    def test_trace_method(self, caplog):
        logger = logging.getLogger("affinity_refine.test")
        with caplog.at_level(TRACE, logger="affinity_refine.test"):
            logger.trace("fine detail")  # type: ignore[attr-defined]
        assert caplog.records[0].levelname == "TRACE"

    def test_plain_formatter(self):
        record = logging.LogRecord("x", logging.WARNING, __file__, 1, "hello", None, None)
        text = StderrFormatter(colored=False).format(record)
        assert text.endswith("WARNING x: hello")


@pytest.mark.unit
class TestConfig:
    def test_env_and_overrides(self, monkeypatch):
        monkeypatch.setenv("AFFREF_LOG_LEVEL", "debug")
        monkeypatch.setenv("AFFREF_THREADS", "3")
        assert config.log_level == logging.DEBUG
        assert config.threads == 3
        config.set("threads", 2)
        assert config.threads == 2
        config.clear()
        assert config.threads == 3

    def test_defaults(self, monkeypatch):
        for name in ("AFFREF_LOG_LEVEL", "AFFREF_THREADS", "AFFREF_NUMBA_WARMUP"):
            monkeypatch.delenv(name, raising=False)
        assert config.log_level == logging.WARNING
        assert config.threads == 1
        assert config.numba_warmup is True

    def test_unknown_level_falls_back(self, monkeypatch):
        monkeypatch.setenv("AFFREF_LOG_LEVEL", "loud")
        assert config.log_level == logging.WARNING
