"""Logging setup: a TRACE level below DEBUG and one stderr handler.

stdout carries the JSON reports, so log records always go to stderr.
"""

import logging
import os
import sys
from typing import Any

TRACE = 5
logging.addLevelName(TRACE, "TRACE")

# Hot loops only build trace messages when AFFREF_TRACE is set
TRACE_ENABLED = os.getenv("AFFREF_TRACE", "0").strip().lower() in ("1", "true", "yes", "on")

# JIT compiler loggers; their children have no level of their own and inherit it
COMPILER_LOGGERS = ("numba",)

_LEVEL_STYLES = {
    TRACE: "\033[32m",
    logging.DEBUG: "\033[36m",
    logging.WARNING: "\033[33m",
    logging.ERROR: "\033[31m",
    logging.CRITICAL: "\033[1;41m",
}
_RESET = "\033[0m"
_DIM = "\033[2m"


def _trace(self: logging.Logger, msg: object, *args: object, **kwargs: Any) -> None:
    if self.isEnabledFor(TRACE):
        self._log(TRACE, msg, args, **kwargs)


if not hasattr(logging.Logger, "trace"):
    logging.Logger.trace = _trace  # type: ignore[attr-defined]  # ty: ignore[unresolved-attribute]


class StderrFormatter(logging.Formatter):
    """``HH:MM:SS LEVEL logger: message``; on a terminal the time is dimmed and the level coloured."""

    def __init__(self, colored: bool = True) -> None:
        super().__init__(fmt="%(asctime)s %(levelname)s %(name)s: %(message)s", datefmt="%H:%M:%S")
        self.colored = colored and sys.stderr.isatty()

    def formatMessage(self, record: logging.LogRecord) -> str:
        if not self.colored:
            return super().formatMessage(record)
        style = _LEVEL_STYLES.get(record.levelno)
        level = f"{style}{record.levelname}{_RESET}" if style else record.levelname
        return f"{_DIM}{record.asctime}{_RESET} {level} {record.name}: {record.message}"


def _stderr_handler(root: logging.Logger) -> logging.Handler | None:
    for handler in root.handlers:
        if isinstance(handler.formatter, StderrFormatter):
            return handler
    return None


def configure_logging(level: int = logging.WARNING, use_color: bool = True) -> logging.Logger:
    """Attach the stderr handler to the root logger once and set ``level``.

    Repeated calls only change the level. The compiler loggers stay at
    WARNING or above unless DEBUG or TRACE is requested.
    """
    root = logging.getLogger()
    root.setLevel(level)
    handler = _stderr_handler(root)
    if handler is None:
        handler = logging.StreamHandler(stream=sys.stderr)
        handler.setFormatter(StderrFormatter(colored=use_color))
        root.addHandler(handler)
    handler.setLevel(level)

    compiler_level = level if level < logging.INFO else max(level, logging.WARNING)
    for name in COMPILER_LOGGERS:
        logging.getLogger(name).setLevel(compiler_level)
    return root
