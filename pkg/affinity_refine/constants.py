import logging
import os
from typing import Any

# Label conventions
NEUTRAL_LABEL = 255
BACKGROUND_CLASS = 0

# Dilation sets for the 3x3 affinity kernels
DEFAULT_KERNELS: tuple[int, ...] = (4, 8, 12, 24)
KERNEL_PRESETS: dict[str, tuple[int, ...]] = {
    "4-8-12-24-36": (4, 8, 12, 24, 36),
    "4-8-12-24": DEFAULT_KERNELS,
    "4-8-12": (4, 8, 12),
    "4-8-16-24": (4, 8, 16, 24),
}
# 4-8-12-24 scaled down for 64x64 desk-scale scenes
TOY_KERNELS: tuple[int, ...] = (1, 2, 4, 8)

# Loss hyperparameters
DEFAULT_MARGIN_M = 3.0
DEFAULT_MARGIN_N = 1.0
DEFAULT_GAMMA = 2.0
DEFAULT_LAMBDA1 = 0.1
DEFAULT_LAMBDA2 = 0.1
DEFAULT_PROB_FLOOR = 1e-8
MAX_PROB_FLOOR = 1e-3
DEFAULT_SIM_EPS = 1e-12

# Training defaults
DEFAULT_TOY_LR = 1e-2
SOURCE_LR = 1e-4
SOURCE_WEIGHT_DECAY = 5e-4
DEFAULT_MOMENTUM = 0.9
DEFAULT_LR_LOSS_LAST_EPOCHS = 2

_LEVELS = {
    "TRACE": 5,
    "DEBUG": logging.DEBUG,
    "INFO": logging.INFO,
    "WARNING": logging.WARNING,
    "ERROR": logging.ERROR,
    "CRITICAL": logging.CRITICAL,
}


def _truthy(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "on")


class _Config:
    """Lazy configuration that reads environment variables at access time.

    This allows tests to set environment variables after module import
    and have them take effect without module cache manipulation.

    Runtime overrides (e.g., from CLI arguments) take precedence over env vars.
    Use config.set('property_name', value) to set overrides.
    """

    def __init__(self) -> None:
        self._overrides: dict[str, Any] = {}

    def set(self, key: str, value: object) -> None:
        """Set a runtime override (e.g., from CLI arguments).

        Args:
            key: Property name (e.g., 'threads', 'log_level')
            value: Override value
        """
        self._overrides[key] = value

    def clear(self) -> None:
        """Drop every runtime override."""
        self._overrides.clear()

    @property
    def log_level(self) -> int:
        """Logging level from AFFREF_LOG_LEVEL env var."""
        if "log_level" in self._overrides:
            return int(self._overrides["log_level"])  # type: ignore[call-overload]
        s = os.getenv("AFFREF_LOG_LEVEL")
        if s:
            return _LEVELS.get(s.strip().upper(), logging.WARNING)
        return logging.WARNING

    @property
    def threads(self) -> int:
        """Worker threads for the parallel pair kernels."""
        if "threads" in self._overrides:
            return max(1, int(self._overrides["threads"]))  # type: ignore[call-overload]
        return max(1, int(os.getenv("AFFREF_THREADS", "1")))

    @property
    def numba_warmup(self) -> bool:
        """Whether the CLI pre-compiles the numba kernels before timing-sensitive work."""
        if "numba_warmup" in self._overrides:
            return bool(self._overrides["numba_warmup"])
        return _truthy(os.getenv("AFFREF_NUMBA_WARMUP", "1"))


config = _Config()
