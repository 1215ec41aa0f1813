"""Dense tensors, label maps, the seeded PRNG and their file formats.

Layout is row-major with channel-last indexing ``(h, w, c)`` everywhere.
Storage is float32; every loss accumulates in float64.

DTEN (little-endian)::

    offset 0   magic   b"DTEN"
    offset 4   version u8 = 1
    offset 5   dtype   u8 = 1 (f32)
    offset 6   ndim    u8
    offset 7   dims    ndim x u32
    then       payload product(dims) x f32

Label maps are binary PGM (``P5``) with maxval 255; value 255 is the neutral
sentinel and never contributes to a loss.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from affinity_refine.constants import NEUTRAL_LABEL
from affinity_refine.errors import ArgumentError, FormatError, ValidationError

logger = logging.getLogger(__name__)

DTEN_MAGIC = b"DTEN"
DTEN_VERSION = 1
DTEN_DTYPE_F32 = 1
_HEADER = struct.Struct("<4sBBB")
_MAX_OFFENDERS_IN_MESSAGE = 10


# =============================================================================
# DenseTensor
# =============================================================================


@dataclass(frozen=True, slots=True, eq=False)
class DenseTensor:
    """Immutable row-major float32 tensor.

    ``data`` is a flat, read-only float32 array; ``dims`` are all positive and
    multiply to ``data.size``. Equality is bit equality of the payload.
    """

    dims: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        if len(self.dims) == 0:
            raise ArgumentError("tensor must have at least one dimension")
        for d in self.dims:
            if int(d) <= 0:
                raise ArgumentError(f"tensor dims must be positive, got {list(self.dims)}")
        if self.data.dtype != np.float32 or self.data.ndim != 1:
            raise ArgumentError("tensor payload must be a flat float32 array")
        if math.prod(self.dims) != self.data.size:
            raise ArgumentError(
                f"dims {list(self.dims)} hold {math.prod(self.dims)} values, payload has {self.data.size}"
            )
        bad = ~np.isfinite(self.data)
        if bad.any():
            flat = np.flatnonzero(bad)[:_MAX_OFFENDERS_IN_MESSAGE]
            offenders = [tuple(int(v) for v in np.unravel_index(i, self.dims)) for i in flat]
            raise ValidationError(
                f"tensor has {int(bad.sum())} non-finite values, first at {offenders[0]}",
                offenders,
            )

    @classmethod
    def from_array(cls, array: np.ndarray | list[float]) -> DenseTensor:
        """Copy ``array`` into a new tensor, casting to float32."""
        arr = np.asarray(array)
        if arr.ndim == 0:
            raise ArgumentError("tensor must have at least one dimension")
        flat = np.ascontiguousarray(arr, dtype=np.float32).reshape(-1).copy()
        flat.flags.writeable = False
        return cls(tuple(int(d) for d in arr.shape), flat)

    @property
    def array(self) -> np.ndarray:
        """Read-only view shaped by ``dims``."""
        return self.data.reshape(self.dims)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.dims

    def to_float64(self) -> np.ndarray:
        """Writable float64 copy shaped by ``dims``."""
        return self.array.astype(np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )


def as_float64(x: DenseTensor | np.ndarray) -> np.ndarray:
    """float64 view/copy of a tensor or array for loss accumulation."""
    if isinstance(x, DenseTensor):
        return x.to_float64()
    return np.asarray(x, dtype=np.float64)


def tensor_to_bytes(t: DenseTensor) -> bytes:
    """Serialize ``t`` to DTEN bytes."""
    if len(t.dims) > 255:
        raise ArgumentError(f"DTEN supports at most 255 dims, got {len(t.dims)}")
    header = _HEADER.pack(DTEN_MAGIC, DTEN_VERSION, DTEN_DTYPE_F32, len(t.dims))
    dims = struct.pack(f"<{len(t.dims)}I", *t.dims)
    return header + dims + t.data.astype("<f4", copy=False).tobytes()


def tensor_from_bytes(buf: bytes) -> DenseTensor:
    """Parse DTEN bytes. Raises FormatError naming the offending byte offset."""
    if len(buf) < _HEADER.size:
        raise FormatError("truncated DTEN header", offset=len(buf))
    magic, version, dtype, ndim = _HEADER.unpack_from(buf, 0)
    if magic != DTEN_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DTEN_MAGIC!r}", offset=0)
    if version != DTEN_VERSION:
        raise FormatError(f"unsupported DTEN version {version}", offset=4)
    if dtype != DTEN_DTYPE_F32:
        raise FormatError(f"unsupported DTEN dtype {dtype}", offset=5)
    if ndim == 0:
        raise FormatError("DTEN ndim must be at least 1", offset=6)
    dims_end = _HEADER.size + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError("truncated DTEN dims", offset=len(buf))
    dims = struct.unpack_from(f"<{ndim}I", buf, _HEADER.size)
    for k, d in enumerate(dims):
        if d == 0:
            raise FormatError(f"DTEN dim {k} is zero", offset=_HEADER.size + 4 * k)
    expected_end = dims_end + 4 * math.prod(dims)
    if len(buf) < expected_end:
        raise FormatError(
            f"truncated DTEN payload: need {expected_end} bytes, have {len(buf)}",
            offset=len(buf),
        )
    if len(buf) > expected_end:
        raise FormatError(f"{len(buf) - expected_end} trailing bytes after payload", offset=expected_end)
    data = np.frombuffer(buf, dtype="<f4", offset=dims_end).astype(np.float32)
    data.flags.writeable = False
    return DenseTensor(tuple(int(d) for d in dims), data)


def tensor_read(path: str | Path) -> DenseTensor:
    """Read a DTEN file."""
    raw = Path(path).read_bytes()
    t = tensor_from_bytes(raw)
    logger.debug("read tensor %s dims=%s", path, list(t.dims))
    return t


def tensor_write(t: DenseTensor, path: str | Path) -> None:
    """Write ``t`` as DTEN. I/O errors propagate."""
    Path(path).write_bytes(tensor_to_bytes(t))
    logger.debug("wrote tensor %s dims=%s", path, list(t.dims))


# =============================================================================
# LabelMap
# =============================================================================


@dataclass(frozen=True, slots=True, eq=False)
class LabelMap:
    """Immutable H x W map of uint8 class indices; 255 is neutral."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.labels.ndim != 2 or self.labels.dtype != np.uint8:
            raise ArgumentError("label map must be a 2-D uint8 array")
        if self.labels.shape[0] == 0 or self.labels.shape[1] == 0:
            raise ArgumentError(f"label map must be non-empty, got {self.labels.shape}")

    @classmethod
    def from_array(cls, array: np.ndarray | list[list[int]]) -> LabelMap:
        arr = np.asarray(array)
        if arr.ndim != 2:
            raise ArgumentError(f"label map must be 2-D, got {arr.ndim}-D")
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ArgumentError("label values must lie in [0, 255]")
        labels = np.ascontiguousarray(arr, dtype=np.uint8).copy()
        labels.flags.writeable = False
        return cls(labels)

    @classmethod
    def full(cls, height: int, width: int, value: int) -> LabelMap:
        return cls.from_array(np.full((height, width), value, dtype=np.uint8))

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def labeled(self) -> np.ndarray:
        """Boolean mask of non-neutral pixels."""
        return self.labels != NEUTRAL_LABEL

    def classes_present(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels) if v != NEUTRAL_LABEL]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelMap):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


def validate_labels(labels: LabelMap, num_classes: int) -> None:
    """Raise ValidationError listing every non-neutral value >= ``num_classes``."""
    if not 1 <= num_classes <= NEUTRAL_LABEL:
        raise ArgumentError(f"num_classes must be in [1, {NEUTRAL_LABEL}], got {num_classes}")
    arr = labels.labels
    bad = (arr != NEUTRAL_LABEL) & (arr >= num_classes)
    if not bad.any():
        return
    offenders = [(int(r), int(c)) for r, c in np.argwhere(bad)]
    shown = ", ".join(
        f"({r},{c})={int(arr[r, c])}" for r, c in offenders[:_MAX_OFFENDERS_IN_MESSAGE]
    )
    more = "" if len(offenders) <= _MAX_OFFENDERS_IN_MESSAGE else f" (+{len(offenders) - _MAX_OFFENDERS_IN_MESSAGE} more)"
    raise ValidationError(
        f"{len(offenders)} label(s) not < {num_classes} and not neutral: {shown}{more}",
        offenders,
    )


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments.

    Returns the tokens and the offset just past the last token.
    """
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos : pos + 1].isspace() or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < n and buf[pos] not in (10, 13):
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise FormatError("truncated PGM header", offset=pos)
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos] != ord("#"):
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos


def labelmap_from_pgm_bytes(buf: bytes) -> LabelMap:
    if buf[:2] == b"P2":
        raise FormatError("ascii PGM (P2) is not supported, expected binary P5", offset=0)
    if buf[:2] != b"P5":
        raise FormatError(f"bad PGM magic {buf[:2]!r}, expected b'P5'", offset=0)
    tokens, pos = _pgm_tokens(buf, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"non-numeric PGM header field in {tokens[1:]!r}", offset=2) from None
    if width <= 0 or height <= 0:
        raise FormatError(f"PGM size must be positive, got {width}x{height}", offset=2)
    if maxval != 255:
        raise FormatError(f"PGM maxval must be 255, got {maxval}", offset=pos - len(tokens[3]))
    # exactly one whitespace byte separates header and raster
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", offset=pos)
    raster_start = pos + 1
    expected_end = raster_start + width * height
    if len(buf) < expected_end:
        raise FormatError(
            f"truncated PGM raster: need {width * height} bytes, have {len(buf) - raster_start}",
            offset=len(buf),
        )
    if len(buf) > expected_end:
        raise FormatError(f"{len(buf) - expected_end} trailing bytes after PGM raster", offset=expected_end)
    raster = np.frombuffer(buf, dtype=np.uint8, count=width * height, offset=raster_start)
    return LabelMap.from_array(raster.reshape(height, width))


def labelmap_to_pgm_bytes(labels: LabelMap) -> bytes:
    header = f"P5\n{labels.width} {labels.height}\n255\n".encode("ascii")
    return header + labels.labels.tobytes()


def labelmap_read_pgm(path: str | Path) -> LabelMap:
    """Read a binary PGM label map. Values are preserved exactly."""
    return labelmap_from_pgm_bytes(Path(path).read_bytes())


def labelmap_write_pgm(labels: LabelMap, path: str | Path) -> None:
    Path(path).write_bytes(labelmap_to_pgm_bytes(labels))


# =============================================================================
# Rng (SplitMix64)
# =============================================================================

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_POW_M53 = 2.0**-53


class Rng:
    """SplitMix64 generator (Steele, Lea and Flood; the JDK ``SplittableRandom`` mixer).

    ``state`` advances by the golden gamma 0x9E3779B97F4A7C15 per draw and each
    draw is the 64-bit finaliser of the new state. Floats take the top 53
    bits: ``uniform() = (u >> 11) * 2**-53``. Array draws are vectorised on
    numpy uint64 but consume the stream exactly like repeated ``next_u64()``.
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int) -> None:
        self._state = int(seed) & MASK64

    @property
    def state(self) -> int:
        return self._state

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN_GAMMA) & MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & MASK64
        return z ^ (z >> 31)

    def u64_array(self, n: int) -> np.ndarray:
        """Next ``n`` draws as a uint64 array."""
        if n < 0:
            raise ArgumentError(f"draw count must be non-negative, got {n}")
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self._state) + steps * np.uint64(_GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GOLDEN_GAMMA) & MASK64
        return z

    def uniform(self) -> float:
        """Float in [0, 1)."""
        return (self.next_u64() >> 11) * _TWO_POW_M53

    def uniform_array(self, shape: int | tuple[int, ...], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape_t = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape_t)
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        return (low + (high - low) * u).reshape(shape_t)

    def integers(self, high: int) -> int:
        """Integer in [0, high) by modulo reduction."""
        if high <= 0:
            raise ArgumentError(f"integer bound must be positive, got {high}")
        return self.next_u64() % high

    def integers_array(self, shape: int | tuple[int, ...], high: int) -> np.ndarray:
        if high <= 0:
            raise ArgumentError(f"integer bound must be positive, got {high}")
        shape_t = (shape,) if isinstance(shape, int) else tuple(shape)
        draws = self.u64_array(math.prod(shape_t)) % np.uint64(high)
        return draws.astype(np.int64).reshape(shape_t)

    def normal_array(self, shape: int | tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        """Standard normals by Box-Muller on pairs of uniforms."""
        shape_t = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape_t)
        half = (n + 1) // 2
        u = self.uniform_array(2 * half).reshape(half, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1).reshape(-1)
        return (scale * z[:n]).reshape(shape_t)

    def sample(self, population: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(population)`` by partial Fisher-Yates."""
        if not 0 <= k <= population:
            raise ArgumentError(f"cannot sample {k} of {population}")
        pool = np.arange(population, dtype=np.int64)
        for i in range(k):
            j = i + self.integers(population - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()

    def spawn(self) -> Rng:
        """Child generator seeded from the next draw."""
        return Rng(self.next_u64())
