"""Deterministic synthetic scenes with corrupted pseudo-labels.

A scene is a background with 1-3 ellipses / rectangles of foreground classes.
Pseudo-labels keep only the eroded core of every class region (the eroded
rim becomes neutral). In ``ambiguity`` mode a fraction of the core's boundary
band is flipped to the class of the nearest differently-labelled ground-truth
pixel. Confidence rises linearly with distance to the nearest class boundary.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import xxhash
from scipy import ndimage

from affinity_refine.common.logging_config import TRACE_ENABLED
from affinity_refine.constants import NEUTRAL_LABEL
from affinity_refine.errors import ArgumentError, FormatError, GenerationError
from affinity_refine.tensor_core import (
    DenseTensor,
    LabelMap,
    Rng,
    labelmap_read_pgm,
    labelmap_write_pgm,
    tensor_read,
    tensor_write,
)

logger = logging.getLogger(__name__)

AMBIGUITY_FLIP_RATE = 0.15
MIN_SHAPE_AREA = 25
MAX_SHAPE_ATTEMPTS = 64
CONF_NOISE = 0.05
_STRUCTURE = np.ones((3, 3), dtype=bool)


class Corruption(Enum):
    """IDEAL: pseudo-labels agree with ground truth wherever they are set.
    AMBIGUITY: part of the boundary band is relabelled to a neighbouring class.
    """

    IDEAL = "ideal"
    AMBIGUITY = "ambiguity"


def voc_palette_color(cls: int) -> tuple[float, float, float]:
    """Pascal-style bit-interleaved palette colour in [0, 1]."""
    r = g = b = 0
    c = cls
    for shift in range(7, -1, -1):
        r |= (c & 1) << shift
        g |= ((c >> 1) & 1) << shift
        b |= ((c >> 2) & 1) << shift
        c >>= 3
    return r / 255.0, g / 255.0, b / 255.0


@dataclass(slots=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    num_shapes: int = 2
    classes: tuple[int, ...] = (1, 2)  # foreground classes, cycled over the shapes
    corruption: Corruption = Corruption.AMBIGUITY
    neutral_band: int = 3
    flip_rate: float | None = None  # None -> 0.15 for ambiguity, 0 for ideal
    conf_decay: float = 4.0
    noise: float = 0.25  # image noise sigma
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.corruption, str):
            try:
                self.corruption = Corruption(self.corruption.lower())
            except ValueError:
                raise ArgumentError(
                    f"corruption must be 'ideal' or 'ambiguity', got {self.corruption!r}"
                ) from None
        self.classes = tuple(int(c) for c in self.classes)
        if self.height < 8 or self.width < 8:
            raise ArgumentError(f"scene must be at least 8x8, got {self.height}x{self.width}")
        if not 2 <= self.num_classes < NEUTRAL_LABEL:
            raise ArgumentError(f"num_classes must be in [2, {NEUTRAL_LABEL - 1}], got {self.num_classes}")
        if not 1 <= self.num_shapes <= 3:
            raise ArgumentError(f"num_shapes must be in [1, 3], got {self.num_shapes}")
        if not self.classes or any(not 1 <= c < self.num_classes for c in self.classes):
            raise ArgumentError(
                f"classes must be a non-empty subset of [1, {self.num_classes}), got {list(self.classes)}"
            )
        if self.neutral_band < 0:
            raise ArgumentError(f"neutral_band must be >= 0, got {self.neutral_band}")
        if self.flip_rate is not None:
            if not 0.0 <= self.flip_rate <= 1.0:
                raise ArgumentError(f"flip_rate must be in [0, 1], got {self.flip_rate}")
            if self.corruption is Corruption.IDEAL and self.flip_rate != 0.0:
                raise ArgumentError("flip_rate must be 0 in ideal mode")
        if not self.conf_decay > 0:
            raise ArgumentError(f"conf_decay must be > 0, got {self.conf_decay}")
        if self.noise < 0:
            raise ArgumentError(f"noise must be >= 0, got {self.noise}")

    @property
    def effective_flip_rate(self) -> float:
        if self.flip_rate is not None:
            return self.flip_rate
        return AMBIGUITY_FLIP_RATE if self.corruption is Corruption.AMBIGUITY else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "num_shapes": self.num_shapes,
            "classes": list(self.classes),
            "corruption": self.corruption.value,
            "neutral_band": self.neutral_band,
            "flip_rate": self.flip_rate,
            "conf_decay": self.conf_decay,
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SceneSpec:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ArgumentError(f"unknown scene spec key(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> SceneSpec:
        return cls.from_dict(_load_json(path))


@dataclass(slots=True)
class SceneInstance:
    spec: SceneSpec
    image: DenseTensor  # (H, W, 3)
    gt: LabelMap
    pseudo: LabelMap
    conf: DenseTensor  # (H, W)
    image_labels: np.ndarray  # multi-hot (num_classes,)
    band_size: int = 0
    flipped: int = 0
    stats: dict[str, Any] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def fingerprint(self) -> str:
        """xxh64 over every array of the instance."""
        h = xxhash.xxh64()
        for arr in (self.image.data, self.gt.labels, self.pseudo.labels, self.conf.data, self.image_labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def pseudo_error_count(self) -> int:
        """Non-neutral pseudo-labels that disagree with ground truth."""
        labelled = self.pseudo.labels != NEUTRAL_LABEL
        return int(np.count_nonzero(labelled & (self.pseudo.labels != self.gt.labels)))


def _shape_mask(rng: Rng, h: int, w: int) -> np.ndarray:
    short = min(h, w)
    lo = max(3, short // 8)
    hi = max(lo + 1, short // 3)
    ry = lo + rng.integers(hi - lo)
    rx = lo + rng.integers(hi - lo)
    cy = ry + rng.integers(max(1, h - 2 * ry))
    cx = rx + rng.integers(max(1, w - 2 * rx))
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.integers(2) == 0:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def _place_shapes(spec: SceneSpec, rng: Rng) -> np.ndarray:
    gt = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for s in range(spec.num_shapes):
        cls = spec.classes[s % len(spec.classes)]
        for attempt in range(MAX_SHAPE_ATTEMPTS):
            visible = _shape_mask(rng, spec.height, spec.width) & (gt == 0)
            # every class region including the background keeps a usable area
            if visible.sum() >= MIN_SHAPE_AREA and (gt == 0).sum() - visible.sum() >= MIN_SHAPE_AREA:
                gt[visible] = cls
                if TRACE_ENABLED:
                    logger.trace("shape %d class %d placed after %d attempt(s)", s, cls, attempt + 1)  # type: ignore[attr-defined]
                break
        else:
            raise GenerationError(
                f"could not place shape {s} (class {cls}) with area >= {MIN_SHAPE_AREA} "
                f"in {spec.height}x{spec.width} after {MAX_SHAPE_ATTEMPTS} attempts"
            )
    return gt


def _erode(mask: np.ndarray, iterations: int) -> np.ndarray:
    if iterations <= 0:
        return mask.copy()
    # border_value=1: the image edge is not a class boundary
    return ndimage.binary_erosion(mask, structure=_STRUCTURE, iterations=iterations, border_value=1)


def _boundary_distance(gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance to the nearest pixel of another class, and that pixel's class."""
    dist = np.full(gt.shape, np.inf)
    nearest_cls = np.full(gt.shape, NEUTRAL_LABEL, dtype=np.uint8)
    for k in np.unique(gt):
        region = gt == k
        if region.all():
            continue
        d, idx = ndimage.distance_transform_edt(region, return_indices=True)
        dist[region] = d[region]
        nearest_cls[region] = gt[idx[0][region], idx[1][region]]
    return dist, nearest_cls


def generate(spec: SceneSpec) -> SceneInstance:
    """Build the scene for ``spec``. Identical specs give identical instances."""
    rng = Rng(spec.seed)
    shape_rng, flip_rng, conf_rng, image_rng = rng.spawn(), rng.spawn(), rng.spawn(), rng.spawn()
    gt = _place_shapes(spec, shape_rng)

    pseudo = np.full(gt.shape, NEUTRAL_LABEL, dtype=np.uint8)
    band = np.zeros(gt.shape, dtype=bool)
    for k in np.unique(gt):
        core = _erode(gt == k, spec.neutral_band)
        pseudo[core] = k
        band |= core & ~_erode(core, max(spec.neutral_band, 1))

    dist, nearest_cls = _boundary_distance(gt)
    band &= nearest_cls != NEUTRAL_LABEL
    band_pixels = np.flatnonzero(band)
    n_flip = math.floor(spec.effective_flip_rate * band_pixels.size)
    if n_flip:
        chosen = band_pixels[flip_rng.sample(band_pixels.size, n_flip)]
        pseudo.reshape(-1)[chosen] = nearest_cls.reshape(-1)[chosen]

    finite = np.where(np.isfinite(dist), dist, spec.conf_decay)
    conf = np.clip(finite / spec.conf_decay, 0.0, 1.0)
    conf = np.clip(conf + conf_rng.uniform_array(conf.shape, -CONF_NOISE, CONF_NOISE), 0.0, 1.0)

    palette = np.array([voc_palette_color(c) for c in range(spec.num_classes)])
    image = palette[gt] + image_rng.normal_array((spec.height, spec.width, 3), scale=spec.noise)

    image_labels = np.zeros(spec.num_classes, dtype=np.float64)
    image_labels[np.unique(gt)] = 1.0

    instance = SceneInstance(
        spec=spec,
        image=DenseTensor.from_array(image),
        gt=LabelMap.from_array(gt),
        pseudo=LabelMap.from_array(pseudo),
        conf=DenseTensor.from_array(conf),
        image_labels=image_labels,
        band_size=int(band_pixels.size),
        flipped=int(n_flip),
    )
    instance.stats = {
        "band_size": instance.band_size,
        "flipped": instance.flipped,
        "neutral_fraction": float(np.mean(pseudo == NEUTRAL_LABEL)),
        "pseudo_errors": instance.pseudo_error_count(),
        "fingerprint": instance.fingerprint(),
    }
    logger.info(
        "generated scene seed=%d %dx%d band=%d flipped=%d",
        spec.seed, spec.height, spec.width, instance.band_size, instance.flipped,
    )
    return instance


def _load_json(path: str | Path) -> dict[str, Any]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e.msg}", offset=e.pos) from e
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object", offset=0)
    return data


def write_scene(instance: SceneInstance, out_dir: str | Path) -> Path:
    """Write image.dten, gt.pgm, pseudo.pgm, conf.dten, labels.json and spec.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensor_write(instance.image, out / "image.dten")
    labelmap_write_pgm(instance.gt, out / "gt.pgm")
    labelmap_write_pgm(instance.pseudo, out / "pseudo.pgm")
    tensor_write(instance.conf, out / "conf.dten")
    labels = {
        "num_classes": instance.num_classes,
        "image_labels": [int(v) for v in instance.image_labels],
        "classes_present": [int(c) for c in np.flatnonzero(instance.image_labels)],
        **{k: v for k, v in instance.stats.items()},
    }
    (out / "labels.json").write_text(json.dumps(labels, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "spec.json").write_text(json.dumps(instance.spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_scene(scene_dir: str | Path) -> SceneInstance:
    src = Path(scene_dir)
    spec = SceneSpec.load(src / "spec.json")
    labels = _load_json(src / "labels.json")
    image_labels = np.asarray(labels.get("image_labels", []), dtype=np.float64)
    if image_labels.shape != (spec.num_classes,):
        raise FormatError(
            f"{src / 'labels.json'}: image_labels must have {spec.num_classes} entries", offset=0
        )
    stats = {k: v for k, v in labels.items() if k not in ("num_classes", "image_labels", "classes_present")}
    return SceneInstance(
        spec=spec,
        image=tensor_read(src / "image.dten"),
        gt=labelmap_read_pgm(src / "gt.pgm"),
        pseudo=labelmap_read_pgm(src / "pseudo.pgm"),
        conf=tensor_read(src / "conf.dten"),
        image_labels=image_labels,
        band_size=int(stats.get("band_size", 0)),
        flipped=int(stats.get("flipped", 0)),
        stats=stats,
    )
