"""Confidence-weighted class centroids, cosine reassignment and the label reassign loss.

Each labelled pixel embedding is compared with every class centroid by cosine
similarity and assigned to the most similar one (ties to the lowest class).
With ``s_a`` the similarity to the assigned centroid and ``s_j`` the others,
the pixel contributes

    alpha * sum_{j != a} max(0, n + s_j - s_a)

where ``alpha = (1 - (s'_a - s'_b) / (s'_a + s'_b)) ** gamma`` uses the best and
runner-up similarities shifted to ``s' = (1 + s) / 2``. Pixels assigned to the
background form one part and all others the second; the loss is the sum of
the two part means.

Centroids, assignment and alpha are constants of the step: the gradient is
taken w.r.t. the embeddings with those held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Any

import numpy as np

from affinity_refine.constants import (
    BACKGROUND_CLASS,
    DEFAULT_GAMMA,
    DEFAULT_MARGIN_N,
    DEFAULT_SIM_EPS,
    NEUTRAL_LABEL,
)
from affinity_refine.errors import ArgumentError, LrUndefinedError
from affinity_refine.losses.report import LossReport
from affinity_refine.tensor_core import DenseTensor, LabelMap, as_float64

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class LrConfig:
    margin_n: float = DEFAULT_MARGIN_N
    gamma: float = DEFAULT_GAMMA
    sim_eps: float = DEFAULT_SIM_EPS

    def __post_init__(self) -> None:
        if not self.margin_n > 0:
            raise ArgumentError(f"margin_n must be > 0, got {self.margin_n}")
        if not self.gamma >= 0:
            raise ArgumentError(f"gamma must be >= 0, got {self.gamma}")
        if not self.sim_eps > 0:
            raise ArgumentError(f"sim_eps must be > 0, got {self.sim_eps}")

    def to_dict(self) -> dict[str, Any]:
        return {"margin_n": self.margin_n, "gamma": self.gamma, "sim_eps": self.sim_eps}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LrConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ArgumentError(f"unknown lr_loss config key(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass(frozen=True, slots=True)
class CentroidSet:
    """One centroid row per class that has labelled pixels, classes ascending."""

    classes: tuple[int, ...]
    centroids: np.ndarray  # (K, C1) float64
    counts: np.ndarray  # members per class
    weights: np.ndarray  # sum of beta per class

    def __len__(self) -> int:
        return len(self.classes)

    def centroid(self, cls: int) -> np.ndarray:
        return self.centroids[self.classes.index(cls)]

    def normalized(self, eps: float) -> np.ndarray:
        norms = np.maximum(np.linalg.norm(self.centroids, axis=1), eps)
        return self.centroids / norms[:, None]


@dataclass(frozen=True, slots=True)
class Reassignment:
    """Per labelled pixel (row-major order) assignment and modulation factor."""

    height: int
    width: int
    pixels: np.ndarray  # flat indices of labelled pixels
    classes: tuple[int, ...]
    original: np.ndarray  # pseudo label per pixel
    assigned_index: np.ndarray  # column into ``classes``
    similarity: np.ndarray  # (N, K) cosine similarities
    s_best: np.ndarray
    s_second: np.ndarray
    alpha: np.ndarray

    @property
    def assigned(self) -> np.ndarray:
        return np.asarray(self.classes, dtype=np.uint8)[self.assigned_index]

    @property
    def fg_mask(self) -> np.ndarray:
        return self.assigned != BACKGROUND_CLASS

    @property
    def changed(self) -> int:
        return int(np.count_nonzero(self.assigned != self.original))

    def counts(self) -> tuple[int, int]:
        """(|E_bg|, |E_fg|)."""
        fg = int(np.count_nonzero(self.fg_mask))
        return int(self.pixels.size) - fg, fg

    def to_label_map(self) -> LabelMap:
        """Reassigned labels; neutral pixels stay neutral."""
        out = np.full(self.height * self.width, NEUTRAL_LABEL, dtype=np.uint8)
        out[self.pixels] = self.assigned
        return LabelMap.from_array(out.reshape(self.height, self.width))


@dataclass(slots=True)
class LrReport(LossReport):
    centroids: CentroidSet | None = None
    reassignment: Reassignment | None = None

    @property
    def l_minus(self) -> float:
        return self.terms["l_minus"]

    @property
    def l_plus(self) -> float:
        return self.terms["l_plus"]


def _embed_and_conf(
    embed: DenseTensor | np.ndarray, labels: LabelMap, conf: DenseTensor | np.ndarray | None
) -> tuple[np.ndarray, np.ndarray | None]:
    e = as_float64(embed)
    if e.ndim != 3 or e.shape[:2] != (labels.height, labels.width):
        raise ArgumentError(
            f"embeddings must be {labels.height} x {labels.width} x C1, got {e.shape}"
        )
    if conf is None:
        return e, None
    v = as_float64(conf)
    if v.ndim == 3 and v.shape[2] == 1:
        v = v[:, :, 0]
    if v.shape != (labels.height, labels.width):
        raise ArgumentError(f"conf must be {labels.height} x {labels.width}, got {v.shape}")
    if v.min() < 0.0 or v.max() > 1.0:
        raise ArgumentError(f"confidence must be in [0, 1], got range [{v.min():.6g}, {v.max():.6g}]")
    return e, v


def compute_centroids(
    embed: DenseTensor | np.ndarray, labels: LabelMap, conf: DenseTensor | np.ndarray
) -> CentroidSet:
    """beta-weighted mean embedding per pseudo-label class (beta = confidence).

    The normaliser is the total weight of the class's own members. A class whose
    members all have zero weight falls back to the unweighted mean.
    """
    e, v = _embed_and_conf(embed, labels, conf)
    assert v is not None
    lab = labels.labels
    classes = labels.classes_present()
    if len(classes) < 2:
        raise LrUndefinedError(
            f"LR loss undefined: need at least 2 classes with labelled pixels, got {len(classes)}"
        )
    rows, counts, weights = [], [], []
    for k in classes:
        mask = lab == k
        x = e[mask]
        beta = v[mask]
        total = float(beta.sum())
        if total > 0.0:
            rows.append((beta[:, None] * x).sum(axis=0) / total)
        else:
            logger.debug("class %d has zero total confidence; using unweighted mean", k)
            rows.append(x.mean(axis=0))
        counts.append(x.shape[0])
        weights.append(total)
    return CentroidSet(
        classes=tuple(classes),
        centroids=np.stack(rows),
        counts=np.asarray(counts, dtype=np.int64),
        weights=np.asarray(weights, dtype=np.float64),
    )


def cosine_sim(a: np.ndarray | list[float], b: np.ndarray | list[float], eps: float = DEFAULT_SIM_EPS) -> float:
    """a . b / (max(|a|, eps) * max(|b|, eps)), clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"cosine_sim needs equal shapes, got {a.shape} and {b.shape}")
    denom = max(float(np.linalg.norm(a)), eps) * max(float(np.linalg.norm(b)), eps)
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def similarity_matrix(x: np.ndarray, c_hat: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarities (N, K) of rows of ``x`` to unit centroids, and the clamped row norms."""
    nx = np.maximum(np.linalg.norm(x, axis=1), eps)
    return (x @ c_hat.T) / nx[:, None], nx


def modulation(s_best: np.ndarray, s_second: np.ndarray, gamma: float) -> np.ndarray:
    """alpha from best / runner-up similarities shifted into [0, 1]."""
    best = (1.0 + s_best) / 2.0
    second = (1.0 + s_second) / 2.0
    denom = best + second
    safe = np.where(denom > 0.0, denom, 1.0)
    gap = np.where(denom > 0.0, (best - second) / safe, 0.0)
    return np.clip(1.0 - gap, 0.0, 1.0) ** gamma


def reassign(
    embed: DenseTensor | np.ndarray,
    labels: LabelMap,
    centroids: CentroidSet,
    cfg: LrConfig,
) -> Reassignment:
    """Assign every labelled pixel to its most cosine-similar centroid."""
    if len(centroids) < 2:
        raise LrUndefinedError(f"reassignment needs at least 2 centroids, got {len(centroids)}")
    e, _ = _embed_and_conf(embed, labels, None)
    h, w, c1 = e.shape
    if centroids.centroids.shape[1] != c1:
        raise ArgumentError(f"centroid width {centroids.centroids.shape[1]} != embedding width {c1}")
    flat_labels = labels.labels.reshape(-1)
    pixels = np.flatnonzero(flat_labels != NEUTRAL_LABEL)
    x = e.reshape(h * w, c1)[pixels]
    sim, _ = similarity_matrix(x, centroids.normalized(cfg.sim_eps), cfg.sim_eps)
    sim = np.clip(sim, -1.0, 1.0)
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    best_idx = np.argmax(sim, axis=1)
    rows = np.arange(pixels.size)
    s_best = sim[rows, best_idx]
    rest = sim.copy()
    rest[rows, best_idx] = -np.inf
    s_second = rest.max(axis=1)
    alpha = modulation(s_best, s_second, cfg.gamma)
    return Reassignment(
        height=h,
        width=w,
        pixels=pixels,
        classes=centroids.classes,
        original=flat_labels[pixels].copy(),
        assigned_index=best_idx,
        similarity=sim,
        s_best=s_best,
        s_second=s_second,
        alpha=alpha,
    )


def lr_terms(
    x: np.ndarray,
    c_hat: np.ndarray,
    assigned_index: np.ndarray,
    alpha: np.ndarray,
    fg_mask: np.ndarray,
    margin_n: float,
    eps: float,
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Loss parts and gradient w.r.t. the rows of ``x`` with everything else frozen.

    Returns (l_minus, l_plus, grad_x, active) where ``active`` marks the open
    hinges (N, K); the assigned column is never active.
    """
    n_pix = x.shape[0]
    sim, nx = similarity_matrix(x, c_hat, eps)
    rows = np.arange(n_pix)
    s_a = sim[rows, assigned_index]
    hinge = margin_n + sim - s_a[:, None]
    active = hinge > 0.0
    active[rows, assigned_index] = False
    inner = np.sum(np.where(active, hinge, 0.0), axis=1)
    weighted = alpha * inner

    n_fg = int(np.count_nonzero(fg_mask))
    n_bg = n_pix - n_fg
    l_plus = float(np.sum(weighted[fg_mask])) / n_fg if n_fg else 0.0
    l_minus = float(np.sum(weighted[~fg_mask])) / n_bg if n_bg else 0.0

    # d loss / d sim: +scale on every open competitor, -scale * n_open on the assigned column
    part_size = np.where(fg_mask, max(n_fg, 1), max(n_bg, 1)).astype(np.float64)
    scale = alpha / part_size
    d_sim = np.where(active, scale[:, None], 0.0)
    d_sim[rows, assigned_index] = -scale * active.sum(axis=1)

    # d sim_k / d x = c_hat_k / |x| - sim_k * x / |x|^2, with |x| clamped at eps
    raw_norm = np.linalg.norm(x, axis=1)
    radial = np.where(raw_norm >= eps, np.sum(d_sim * sim, axis=1) / nx**2, 0.0)
    grad_x = (d_sim @ c_hat) / nx[:, None] - radial[:, None] * x
    return l_minus, l_plus, grad_x, active


def lr_loss(
    embed: DenseTensor | np.ndarray,
    labels: LabelMap,
    conf: DenseTensor | np.ndarray,
    cfg: LrConfig,
) -> LrReport:
    """Label reassign loss with the gradient w.r.t. the embedding map."""
    e, _ = _embed_and_conf(embed, labels, conf)
    centroids = compute_centroids(e, labels, conf)
    ra = reassign(e, labels, centroids, cfg)
    h, w, c1 = e.shape
    x = e.reshape(h * w, c1)[ra.pixels]
    l_minus, l_plus, grad_x, _ = lr_terms(
        x,
        centroids.normalized(cfg.sim_eps),
        ra.assigned_index,
        ra.alpha,
        ra.fg_mask,
        cfg.margin_n,
        cfg.sim_eps,
    )
    grad = np.zeros((h * w, c1), dtype=np.float64)
    grad[ra.pixels] = grad_x
    e_bg, e_fg = ra.counts()
    logger.debug(
        "lr_loss l_minus=%.6g l_plus=%.6g |E_bg|=%d |E_fg|=%d changed=%d",
        l_minus, l_plus, e_bg, e_fg, ra.changed,
    )
    return LrReport(
        total=l_minus + l_plus,
        terms={"l_minus": l_minus, "l_plus": l_plus},
        grad=grad.reshape(h, w, c1),
        centroids=centroids,
        reassignment=ra,
    )
