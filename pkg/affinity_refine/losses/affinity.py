"""Standard (SA) and adaptive (AA) pairwise affinity losses.

For each dilation and each pair subset the pair divergence is

    W_ij = sum_c p_ic * ln(max(p_ic, floor) / max(p_jc, floor))

and the per-dilation loss is ``fg + bg + 2 * neg`` where ``fg`` / ``bg`` are the
means of ``Omega_ij * W_ij`` over the positive pairs and ``neg`` is the mean of
``max(0, Omega_ij * m - W_ij)`` over the negative pairs. SA is AA with every
``Omega_ij = 1``; both run through the same code so they agree bit for bit
when the confidence map is all ones.

Gradients are analytic. Below the probability floor the log is constant and
contributes no gradient; the hinge has zero subgradient at its kink.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any

import numpy as np
import xxhash

from affinity_refine.constants import DEFAULT_KERNELS, DEFAULT_MARGIN_M, DEFAULT_PROB_FLOOR, MAX_PROB_FLOOR
from affinity_refine.errors import ArgumentError
from affinity_refine.numba_pipelines import pair_divergence, scatter_divergence_grad, scatter_pair_weights
from affinity_refine.pair_graph import KernelSet, PairSet
from affinity_refine.tensor_core import DenseTensor, as_float64

logger = logging.getLogger(__name__)

_SUM_TOLERANCE = 1e-4


class AffinityMode(Enum):
    """SA: every pair weighted 1. AA: pairs weighted by the connectivity Omega_ij."""

    SA = "sa"
    AA = "aa"


class ModelingFn(Enum):
    """How two pixel confidences combine into Omega_ij."""

    MAX = "max"
    MIN = "min"
    PLUS = "plus"  # (v_i + v_j) / 2


@dataclass(slots=True)
class AffinityConfig:
    margin_m: float = DEFAULT_MARGIN_M
    kernels: KernelSet = field(default_factory=lambda: KernelSet(DEFAULT_KERNELS))
    mode: AffinityMode = AffinityMode.AA
    modeling_fn: ModelingFn = ModelingFn.MAX
    prob_floor: float = DEFAULT_PROB_FLOOR
    detach_conf: bool = True  # False: also return d total / d conf

    def __post_init__(self) -> None:
        if isinstance(self.mode, str):
            self.mode = _enum_value(AffinityMode, self.mode, "mode")
        if isinstance(self.modeling_fn, str):
            self.modeling_fn = _enum_value(ModelingFn, self.modeling_fn, "modeling_fn")
        if isinstance(self.kernels, str):
            self.kernels = KernelSet.parse(self.kernels)
        elif isinstance(self.kernels, (list, tuple)):
            self.kernels = KernelSet.of(self.kernels)
        if not self.margin_m > 0:
            raise ArgumentError(f"margin_m must be > 0, got {self.margin_m}")
        if not 0 < self.prob_floor <= MAX_PROB_FLOOR:
            raise ArgumentError(f"prob_floor must be in (0, {MAX_PROB_FLOOR}], got {self.prob_floor}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "margin_m": self.margin_m,
            "kernels": list(self.kernels.dilations),
            "mode": self.mode.value,
            "modeling_fn": self.modeling_fn.value,
            "prob_floor": self.prob_floor,
            "detach_conf": self.detach_conf,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AffinityConfig:
        """Deserialize from dict. Unknown keys are an error."""
        _reject_unknown(cls, d, "affinity")
        return cls(**d)


def _enum_value(enum_cls: type[Enum], value: str, name: str) -> Any:
    try:
        return enum_cls(value.lower())
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise ArgumentError(f"{name} must be one of {allowed}, got {value!r}") from None


def _reject_unknown(cls: type, d: dict[str, Any], section: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ArgumentError(f"unknown {section} config key(s): {', '.join(unknown)}")


@dataclass(frozen=True, slots=True)
class DilationTerms:
    dilation: int
    fg: float
    bg: float
    neg: float
    counts: tuple[int, int, int]

    @property
    def total(self) -> float:
        return self.fg + self.bg + 2.0 * self.neg


@dataclass(slots=True)
class AffinityReport:
    """Loss value, per-dilation terms and gradients.

    ``grad_probs`` has the shape of the probability map (H, W, C); ``grad_conf``
    is (H, W) and present only when the confidence map is differentiated.
    ``kink_signature`` digests which negative pairs have an open hinge.
    """

    total: float
    per_dilation: tuple[DilationTerms, ...]
    grad_probs: np.ndarray
    grad_conf: np.ndarray | None = None
    kink_signature: str = ""
    kink_pairs: int = 0

    def grad_probs_tensor(self) -> DenseTensor:
        return DenseTensor.from_array(self.grad_probs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "per_dilation": {
                str(t.dilation): {
                    "fg": t.fg,
                    "bg": t.bg,
                    "neg": t.neg,
                    "counts": list(t.counts),
                }
                for t in self.per_dilation
            },
        }


def kl_pair(p: np.ndarray | list[float], q: np.ndarray | list[float], floor: float = DEFAULT_PROB_FLOOR) -> float:
    """sum_c p_c * ln(max(p_c, floor) / max(q_c, floor))."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ArgumentError(f"kl_pair needs two vectors of equal length, got {p.shape} and {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if (v < 0).any() or abs(float(v.sum()) - 1.0) > 1e-5:
            raise ArgumentError(f"{name} is not a probability vector: {v.tolist()}")
    return float(np.sum(p * (np.log(np.maximum(p, floor)) - np.log(np.maximum(q, floor)))))


def connectivity(v_i: float, v_j: float, fn: ModelingFn | str = ModelingFn.MAX) -> float:
    """Omega_ij for two confidences in [0, 1]."""
    fn = _enum_value(ModelingFn, fn, "modeling_fn") if isinstance(fn, str) else fn
    for v in (v_i, v_j):
        if not 0.0 <= v <= 1.0:
            raise ArgumentError(f"confidence must be in [0, 1], got {v}")
    if fn is ModelingFn.MAX:
        return max(v_i, v_j)
    if fn is ModelingFn.MIN:
        return min(v_i, v_j)
    return (v_i + v_j) / 2.0


def _pair_connectivity(conf: np.ndarray, pairs: np.ndarray, fn: ModelingFn) -> tuple[np.ndarray, np.ndarray]:
    """Omega per pair and the share of dOmega routed to the center pixel i."""
    v_i = conf[pairs[:, 0]]
    v_j = conf[pairs[:, 1]]
    if fn is ModelingFn.MAX:
        return np.maximum(v_i, v_j), (v_i >= v_j).astype(np.float64)
    if fn is ModelingFn.MIN:
        return np.minimum(v_i, v_j), (v_i <= v_j).astype(np.float64)
    return (v_i + v_j) / 2.0, np.full(v_i.shape, 0.5)


def _check_probs(probs: np.ndarray, pairs: PairSet) -> None:
    if probs.ndim != 3 or probs.shape[:2] != (pairs.height, pairs.width):
        raise ArgumentError(
            f"probs must be H x W x C = {pairs.height} x {pairs.width} x C, got {probs.shape}"
        )
    if not np.isfinite(probs).all() or (probs < 0).any():
        raise ArgumentError("probs must be finite and non-negative")
    worst = float(np.max(np.abs(probs.sum(axis=2) - 1.0)))
    if worst > _SUM_TOLERANCE:
        raise ArgumentError(f"probs rows must sum to 1, worst deviation {worst:.3g}")


def _check_conf(conf: np.ndarray, pairs: PairSet) -> np.ndarray:
    if conf.ndim == 3 and conf.shape[2] == 1:
        conf = conf[:, :, 0]
    if conf.shape != (pairs.height, pairs.width):
        raise ArgumentError(f"conf must be {pairs.height} x {pairs.width}, got {conf.shape}")
    if not np.isfinite(conf).all() or conf.min() < 0.0 or conf.max() > 1.0:
        raise ArgumentError(
            f"confidence must be in [0, 1], got range [{conf.min():.6g}, {conf.max():.6g}]"
        )
    return conf


def affinity_terms(
    probs: np.ndarray,
    conf: np.ndarray | None,
    pairs: PairSet,
    cfg: AffinityConfig,
    want_conf_grad: bool = False,
) -> AffinityReport:
    """Shared SA/AA core on float64 arrays without input validation.

    ``conf=None`` weights every pair by 1 (SA). Used directly by the
    finite-difference checker, which evaluates off the probability simplex.
    """
    h, w, n_cls = probs.shape
    p = np.ascontiguousarray(probs.reshape(h * w, n_cls), dtype=np.float64)
    floor = cfg.prob_floor
    above = p > floor
    clamped = np.maximum(p, floor)
    logp = np.log(clamped)
    inv_p = np.where(above, 1.0 / clamped, 0.0)
    above_f = above.astype(np.float64)

    grad = np.zeros_like(p)
    conf_flat = None if conf is None else np.ascontiguousarray(conf.reshape(-1), dtype=np.float64)
    grad_conf = np.zeros(h * w, dtype=np.float64) if (want_conf_grad and conf_flat is not None) else None
    m = cfg.margin_m
    hasher = xxhash.xxh64()
    kinks = 0

    terms: list[DilationTerms] = []
    for group in pairs.by_dilation:
        values = []
        for kind, arr in (("fg", group.fg_pos), ("bg", group.bg_pos), ("neg", group.neg)):
            n = arr.shape[0]
            if n == 0:
                values.append(0.0)
                continue
            div = np.empty(n, dtype=np.float64)
            pair_divergence(p, logp, arr, div)
            if conf_flat is None:
                omega = np.ones(n, dtype=np.float64)
                share_i = None
            else:
                omega, share_i = _pair_connectivity(conf_flat, arr, cfg.modeling_fn)

            if kind == "neg":
                slack = omega * m - div
                active = slack > 0.0
                values.append(float(np.sum(np.where(active, slack, 0.0))) / n)
                coef = np.where(active, -2.0 / n, 0.0)
                d_omega = np.where(active, 2.0 * m / n, 0.0)
                hasher.update(np.packbits(active).tobytes())
                kinks += int(np.count_nonzero(slack == 0.0))
            else:
                values.append(float(np.sum(omega * div)) / n)
                coef = omega / n
                d_omega = div / n

            scatter_divergence_grad(p, logp, inv_p, above_f, arr, coef, grad)
            if grad_conf is not None and share_i is not None:
                scatter_pair_weights(arr, d_omega, share_i, grad_conf)
        terms.append(DilationTerms(group.dilation, values[0], values[1], values[2], group.counts()))

    total = 0.0
    for t in terms:
        total += t.fg + t.bg + 2.0 * t.neg

    return AffinityReport(
        total=total,
        per_dilation=tuple(terms),
        grad_probs=grad.reshape(h, w, n_cls),
        grad_conf=None if grad_conf is None else grad_conf.reshape(h, w),
        kink_signature=hasher.hexdigest(),
        kink_pairs=kinks,
    )


def sa_loss(probs: DenseTensor | np.ndarray, pairs: PairSet, cfg: AffinityConfig) -> AffinityReport:
    """Standard affinity loss: every pair weighted 1."""
    if cfg.mode is not AffinityMode.SA:
        raise ArgumentError(f"sa_loss needs mode=sa, got mode={cfg.mode.value}")
    p = as_float64(probs)
    _check_probs(p, pairs)
    report = affinity_terms(p, None, pairs, cfg)
    logger.debug("sa_loss total=%.6g", report.total)
    return report


def aa_loss(
    probs: DenseTensor | np.ndarray,
    conf: DenseTensor | np.ndarray,
    pairs: PairSet,
    cfg: AffinityConfig,
) -> AffinityReport:
    """Adaptive affinity loss: pair terms weighted by the connectivity of the two confidences."""
    if cfg.mode is not AffinityMode.AA:
        raise ArgumentError(f"aa_loss needs mode=aa, got mode={cfg.mode.value}")
    p = as_float64(probs)
    _check_probs(p, pairs)
    v = _check_conf(as_float64(conf), pairs)
    report = affinity_terms(p, v, pairs, cfg, want_conf_grad=not cfg.detach_conf)
    logger.debug("aa_loss total=%.6g fn=%s", report.total, cfg.modeling_fn.value)
    return report


def affinity_loss(
    probs: DenseTensor | np.ndarray,
    conf: DenseTensor | np.ndarray | None,
    pairs: PairSet,
    cfg: AffinityConfig,
) -> AffinityReport:
    """Dispatch to sa_loss or aa_loss by ``cfg.mode``. SA ignores ``conf``."""
    if cfg.mode is AffinityMode.SA:
        return sa_loss(probs, pairs, cfg)
    if conf is None:
        raise ArgumentError("mode=aa requires a confidence map")
    return aa_loss(probs, conf, pairs, cfg)
