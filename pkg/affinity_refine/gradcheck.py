"""Finite-difference verification of the analytic gradients.

Each checked coordinate is evaluated at +-h and +-h/2; the two central
differences are combined by one Richardson step, ``(4 D(h/2) - D(h)) / 3``,
which cancels the O(h^2) truncation term. Coordinates whose perturbations change a
non-smooth pattern (open hinges, ReLU masks, max-pool argmax, max/min
ordering) are excluded. Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import xxhash

from affinity_refine.errors import ArgumentError
from affinity_refine.losses.affinity import AffinityConfig, AffinityMode, ModelingFn, affinity_terms
from affinity_refine.losses.label_reassign import LrConfig, lr_loss, lr_terms
from affinity_refine.pair_graph import KernelSet, PairSet, build_pairs
from affinity_refine.random_instances import (
    random_blob_labels,
    random_conf,
    random_embed,
    random_labels,
    random_probs,
)
from affinity_refine.tensor_core import Rng
from affinity_refine.training.config import TrainConfig
from affinity_refine.training.toy_model import PARAM_NAMES, ToyModel
from affinity_refine.training.trainer import TrainItem, compute_objective

logger = logging.getLogger(__name__)

LOSS_STEP = 1e-3
MODEL_STEP = 1e-5
LOSS_THRESHOLD = 1e-4
MODEL_THRESHOLD = 1e-3
MIN_COORDS = 100
DEFAULT_COORDS = 128
MAX_LOSS_INSTANCE = (16, 16, 4)
REL_FLOOR = 1e-6

TARGETS = ("affinity-sa", "affinity-aa", "affinity-aa-conf", "lr", "model")
DEFAULT_SIZES = {
    "affinity-sa": (8, 8, 3),
    "affinity-aa": (8, 8, 3),
    "affinity-aa-conf": (8, 8, 3),
    "lr": (8, 8, 4),
    "model": (8, 8, 3),
}


@dataclass(slots=True)
class GradCheckResult:
    target: str
    size: tuple[int, int, int]
    seed: int
    max_rel_error: float
    threshold: float
    checked: int
    excluded: int
    step: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.threshold

    def to_dict(self) -> dict[str, object]:
        return {
            "target": self.target,
            "size": "x".join(str(s) for s in self.size),
            "seed": self.seed,
            "max_rel_error": self.max_rel_error,
            "threshold": self.threshold,
            "checked": self.checked,
            "excluded": self.excluded,
            "step": self.step,
            "passed": self.passed,
        }


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def richardson_derivative(
    evaluate: Callable[[float], tuple[float, str]], base_signature: str, step: float
) -> float | None:
    """Extrapolated central difference, or None if a perturbation crosses a kink."""
    values = {}
    for delta in (step, -step, step / 2.0, -step / 2.0):
        value, signature = evaluate(delta)
        if signature != base_signature:
            return None
        values[delta] = value
    d_full = (values[step] - values[-step]) / (2.0 * step)
    d_half = (values[step / 2.0] - values[-step / 2.0]) / step
    return (4.0 * d_half - d_full) / 3.0


def check_array(
    fn: Callable[[np.ndarray], tuple[float, str]],
    x: np.ndarray,
    analytic: np.ndarray,
    coords: np.ndarray,
    step: float,
) -> tuple[float, int, int]:
    """Compare ``analytic`` against finite differences of ``fn`` at flat ``coords`` of ``x``.

    ``x`` is perturbed in place and restored. Returns (max rel err, checked, excluded).
    """
    _, base_signature = fn(x)
    worst = 0.0
    checked = excluded = 0
    flat = x.reshape(-1)
    for idx in coords:
        orig = flat[idx]

        def evaluate(delta: float, idx: int = int(idx), orig: float = float(orig)) -> tuple[float, str]:
            flat[idx] = orig + delta
            try:
                return fn(x)
            finally:
                flat[idx] = orig

        numeric = richardson_derivative(evaluate, base_signature, step)
        if numeric is None:
            excluded += 1
            continue
        checked += 1
        worst = max(worst, relative_error(float(analytic.reshape(-1)[idx]), numeric))
    return worst, checked, excluded


def _pick_coords(rng: Rng, candidates: np.ndarray, count: int) -> np.ndarray:
    n = min(candidates.size, count)
    return candidates[rng.sample(candidates.size, n)]


def _check_loss_size(size: tuple[int, int, int]) -> None:
    if any(s > m for s, m in zip(size, MAX_LOSS_INSTANCE, strict=True)):
        raise ArgumentError(
            f"loss gradient checks take instances up to 16x16x4, got {'x'.join(map(str, size))}"
        )
    if size[0] < 2 or size[1] < 2:
        raise ArgumentError("gradient check instances must be at least 2x2")


def _dilations_for(size: tuple[int, int, int]) -> KernelSet:
    return KernelSet(tuple(d for d in (1, 2) if d < min(size[0], size[1])))


def _order_signature(conf: np.ndarray, pairs: PairSet) -> bytes:
    flat = conf.reshape(-1)
    h = xxhash.xxh64()
    for group in pairs.by_dilation:
        for arr in (group.fg_pos, group.bg_pos, group.neg):
            h.update(np.packbits(flat[arr[:, 0]] >= flat[arr[:, 1]]).tobytes())
    return h.digest()


def affinity_grad_check(
    kind: str,
    size: tuple[int, int, int] = (8, 8, 3),
    seed: int = 0,
    modeling_fn: ModelingFn = ModelingFn.MAX,
    coords: int = DEFAULT_COORDS,
) -> GradCheckResult:
    """``kind``: ``sa`` or ``aa`` (w.r.t. probabilities), ``aa-conf`` (w.r.t. confidences)."""
    if kind not in ("sa", "aa", "aa-conf"):
        raise ArgumentError(f"affinity grad check kind must be sa, aa or aa-conf, got {kind!r}")
    _check_loss_size(size)
    h, w, c = size
    rng = Rng(seed)
    labels = random_blob_labels(rng, h, w, c)
    probs = random_probs(rng, h, w, c)
    conf = random_conf(rng, h, w)
    cfg = AffinityConfig(
        kernels=_dilations_for(size),
        mode=AffinityMode.SA if kind == "sa" else AffinityMode.AA,
        modeling_fn=modeling_fn,
        detach_conf=kind != "aa-conf",
    )
    pairs = build_pairs(labels, cfg.kernels)
    use_conf = None if kind == "sa" else conf
    report = affinity_terms(probs, use_conf, pairs, cfg, want_conf_grad=kind == "aa-conf")

    if kind == "aa-conf":
        assert report.grad_conf is not None

        def fn(v: np.ndarray) -> tuple[float, str]:
            r = affinity_terms(probs, v, pairs, cfg)
            return r.total, r.kink_signature + _order_signature(v, pairs).hex()

        target_x, analytic = conf, report.grad_conf
    else:

        def fn(p: np.ndarray) -> tuple[float, str]:
            r = affinity_terms(p, use_conf, pairs, cfg)
            return r.total, r.kink_signature

        target_x, analytic = probs, report.grad_probs

    picked = _pick_coords(rng, np.arange(target_x.size), max(coords, MIN_COORDS))
    worst, checked, excluded = check_array(fn, target_x, analytic, picked, LOSS_STEP)
    result = GradCheckResult(f"affinity-{kind}", size, seed, worst, LOSS_THRESHOLD, checked, excluded, LOSS_STEP)
    logger.info("grad check %s: max rel err %.3g over %d coords (%d at kinks)", result.target, worst, checked, excluded)
    return result


def lr_grad_check(
    size: tuple[int, int, int] = (8, 8, 4),
    seed: int = 0,
    gamma: float = 2.0,
    num_classes: int = 3,
    coords: int = DEFAULT_COORDS,
) -> GradCheckResult:
    """Embedding gradient of the label reassign loss with centroids, assignment and alpha frozen."""
    _check_loss_size(size)
    h, w, c1 = size
    rng = Rng(seed)
    labels = random_labels(rng, h, w, num_classes)
    embed = random_embed(rng, h, w, c1)
    conf = random_conf(rng, h, w)
    cfg = LrConfig(gamma=gamma)
    report = lr_loss(embed, labels, conf, cfg)
    assert report.centroids is not None and report.reassignment is not None and report.grad is not None
    ra = report.reassignment
    c_hat = report.centroids.normalized(cfg.sim_eps)

    def fn(e: np.ndarray) -> tuple[float, str]:
        x = e.reshape(h * w, c1)[ra.pixels]
        l_minus, l_plus, _, active = lr_terms(x, c_hat, ra.assigned_index, ra.alpha, ra.fg_mask, cfg.margin_n, cfg.sim_eps)
        return l_minus + l_plus, xxhash.xxh64_hexdigest(np.packbits(active).tobytes())

    candidates = (ra.pixels[:, None] * c1 + np.arange(c1)[None, :]).reshape(-1)
    picked = _pick_coords(rng, candidates, max(coords, MIN_COORDS))
    worst, checked, excluded = check_array(fn, embed, report.grad, picked, LOSS_STEP)
    result = GradCheckResult("lr", size, seed, worst, LOSS_THRESHOLD, checked, excluded, LOSS_STEP)
    logger.info("grad check lr (gamma=%g): max rel err %.3g over %d coords (%d at kinks)", gamma, worst, checked, excluded)
    return result


def model_grad_check(
    size: tuple[int, int, int] = (8, 8, 3),
    seed: int = 0,
    coords: int = DEFAULT_COORDS,
    lambda_scale: float = 1.0,
) -> GradCheckResult:
    """Full objective w.r.t. a sampled subset of model parameters.

    ``size`` is H x W x number of classes; the image has 3 channels. Every
    term is enabled (the label reassign term via the last epoch).
    """
    h, w, n_cls = size
    if n_cls < 2 or h < 3 or w < 3:
        raise ArgumentError(f"model grad check needs at least 3x3 pixels and 2 classes, got {size}")
    rng = Rng(seed)
    labels = random_blob_labels(rng, h, w, n_cls)
    image = rng.normal_array((h, w, 3))
    image_labels = np.zeros(n_cls)
    image_labels[labels.classes_present()] = 1.0
    item = TrainItem(image, labels, image_labels)
    cfg = TrainConfig(
        epochs=1,
        steps_per_epoch=1,
        lambda1=0.1 * lambda_scale,
        lambda2=0.1 * lambda_scale,
        lr_loss_last_epochs=1,
        affinity=AffinityConfig(kernels=_dilations_for(size)),
    )
    model = ToyModel.init(3, n_cls, cfg.hidden_channels, cfg.embed_dim, rng.spawn())
    pairs = build_pairs(labels, cfg.affinity.kernels)
    base = compute_objective(model, item, pairs, cfg, epoch=1)

    sizes = [model.params[n].size for n in PARAM_NAMES]
    offsets = np.cumsum([0, *sizes])
    picked = _pick_coords(rng, np.arange(int(offsets[-1])), max(coords, MIN_COORDS))

    worst = 0.0
    checked = excluded = 0
    for flat_idx in picked:
        k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name = PARAM_NAMES[k]
        local = int(flat_idx - offsets[k])
        param = model.params[name].reshape(-1)
        orig = float(param[local])

        def evaluate(delta: float, param: np.ndarray = param, local: int = local, orig: float = orig) -> tuple[float, str]:
            param[local] = orig + delta
            try:
                obj = compute_objective(model, item, pairs, cfg, epoch=1, frozen=base.frozen)
                return obj.total, obj.signature
            finally:
                param[local] = orig

        numeric = richardson_derivative(evaluate, base.signature, MODEL_STEP)
        if numeric is None:
            excluded += 1
            continue
        checked += 1
        worst = max(worst, relative_error(float(base.grads[name].reshape(-1)[local]), numeric))

    result = GradCheckResult("model", size, seed, worst, MODEL_THRESHOLD, checked, excluded, MODEL_STEP)
    logger.info("grad check model: max rel err %.3g over %d params (%d at kinks)", worst, checked, excluded)
    return result


def run_grad_check(target: str, size: tuple[int, int, int] | None = None, seed: int = 0) -> GradCheckResult:
    if target not in TARGETS:
        raise ArgumentError(f"--target must be one of {', '.join(TARGETS)}, got {target!r}")
    size = size or DEFAULT_SIZES[target]
    if target == "lr":
        return lr_grad_check(size, seed)
    if target == "model":
        return model_grad_check(size, seed)
    return affinity_grad_check(target.removeprefix("affinity-"), size, seed)
