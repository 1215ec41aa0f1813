"""Single-image training loop for the toy model.

The objective is ``cls + ce + lambda1 * affinity + lambda2 * label_reassign``.
The confidence map is the current probability of each pixel's pseudo-label
class, recomputed every step and held constant inside the step. The label
reassign term only runs in the last ``lr_loss_last_epochs`` epochs.
The learning rate of every step comes from ``TrainConfig.lr_at``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import xxhash

from affinity_refine.common.timing import PhaseTimer
from affinity_refine.constants import NEUTRAL_LABEL
from affinity_refine.errors import ArgumentError, LrUndefinedError
from affinity_refine.losses.affinity import affinity_loss
from affinity_refine.losses.label_reassign import compute_centroids, lr_terms, reassign
from affinity_refine.metrics import miou
from affinity_refine.pair_graph import PairSet, build_pairs
from affinity_refine.synth import SceneInstance
from affinity_refine.tensor_core import LabelMap, Rng, validate_labels
from affinity_refine.training.config import TrainConfig
from affinity_refine.training.toy_model import ToyModel, ce_loss, cls_loss

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class TrainItem:
    image: np.ndarray  # (H, W, Cin) float64
    pseudo: LabelMap
    image_labels: np.ndarray  # multi-hot (C,)
    gt: LabelMap | None = None

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=np.float64)
        self.image_labels = np.asarray(self.image_labels, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[:2] != (self.pseudo.height, self.pseudo.width):
            raise ArgumentError(
                f"image {self.image.shape} does not match labels {self.pseudo.height}x{self.pseudo.width}"
            )
        validate_labels(self.pseudo, self.num_classes)

    @classmethod
    def from_scene(cls, scene: SceneInstance) -> TrainItem:
        return cls(scene.image.to_float64(), scene.pseudo, scene.image_labels, scene.gt)

    @property
    def num_classes(self) -> int:
        return int(self.image_labels.shape[0])


@dataclass(slots=True)
class LrState:
    """Centroids, assignment and modulation frozen for one step."""

    pixels: np.ndarray
    c_hat: np.ndarray
    assigned_index: np.ndarray
    alpha: np.ndarray
    fg_mask: np.ndarray
    changed: int


@dataclass(slots=True)
class FrozenState:
    conf: np.ndarray
    lr: LrState | None = None


@dataclass(slots=True)
class Objective:
    total: float
    terms: dict[str, float]
    grads: dict[str, np.ndarray]
    signature: str  # ReLU patterns, CLS argmax pixels and open hinges
    frozen: FrozenState


@dataclass(frozen=True, slots=True)
class StepMetrics:
    epoch: int
    step: int
    cls: float
    ce: float
    aa: float
    lr: float
    total: float

    def to_row(self) -> dict[str, float | int]:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "cls": self.cls,
            "ce": self.ce,
            "aa": self.aa,
            "lr": self.lr,
            "total": self.total,
        }


@dataclass(slots=True)
class EpochSnapshot:
    epoch: int
    refined: LabelMap
    miou_gt: float | None


@dataclass(slots=True)
class TrainResult:
    model: ToyModel
    history: list[StepMetrics] = field(default_factory=list)
    snapshots: list[EpochSnapshot] = field(default_factory=list)
    timing: dict[str, dict[str, float]] = field(default_factory=dict)


class SgdMomentum:
    """v = mu * v + (g + wd * w); w -= lr * v."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, w in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * w
            v = self._velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self._velocity[name] = v
            w -= self.lr * v


def confidence_from_probs(probs: np.ndarray, labels: LabelMap) -> np.ndarray:
    """Probability of each pixel's pseudo-label class; 0 on neutral pixels."""
    lab = labels.labels
    conf = np.zeros(lab.shape, dtype=np.float64)
    rows, cols = np.nonzero(lab != NEUTRAL_LABEL)
    conf[rows, cols] = probs[rows, cols, lab[rows, cols].astype(np.int64)]
    return np.clip(conf, 0.0, 1.0)


def _lr_state(fs: np.ndarray, labels: LabelMap, conf: np.ndarray, cfg: TrainConfig) -> LrState | None:
    try:
        centroids = compute_centroids(fs, labels, conf)
    except LrUndefinedError as e:
        logger.debug("label reassign skipped: %s", e)
        return None
    ra = reassign(fs, labels, centroids, cfg.lr_loss)
    return LrState(
        pixels=ra.pixels,
        c_hat=centroids.normalized(cfg.lr_loss.sim_eps),
        assigned_index=ra.assigned_index,
        alpha=ra.alpha,
        fg_mask=ra.fg_mask,
        changed=ra.changed,
    )


def compute_objective(
    model: ToyModel,
    item: TrainItem,
    pairs: PairSet | None,
    cfg: TrainConfig,
    epoch: int,
    frozen: FrozenState | None = None,
) -> Objective:
    """Total loss, its terms and the parameter gradients.

    ``frozen`` replaces the step constants (confidence map, label reassign
    centroids / assignment / alpha) with those of an earlier evaluation.
    """
    cache = model.forward(item.image)
    hasher = xxhash.xxh64()
    hasher.update(np.packbits(cache.z1 > 0.0).tobytes())
    hasher.update(np.packbits(cache.z2 > 0.0).tobytes())

    ce = ce_loss(cache.probs, item.pseudo, cfg.ce_floor)
    cls = cls_loss(cache.logits, item.image_labels)
    if item.num_classes > 1:
        flat = cache.logits.reshape(-1, item.num_classes)[:, 1:]
        hasher.update(np.argmax(flat, axis=0).tobytes())

    conf = frozen.conf if frozen is not None else confidence_from_probs(cache.probs, item.pseudo)
    d_probs = ce.grad
    aa_value = 0.0
    if cfg.lambda1 > 0.0 and pairs is not None:
        aa = affinity_loss(cache.probs, conf, pairs, cfg.affinity)
        aa_value = aa.total
        d_probs = d_probs + cfg.lambda1 * aa.grad_probs
        hasher.update(aa.kink_signature.encode())
        if aa.grad_conf is not None and frozen is None:
            # conf = probs[label]: chain d/dconf onto the pseudo-label entries
            lab = item.pseudo.labels
            rows, cols = np.nonzero(lab != NEUTRAL_LABEL)
            d_probs[rows, cols, lab[rows, cols].astype(np.int64)] += cfg.lambda1 * aa.grad_conf[rows, cols]

    lr_value = 0.0
    d_fs = None
    lr_state = None
    if cfg.lr_loss_active(epoch):
        lr_state = frozen.lr if frozen is not None else _lr_state(cache.fs, item.pseudo, conf, cfg)
        if lr_state is not None:
            h, w, c1 = cache.fs.shape
            x = cache.fs.reshape(h * w, c1)[lr_state.pixels]
            l_minus, l_plus, grad_x, active = lr_terms(
                x,
                lr_state.c_hat,
                lr_state.assigned_index,
                lr_state.alpha,
                lr_state.fg_mask,
                cfg.lr_loss.margin_n,
                cfg.lr_loss.sim_eps,
            )
            lr_value = l_minus + l_plus
            d_fs = np.zeros((h * w, c1))
            d_fs[lr_state.pixels] = cfg.lambda2 * grad_x
            d_fs = d_fs.reshape(h, w, c1)
            hasher.update(np.packbits(active).tobytes())

    total = cls.total + ce.total + cfg.lambda1 * aa_value + cfg.lambda2 * lr_value
    grads = model.backward(cache, d_probs=d_probs, d_logits=cls.grad, d_fs=d_fs)
    return Objective(
        total=total,
        terms={"cls": cls.total, "ce": ce.total, "aa": aa_value, "lr": lr_value},
        grads=grads,
        signature=hasher.hexdigest(),
        frozen=FrozenState(conf=conf, lr=lr_state),
    )


def train_step(
    model: ToyModel,
    optimizer: SgdMomentum,
    item: TrainItem,
    cfg: TrainConfig,
    epoch: int,
    pairs: PairSet | None = None,
    step: int = 0,
    timer: PhaseTimer | None = None,
) -> tuple[ToyModel, StepMetrics]:
    """One SGD step on ``item``; updates ``model`` in place and returns it with the step metrics."""
    if pairs is None and cfg.lambda1 > 0.0:
        pairs = build_pairs(item.pseudo, cfg.affinity.kernels)
    timer = timer or PhaseTimer()
    with timer.phase("objective"):
        obj = compute_objective(model, item, pairs, cfg, epoch)
    with timer.phase("update"):
        optimizer.step(model.params, obj.grads)
    t = obj.terms
    metrics = StepMetrics(epoch, step, t["cls"], t["ce"], t["aa"], t["lr"], obj.total)
    logger.debug(
        "epoch %d step %d total=%.5f cls=%.5f ce=%.5f aa=%.5f lr=%.5f",
        epoch, step, obj.total, t["cls"], t["ce"], t["aa"], t["lr"],
    )
    return model, metrics


def refine(model: ToyModel, image: np.ndarray, pseudo_labels: LabelMap | None = None) -> LabelMap:
    """Dense argmax of F_c over every pixel; ties go to the lowest class."""
    cache = model.forward(image)
    if pseudo_labels is not None and cache.probs.shape[:2] != (pseudo_labels.height, pseudo_labels.width):
        raise ArgumentError("pseudo labels do not match the image size")
    return LabelMap.from_array(np.argmax(cache.probs, axis=2).astype(np.uint8))


def agreed_labels(model: ToyModel, item: TrainItem) -> LabelMap:
    """Pseudo labels the current refined map agrees with; neutral elsewhere.

    Pixels whose pseudo label the model does not reproduce drop out of the
    pair graph instead of being relabelled.
    """
    refined = refine(model, item.image).labels
    pseudo = item.pseudo.labels
    keep = (pseudo != NEUTRAL_LABEL) & (refined == pseudo)
    return LabelMap.from_array(np.where(keep, pseudo, NEUTRAL_LABEL).astype(np.uint8))


def train(item: TrainItem, cfg: TrainConfig, model: ToyModel | None = None) -> TrainResult:
    """Train a fresh model (seeded by ``cfg.seed``) on one item."""
    if model is None:
        model = ToyModel.init(
            item.image.shape[2], item.num_classes, cfg.hidden_channels, cfg.embed_dim, Rng(cfg.seed)
        )
    optimizer = SgdMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    pairs = build_pairs(item.pseudo, cfg.affinity.kernels) if cfg.lambda1 > 0.0 else None
    timer = PhaseTimer(["objective", "update"])
    result = TrainResult(model=model)

    for epoch in range(1, cfg.epochs + 1):
        if cfg.refresh_pairs and epoch > 1 and pairs is not None:
            pairs = build_pairs(agreed_labels(model, item), cfg.affinity.kernels)
        for step in range(cfg.steps_per_epoch):
            optimizer.lr = cfg.lr_at((epoch - 1) * cfg.steps_per_epoch + step)
            _, metrics = train_step(model, optimizer, item, cfg, epoch, pairs=pairs, step=step, timer=timer)
            result.history.append(metrics)
        last = result.history[-1]
        if cfg.snapshot_every_epoch:
            refined = refine(model, item.image)
            score = miou(refined, item.gt, item.num_classes).mean if item.gt is not None else None
            result.snapshots.append(EpochSnapshot(epoch, refined, score))
        logger.info(
            "epoch %d/%d total=%.4f ce=%.4f aa=%.4f lr=%.4f",
            epoch, cfg.epochs, last.total, last.ce, last.aa, last.lr,
        )

    result.timing = timer.summary()
    logger.debug("train timing %s", result.timing)
    return result
