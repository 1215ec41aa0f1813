"""Small convolutional per-pixel predictor with hand-written backward passes.

Architecture (stride 1, zero padding 1)::

    image (H, W, Cin)
      conv1 3x3 -> ReLU            (H, W, hidden)
      conv2 3x3 -> ReLU  = F_s     (H, W, embed_dim)
      head 1x1           = logits  (H, W, C)
      softmax            = F_c

Convolutions run as im2col matrix products; patch columns are ordered
``(ky, kx, c_in)`` to match the ``(3, 3, c_in, c_out)`` weight layout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, softmax

from affinity_refine.constants import DEFAULT_PROB_FLOOR, NEUTRAL_LABEL
from affinity_refine.errors import ArgumentError
from affinity_refine.losses.report import LossReport
from affinity_refine.tensor_core import LabelMap, Rng

logger = logging.getLogger(__name__)

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b")


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (H * W, 9 * C) patches of the zero-padded input."""
    h, w, c = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))  # (H, W, C, 3, 3)
    return windows.transpose(0, 1, 3, 4, 2).reshape(h * w, 9 * c)


def col2im3x3(cols: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    """Adjoint of im2col3x3: scatter-add patch gradients back onto (H, W, C)."""
    patches = cols.reshape(h, w, 3, 3, c)
    padded = np.zeros((h + 2, w + 2, c), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            padded[ky : ky + h, kx : kx + w] += patches[:, :, ky, kx, :]
    return padded[1:-1, 1:-1]


@dataclass(slots=True)
class ForwardCache:
    cols1: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    cols2: np.ndarray
    z2: np.ndarray
    fs: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


class ToyModel:
    """Parameters live in ``params`` as float64 arrays keyed by PARAM_NAMES."""

    def __init__(self, params: dict[str, np.ndarray]) -> None:
        missing = [n for n in PARAM_NAMES if n not in params]
        if missing:
            raise ArgumentError(f"missing model parameters: {', '.join(missing)}")
        self.params = {n: np.asarray(params[n], dtype=np.float64).copy() for n in PARAM_NAMES}
        w1, w2, hw = self.params["conv1_w"], self.params["conv2_w"], self.params["head_w"]
        if w1.shape[:2] != (3, 3) or w2.shape[:2] != (3, 3) or w2.shape[2] != w1.shape[3] or hw.shape[0] != w2.shape[3]:
            raise ArgumentError(
                f"inconsistent parameter shapes: conv1 {w1.shape}, conv2 {w2.shape}, head {hw.shape}"
            )
        for n, arr in self.params.items():
            if not np.isfinite(arr).all():
                raise ArgumentError(f"parameter {n} has non-finite values")

    @classmethod
    def init(cls, in_channels: int, num_classes: int, hidden: int, embed_dim: int, rng: Rng) -> ToyModel:
        """He-normal weights, zero biases."""
        if min(in_channels, num_classes, hidden, embed_dim) <= 0:
            raise ArgumentError("model dimensions must be positive")

        def he(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
            return rng.normal_array(shape, scale=float(np.sqrt(2.0 / fan_in)))

        return cls(
            {
                "conv1_w": he((3, 3, in_channels, hidden), 9 * in_channels),
                "conv1_b": np.zeros(hidden),
                "conv2_w": he((3, 3, hidden, embed_dim), 9 * hidden),
                "conv2_b": np.zeros(embed_dim),
                "head_w": he((embed_dim, num_classes), embed_dim),
                "head_b": np.zeros(num_classes),
            }
        )

    @classmethod
    def zeros(cls, in_channels: int, num_classes: int, hidden: int = 16, embed_dim: int = 16) -> ToyModel:
        return cls(
            {
                "conv1_w": np.zeros((3, 3, in_channels, hidden)),
                "conv1_b": np.zeros(hidden),
                "conv2_w": np.zeros((3, 3, hidden, embed_dim)),
                "conv2_b": np.zeros(embed_dim),
                "head_w": np.zeros((embed_dim, num_classes)),
                "head_b": np.zeros(num_classes),
            }
        )

    @property
    def in_channels(self) -> int:
        return int(self.params["conv1_w"].shape[2])

    @property
    def hidden(self) -> int:
        return int(self.params["conv1_w"].shape[3])

    @property
    def embed_dim(self) -> int:
        return int(self.params["conv2_w"].shape[3])

    @property
    def num_classes(self) -> int:
        return int(self.params["head_w"].shape[1])

    @property
    def parameter_count(self) -> int:
        return sum(int(a.size) for a in self.params.values())

    def copy(self) -> ToyModel:
        return ToyModel(self.params)

    def forward(self, image: np.ndarray) -> ForwardCache:
        x = np.asarray(image, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ArgumentError(f"image must be H x W x {self.in_channels}, got {x.shape}")
        if not np.isfinite(x).all():
            raise ArgumentError("image has non-finite values")
        h, w, _ = x.shape
        p = self.params
        cols1 = im2col3x3(x)
        z1 = (cols1 @ p["conv1_w"].reshape(-1, self.hidden) + p["conv1_b"]).reshape(h, w, self.hidden)
        a1 = np.maximum(z1, 0.0)
        cols2 = im2col3x3(a1)
        z2 = (cols2 @ p["conv2_w"].reshape(-1, self.embed_dim) + p["conv2_b"]).reshape(h, w, self.embed_dim)
        fs = np.maximum(z2, 0.0)
        logits = fs @ p["head_w"] + p["head_b"]
        probs = softmax(logits, axis=2)
        return ForwardCache(cols1, z1, a1, cols2, z2, fs, logits, probs)

    def backward(
        self,
        cache: ForwardCache,
        d_probs: np.ndarray | None = None,
        d_logits: np.ndarray | None = None,
        d_fs: np.ndarray | None = None,
    ) -> dict[str, np.ndarray]:
        """Parameter gradients given upstream gradients on F_c, the logits and F_s."""
        h, w, n_cls = cache.probs.shape
        g_logits = np.zeros_like(cache.logits) if d_logits is None else np.array(d_logits, dtype=np.float64)
        if d_probs is not None:
            p = cache.probs
            g_logits += p * (d_probs - np.sum(p * d_probs, axis=2, keepdims=True))
        p = self.params
        flat_logits = g_logits.reshape(h * w, n_cls)
        grads = {
            "head_w": cache.fs.reshape(h * w, -1).T @ flat_logits,
            "head_b": flat_logits.sum(axis=0),
        }
        g_fs = g_logits @ p["head_w"].T
        if d_fs is not None:
            g_fs = g_fs + d_fs
        g_z2 = (g_fs * (cache.z2 > 0.0)).reshape(h * w, self.embed_dim)
        grads["conv2_w"] = (cache.cols2.T @ g_z2).reshape(p["conv2_w"].shape)
        grads["conv2_b"] = g_z2.sum(axis=0)
        g_a1 = col2im3x3(g_z2 @ p["conv2_w"].reshape(-1, self.embed_dim).T, h, w, self.hidden)
        g_z1 = (g_a1 * (cache.z1 > 0.0)).reshape(h * w, self.hidden)
        grads["conv1_w"] = (cache.cols1.T @ g_z1).reshape(p["conv1_w"].shape)
        grads["conv1_b"] = g_z1.sum(axis=0)
        return {n: grads[n] for n in PARAM_NAMES}


def forward(model: ToyModel, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(F_s, F_c) for one image."""
    cache = model.forward(image)
    return cache.fs, cache.probs


def ce_loss(probs: np.ndarray, labels: LabelMap, floor: float = DEFAULT_PROB_FLOOR) -> LossReport:
    """Mean -ln(max(p_true, floor)) over labelled pixels; gradient w.r.t. the probabilities."""
    h, w, n_cls = probs.shape
    if (labels.height, labels.width) != (h, w):
        raise ArgumentError(f"labels {labels.height}x{labels.width} do not match probs {h}x{w}")
    lab = labels.labels
    mask = lab != NEUTRAL_LABEL
    grad = np.zeros_like(probs, dtype=np.float64)
    n = int(np.count_nonzero(mask))
    if n == 0:
        return LossReport(0.0, {"ce": 0.0}, grad)
    if int(lab[mask].max()) >= n_cls:
        raise ArgumentError(f"label {int(lab[mask].max())} out of range for {n_cls} classes")
    rows, cols = np.nonzero(mask)
    cls = lab[rows, cols].astype(np.int64)
    p_true = probs[rows, cols, cls]
    loss = float(np.sum(-np.log(np.maximum(p_true, floor)))) / n
    grad[rows, cols, cls] = np.where(p_true > floor, -1.0 / (np.maximum(p_true, floor) * n), 0.0)
    return LossReport(loss, {"ce": loss}, grad)


def cls_loss(logits: np.ndarray, image_labels: np.ndarray) -> LossReport:
    """Mean BCE over foreground classes between sigmoid(global max logit) and the image labels.

    The gradient is routed to the first pixel attaining each class maximum.
    """
    h, w, n_cls = logits.shape
    y = np.asarray(image_labels, dtype=np.float64)
    if y.shape != (n_cls,):
        raise ArgumentError(f"image labels must have length {n_cls}, got {y.shape}")
    grad = np.zeros_like(logits, dtype=np.float64)
    if n_cls < 2:
        return LossReport(0.0, {"cls": 0.0}, grad)
    flat = logits.reshape(h * w, n_cls)[:, 1:]
    arg = np.argmax(flat, axis=0)
    pooled = flat[arg, np.arange(n_cls - 1)]
    target = y[1:]
    # BCE with logits: softplus(z) - y * z
    bce = np.logaddexp(0.0, pooled) - target * pooled
    k = n_cls - 1
    loss = float(np.sum(bce)) / k
    sig = expit(pooled)
    gflat = grad.reshape(h * w, n_cls)
    gflat[arg, np.arange(1, n_cls)] = (sig - target) / k
    return LossReport(loss, {"cls": loss}, grad)
