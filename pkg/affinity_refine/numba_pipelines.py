"""Pre-compiled numba pipelines for the per-pair hot paths.

Pair enumeration, the per-pair KL divergence and the gradient scatter each run
as a single @njit function over flat arrays so the Python interpreter never
iterates over pairs. Pixel indices are flat row-major ``r * W + c``; probability
arrays are ``(H * W, C)`` float64.
"""

import logging

import numba
import numpy as np
from numba import njit, prange

logger = logging.getLogger(__name__)

# Row-major 3x3 neighbourhood minus the centre, scaled by the dilation.
NEIGHBOR_OFFSETS = np.array(
    [[-1, -1], [-1, 0], [-1, 1], [0, -1], [0, 1], [1, -1], [1, 0], [1, 1]],
    dtype=np.int64,
)


@njit(cache=True)
def enumerate_dilated_pairs(
    labels: np.ndarray,
    dilation: int,
    neutral: int,
    offsets: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ordered (center, neighbor) pairs at one dilation, split fg / bg / neg.

    Count pass, then fill pass into exact-size arrays. Centers are visited
    row-major and offsets in ``offsets`` order, so output order is fixed.

    Args:
        labels: (H, W) uint8 label map
        dilation: Chebyshev distance of the 8 neighbours
        neutral: sentinel label excluded from every pair
        offsets: (8, 2) unit offsets

    Returns:
        fg, bg, neg arrays of shape (n, 2) int64 holding flat indices (i, j)
    """
    h, w = labels.shape
    n_off = offsets.shape[0]
    n_fg = 0
    n_bg = 0
    n_neg = 0
    for r in range(h):
        for c in range(w):
            li = labels[r, c]
            if li == neutral:
                continue
            for k in range(n_off):
                rr = r + offsets[k, 0] * dilation
                cc = c + offsets[k, 1] * dilation
                if rr < 0 or rr >= h or cc < 0 or cc >= w:
                    continue
                lj = labels[rr, cc]
                if lj == neutral:
                    continue
                if li != lj:
                    n_neg += 1
                elif li == 0:
                    n_bg += 1
                else:
                    n_fg += 1

    fg = np.empty((n_fg, 2), dtype=np.int64)
    bg = np.empty((n_bg, 2), dtype=np.int64)
    neg = np.empty((n_neg, 2), dtype=np.int64)
    a = 0
    b = 0
    q = 0
    for r in range(h):
        for c in range(w):
            li = labels[r, c]
            if li == neutral:
                continue
            i = r * w + c
            for k in range(n_off):
                rr = r + offsets[k, 0] * dilation
                cc = c + offsets[k, 1] * dilation
                if rr < 0 or rr >= h or cc < 0 or cc >= w:
                    continue
                lj = labels[rr, cc]
                if lj == neutral:
                    continue
                j = rr * w + cc
                if li != lj:
                    neg[q, 0] = i
                    neg[q, 1] = j
                    q += 1
                elif li == 0:
                    bg[b, 0] = i
                    bg[b, 1] = j
                    b += 1
                else:
                    fg[a, 0] = i
                    fg[a, 1] = j
                    a += 1
    return fg, bg, neg


@njit(cache=True, parallel=True)
def pair_divergence(
    probs: np.ndarray,
    logp: np.ndarray,
    pairs: np.ndarray,
    out: np.ndarray,
) -> None:
    """W_ij = sum_c p_ic * (logp_ic - logp_jc) for every pair, in parallel.

    Each pair writes only its own slot, so the result is independent of the
    thread count.
    """
    n = pairs.shape[0]
    n_cls = probs.shape[1]
    for k in prange(n):
        i = pairs[k, 0]
        j = pairs[k, 1]
        acc = 0.0
        for c in range(n_cls):
            acc += probs[i, c] * (logp[i, c] - logp[j, c])
        out[k] = acc


@njit(cache=True)
def scatter_divergence_grad(
    probs: np.ndarray,
    logp: np.ndarray,
    inv_p: np.ndarray,
    above_floor: np.ndarray,
    pairs: np.ndarray,
    coef: np.ndarray,
    grad: np.ndarray,
) -> None:
    """Accumulate coef_k * dW_k/dp into ``grad`` in pair order.

    dW/dp_ic = logp_ic - logp_jc + [p_ic > floor]
    dW/dp_jc = -p_ic / p_jc when p_jc > floor, else 0

    Serial so the floating-point accumulation order is fixed.
    """
    n = pairs.shape[0]
    n_cls = probs.shape[1]
    for k in range(n):
        g = coef[k]
        if g == 0.0:
            continue
        i = pairs[k, 0]
        j = pairs[k, 1]
        for c in range(n_cls):
            grad[i, c] += g * (logp[i, c] - logp[j, c] + above_floor[i, c])
            grad[j, c] -= g * probs[i, c] * inv_p[j, c]


@njit(cache=True)
def scatter_pair_weights(
    pairs: np.ndarray,
    weight: np.ndarray,
    to_i: np.ndarray,
    out: np.ndarray,
) -> None:
    """Route a per-pair scalar to the pixel chosen by ``to_i`` (1.0 -> i, 0.0 -> j, 0.5 -> half each)."""
    n = pairs.shape[0]
    for k in range(n):
        g = weight[k]
        if g == 0.0:
            continue
        share = to_i[k]
        out[pairs[k, 0]] += g * share
        out[pairs[k, 1]] += g * (1.0 - share)


def set_thread_count(threads: int) -> int:
    """Set numba's worker count, clamped to the pool size. Returns the value applied."""
    applied = max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS))
    if applied != threads:
        logger.warning("threads=%d clamped to %d (NUMBA_NUM_THREADS)", threads, applied)
    numba.set_num_threads(applied)
    return applied


def warmup_pipelines() -> None:
    """Pre-compile all numba functions with dummy data.

    Call this before timing-sensitive work so JIT compilation does not
    land inside the first measured iteration.
    """
    labels = np.array([[0, 1], [1, 255]], dtype=np.uint8)
    fg, _, neg = enumerate_dilated_pairs(labels, 1, 255, NEIGHBOR_OFFSETS)
    probs = np.full((4, 2), 0.5, dtype=np.float64)
    logp = np.log(probs)
    ones = np.ones_like(probs)
    out = np.zeros(neg.shape[0], dtype=np.float64)
    pair_divergence(probs, logp, neg, out)
    grad = np.zeros_like(probs)
    scatter_divergence_grad(probs, logp, ones, ones, neg, np.ones(neg.shape[0]), grad)
    conf_grad = np.zeros(4, dtype=np.float64)
    scatter_pair_weights(fg, np.ones(fg.shape[0]), np.ones(fg.shape[0]), conf_grad)
    logger.debug("numba pipelines compiled")
