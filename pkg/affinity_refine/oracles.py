"""Brute-force reference implementations in plain Python loops.

Nothing here shares code with the vectorised / numba paths beyond the input
types: pairs come from a direct scan of all displacements, losses from scalar
loops with ``math.log``. Used by the oracle tests and by ``self-test``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from affinity_refine.constants import (
    BACKGROUND_CLASS,
    DEFAULT_GAMMA,
    DEFAULT_MARGIN_M,
    DEFAULT_MARGIN_N,
    DEFAULT_PROB_FLOOR,
    DEFAULT_SIM_EPS,
    NEUTRAL_LABEL,
)
from affinity_refine.errors import ContractViolation
from affinity_refine.losses.affinity import AffinityConfig, AffinityMode, ModelingFn, affinity_loss
from affinity_refine.losses.label_reassign import LrConfig, lr_loss
from affinity_refine.metrics import miou
from affinity_refine.pair_graph import KernelSet, build_pairs
from affinity_refine.random_instances import (
    random_blob_labels,
    random_conf,
    random_embed,
    random_labels,
    random_probs,
)
from affinity_refine.tensor_core import LabelMap, Rng

logger = logging.getLogger(__name__)

LOSS_TOLERANCE = 1e-10

Pair = tuple[int, int]


def brute_pairs(labels: list[list[int]], dilation: int) -> tuple[list[Pair], list[Pair], list[Pair]]:
    """Ordered (i, j) pairs at Chebyshev offset ``dilation`` along the 8 directions."""
    h = len(labels)
    w = len(labels[0])
    displacements = [
        (dy * dilation, dx * dilation) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)
    ]
    fg: list[Pair] = []
    bg: list[Pair] = []
    neg: list[Pair] = []
    for r in range(h):
        for c in range(w):
            a = labels[r][c]
            if a == NEUTRAL_LABEL:
                continue
            for dy, dx in displacements:
                rr, cc = r + dy, c + dx
                if not (0 <= rr < h and 0 <= cc < w):
                    continue
                b = labels[rr][cc]
                if b == NEUTRAL_LABEL:
                    continue
                pair = (r * w + c, rr * w + cc)
                if a != b:
                    neg.append(pair)
                elif a == BACKGROUND_CLASS:
                    bg.append(pair)
                else:
                    fg.append(pair)
    return fg, bg, neg


def _kl(p: list[float], q: list[float], floor: float) -> float:
    total = 0.0
    for pc, qc in zip(p, q, strict=True):
        total += pc * (math.log(max(pc, floor)) - math.log(max(qc, floor)))
    return total


def _omega(v_i: float, v_j: float, fn: str) -> float:
    if fn == "max":
        return max(v_i, v_j)
    if fn == "min":
        return min(v_i, v_j)
    return (v_i + v_j) / 2.0


def brute_affinity_total(
    probs: np.ndarray,
    conf: np.ndarray | None,
    labels: LabelMap,
    dilations: tuple[int, ...],
    margin_m: float = DEFAULT_MARGIN_M,
    modeling_fn: str = "max",
    floor: float = DEFAULT_PROB_FLOOR,
) -> float:
    """SA total when ``conf`` is None, AA total otherwise."""
    h, w, _ = probs.shape
    p = probs.reshape(h * w, -1).tolist()
    v = None if conf is None else conf.reshape(-1).tolist()
    lab = labels.labels.tolist()
    total = 0.0
    for d in dilations:
        fg, bg, neg = brute_pairs(lab, d)
        parts = []
        for pairs in (fg, bg):
            acc = 0.0
            for i, j in pairs:
                omega = 1.0 if v is None else _omega(v[i], v[j], modeling_fn)
                acc += omega * _kl(p[i], p[j], floor)
            parts.append(acc / len(pairs) if pairs else 0.0)
        acc = 0.0
        for i, j in neg:
            omega = 1.0 if v is None else _omega(v[i], v[j], modeling_fn)
            acc += max(0.0, omega * margin_m - _kl(p[i], p[j], floor))
        parts.append(acc / len(neg) if neg else 0.0)
        total += parts[0] + parts[1] + 2.0 * parts[2]
    return total


def _norm(x: list[float]) -> float:
    return math.sqrt(sum(a * a for a in x))


def _cos(a: list[float], b: list[float], eps: float) -> float:
    dot = sum(x * y for x, y in zip(a, b, strict=True))
    value = dot / (max(_norm(a), eps) * max(_norm(b), eps))
    return min(1.0, max(-1.0, value))


def brute_lr_total(
    embed: np.ndarray,
    labels: LabelMap,
    conf: np.ndarray,
    margin_n: float = DEFAULT_MARGIN_N,
    gamma: float = DEFAULT_GAMMA,
    eps: float = DEFAULT_SIM_EPS,
    unit_alpha: bool = False,
) -> float:
    """Label reassign total; ``unit_alpha`` forces alpha = 1 for every pixel."""
    h, w, c1 = embed.shape
    e = embed.reshape(h * w, c1).tolist()
    v = conf.reshape(-1).tolist()
    lab = labels.labels.reshape(-1).tolist()

    classes = sorted({k for k in lab if k != NEUTRAL_LABEL})
    centroids: list[list[float]] = []
    for k in classes:
        members = [i for i, value in enumerate(lab) if value == k]
        weight = sum(v[i] for i in members)
        if weight > 0.0:
            row = [sum(v[i] * e[i][ch] for i in members) / weight for ch in range(c1)]
        else:
            row = [sum(e[i][ch] for i in members) / len(members) for ch in range(c1)]
        centroids.append(row)

    sums = {True: 0.0, False: 0.0}
    sizes = {True: 0, False: 0}
    for i, value in enumerate(lab):
        if value == NEUTRAL_LABEL:
            continue
        sims = [_cos(e[i], c, eps) for c in centroids]
        best = 0
        for k in range(1, len(sims)):
            if sims[k] > sims[best]:
                best = k
        second = max(s for k, s in enumerate(sims) if k != best)
        if unit_alpha:
            alpha = 1.0
        else:
            b, s = (1.0 + sims[best]) / 2.0, (1.0 + second) / 2.0
            gap = (b - s) / (b + s) if b + s > 0.0 else 0.0
            alpha = min(1.0, max(0.0, 1.0 - gap)) ** gamma
        inner = 0.0
        for k, s in enumerate(sims):
            if k != best:
                inner += max(0.0, margin_n + s - sims[best])
        is_fg = classes[best] != BACKGROUND_CLASS
        sums[is_fg] += alpha * inner
        sizes[is_fg] += 1
    total = 0.0
    for part in (False, True):
        if sizes[part]:
            total += sums[part] / sizes[part]
    return total


def brute_miou(pred: LabelMap, gt: LabelMap, num_classes: int) -> float:
    """Mean IoU over classes present in either map; neutral gt pixels ignored."""
    p = pred.labels.reshape(-1).tolist()
    g = gt.labels.reshape(-1).tolist()
    ious = []
    for k in range(num_classes):
        inter = union = 0
        seen = False
        for a, b in zip(p, g, strict=True):
            if b == NEUTRAL_LABEL:
                continue
            if a == k or b == k:
                seen = True
                union += 1
                if a == k and b == k:
                    inter += 1
        if seen:
            ious.append(inter / union)
    return sum(ious) / len(ious) if ious else 0.0


@dataclass(slots=True)
class OracleCheck:
    name: str
    instances: int = 0
    max_abs_diff: float = 0.0
    mismatches: list[int] = field(default_factory=list)  # seeds that failed

    @property
    def passed(self) -> bool:
        return not self.mismatches

    def record(self, seed: int, diff: float, ok: bool) -> None:
        self.instances += 1
        self.max_abs_diff = max(self.max_abs_diff, diff)
        if not ok:
            self.mismatches.append(seed)

    def to_dict(self) -> dict[str, object]:
        return {
            "instances": self.instances,
            "max_abs_diff": self.max_abs_diff,
            "mismatches": list(self.mismatches),
            "passed": self.passed,
        }


def _instance_size(rng: Rng) -> tuple[int, int, int]:
    return 2 + rng.integers(15), 2 + rng.integers(15), 2 + rng.integers(3)


def run_oracles(instances: int = 100, seed: int = 0) -> dict[str, OracleCheck]:
    """Compare every library path against its brute-force reference on seeded instances up to 16x16."""
    checks = {name: OracleCheck(name) for name in ("build_pairs", "sa_loss", "aa_loss", "lr_loss", "miou")}
    root = Rng(seed)
    for k in range(instances):
        inst_seed = root.next_u64()
        rng = Rng(inst_seed)
        h, w, c = _instance_size(rng)
        labels = random_blob_labels(rng, h, w, c)
        dilations = tuple(d for d in (1, 2, 3) if d < max(h, w))
        kernels = KernelSet(dilations)
        pairs = build_pairs(labels, kernels)

        lab = labels.labels.tolist()
        same = True
        for group in pairs.by_dilation:
            ref = brute_pairs(lab, group.dilation)
            got = (group.fg_pos, group.bg_pos, group.neg)
            for r, g in zip(ref, got, strict=True):
                same = same and [tuple(x) for x in g.tolist()] == r
        checks["build_pairs"].record(k, 0.0, same)

        probs = random_probs(rng, h, w, c)
        conf = random_conf(rng, h, w)
        fn = ("max", "min", "plus")[k % 3]
        sa = affinity_loss(probs, None, pairs, AffinityConfig(kernels=kernels, mode=AffinityMode.SA)).total
        diff = abs(sa - brute_affinity_total(probs, None, labels, dilations))
        checks["sa_loss"].record(k, diff, diff < LOSS_TOLERANCE)
        aa_cfg = AffinityConfig(kernels=kernels, mode=AffinityMode.AA, modeling_fn=ModelingFn(fn))
        aa = affinity_loss(probs, conf, pairs, aa_cfg).total
        diff = abs(aa - brute_affinity_total(probs, conf, labels, dilations, modeling_fn=fn))
        checks["aa_loss"].record(k, diff, diff < LOSS_TOLERANCE)

        lr_labels = random_labels(rng, h, w, c)
        if len(lr_labels.classes_present()) >= 2:
            embed = random_embed(rng, h, w, 4)
            gamma = (0.0, 0.5, 2.0)[k % 3]
            got_lr = lr_loss(embed, lr_labels, conf, LrConfig(gamma=gamma)).total
            diff = abs(got_lr - brute_lr_total(embed, lr_labels, conf, gamma=gamma))
            checks["lr_loss"].record(k, diff, diff < LOSS_TOLERANCE)

        pred = random_labels(rng, h, w, c, neutral_frac=0.05)
        diff = abs(miou(pred, labels, c).mean - brute_miou(pred, labels, c))
        checks["miou"].record(k, diff, diff < 1e-12)

    for check in checks.values():
        logger.info("oracle %s: %d instances, max |diff| %.3g", check.name, check.instances, check.max_abs_diff)
    return checks


def self_test(instances: int = 100, seed: int = 0) -> dict[str, object]:
    """Run the oracles; raise ContractViolation carrying the report on any mismatch."""
    checks = run_oracles(instances, seed)
    report: dict[str, object] = {
        "instances": instances,
        "seed": seed,
        "checks": {name: c.to_dict() for name, c in checks.items()},
        "passed": all(c.passed for c in checks.values()),
    }
    if not report["passed"]:
        failed = ", ".join(name for name, c in checks.items() if not c.passed)
        raise ContractViolation(f"oracle mismatch in: {failed}", payload=report)
    return report
