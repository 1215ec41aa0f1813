"""Adaptive affinity under the three confidence modeling functions.

Evaluates SA and AA (max / min / plus) on the same probability map and
pseudo-labels, with confidence taken from a synthetic scene.
"""

import numpy as np
from scipy.special import softmax

from affinity_refine.losses.affinity import AffinityConfig, AffinityMode, ModelingFn, affinity_loss
from affinity_refine.pair_graph import KernelSet, build_pairs, pair_counts
from affinity_refine.synth import SceneSpec, generate
from affinity_refine.tensor_core import Rng

scene = generate(SceneSpec(height=48, width=48, seed=11))
kernels = KernelSet.of([1, 2, 4])
pairs = build_pairs(scene.pseudo, kernels)
for d, (fg, bg, neg) in pair_counts(pairs).items():
    print(f"dilation {d:>2}: fg {fg:>5}  bg {bg:>5}  neg {neg:>5}")

# A blurry prediction: one-hot ground truth plus noise, softened
logits = 2.0 * np.eye(scene.num_classes)[scene.gt.labels] + Rng(0).normal_array((48, 48, scene.num_classes))
probs = softmax(logits, axis=2)
conf = scene.conf.to_float64()

sa = affinity_loss(probs, None, pairs, AffinityConfig(kernels=kernels, mode=AffinityMode.SA))
print(f"\nSA          total {sa.total:.4f}")
for fn in ModelingFn:
    aa = affinity_loss(probs, conf, pairs, AffinityConfig(kernels=kernels, modeling_fn=fn))
    print(f"AA ({fn.value:<4})   total {aa.total:.4f}")
