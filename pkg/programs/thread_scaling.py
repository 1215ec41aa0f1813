"""Thread scaling of the affinity loss.

Times forward + backward on one random instance for several numba thread
counts and checks that every count gives the same total.
"""

from affinity_refine.common.timing import PhaseTimer, format_rate_summary
from affinity_refine.losses.affinity import AffinityConfig, affinity_loss
from affinity_refine.numba_pipelines import set_thread_count, warmup_pipelines
from affinity_refine.pair_graph import KernelSet, build_pairs
from affinity_refine.random_instances import random_blob_labels, random_conf, random_probs
from affinity_refine.tensor_core import Rng

H, W, C = 96, 96, 5
REPEAT = 3

rng = Rng(0)
labels = random_blob_labels(rng, H, W, C)
probs = random_probs(rng, H, W, C)
conf = random_conf(rng, H, W)
cfg = AffinityConfig(kernels=KernelSet.of([1, 2, 4, 8]))
pairs = build_pairs(labels, cfg.kernels)
warmup_pipelines()

totals = {}
for threads in (1, 2, 4):
    applied = set_thread_count(threads)
    timer = PhaseTimer(["loss"])
    for _ in range(REPEAT):
        with timer.phase("loss"):
            totals[applied] = affinity_loss(probs, conf, pairs, cfg).total
    timer.summary()
    print(f"threads={applied}: {format_rate_summary(timer.phases['loss'], pairs.total, 'pairs')}")

set_thread_count(1)
print(f"\nidentical totals across thread counts: {len(set(totals.values())) == 1}")
