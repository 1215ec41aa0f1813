"""Tests for the standard and adaptive affinity losses."""

import math
from dataclasses import replace

import numpy as np
import pytest

from affinity_refine.errors import ArgumentError
from affinity_refine.losses.affinity import (
    AffinityConfig,
    AffinityMode,
    ModelingFn,
    aa_loss,
    affinity_loss,
    connectivity,
    kl_pair,
    sa_loss,
)
from affinity_refine.numba_pipelines import set_thread_count
from affinity_refine.oracles import brute_affinity_total
from affinity_refine.pair_graph import KernelSet, build_pairs
from affinity_refine.random_instances import random_blob_labels, random_conf, random_probs
from affinity_refine.tensor_core import DenseTensor, LabelMap, Rng

SA = AffinityConfig(kernels=KernelSet.of([1]), mode=AffinityMode.SA)
AA = AffinityConfig(kernels=KernelSet.of([1]), mode=AffinityMode.AA)


def _instance(seed: int, h: int = 12, w: int = 12, c: int = 3):
    rng = Rng(seed)
    labels = random_blob_labels(rng, h, w, c)
    return labels, random_probs(rng, h, w, c), random_conf(rng, h, w)


# ============================================================================
# Scalar building blocks
# ============================================================================


@pytest.mark.unit
class TestKlPair:
    def test_identical_distributions(self):
        assert kl_pair([0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_direct_evaluation(self):
        expected = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
        assert kl_pair([0.8, 0.2], [0.5, 0.5]) == pytest.approx(expected, abs=1e-12)
        assert kl_pair([0.8, 0.2], [0.5, 0.5]) == pytest.approx(0.192745, abs=1e-6)

    def test_zero_entry_hits_the_floor(self):
        assert kl_pair([1.0, 0.0], [0.5, 0.5], floor=1e-8) == pytest.approx(math.log(2.0), abs=2e-7)

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            kl_pair([0.5, 0.5], [1.0])


@pytest.mark.unit
class TestConnectivity:
    def test_modeling_functions(self):
        assert connectivity(0.3, 0.8, ModelingFn.MAX) == 0.8
        assert connectivity(0.3, 0.8, ModelingFn.MIN) == 0.3
        assert connectivity(0.3, 0.8, "plus") == pytest.approx(0.55)

    @pytest.mark.parametrize("fn", list(ModelingFn))
    def test_full_confidence(self, fn):
        assert connectivity(1.0, 1.0, fn) == 1.0

    def test_out_of_range(self):
        with pytest.raises(ArgumentError):
            connectivity(1.2, 0.5)


@pytest.mark.unit
class TestAffinityConfig:
    def test_defaults(self):
        cfg = AffinityConfig()
        assert cfg.margin_m == 3.0
        assert cfg.kernels.dilations == (4, 8, 12, 24)
        assert cfg.mode is AffinityMode.AA and cfg.modeling_fn is ModelingFn.MAX
        assert cfg.detach_conf is True

    def test_dict_round_trip_and_coercion(self):
        cfg = AffinityConfig.from_dict({"kernels": "1-2-4", "mode": "SA", "modeling_fn": "min"})
        assert cfg.kernels.dilations == (1, 2, 4)
        assert AffinityConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize(
        "bad", [{"margin_m": 0.0}, {"prob_floor": 0.0}, {"prob_floor": 0.01}, {"mode": "xx"}, {"bogus": 1}]
    )
    def test_invalid_values(self, bad):
        with pytest.raises(ArgumentError):
            AffinityConfig.from_dict(bad)


# ============================================================================
# SA / AA totals
# ============================================================================


@pytest.mark.unit
class TestSaLoss:
    def test_two_by_two_example(self, two_by_two_labels, two_by_two_probs):
        pairs = build_pairs(two_by_two_labels, SA.kernels)
        report = sa_loss(two_by_two_probs, pairs, SA)
        # fg pairs compare identical rows; all four negatives have W = 0.8 ln 9
        expected = 2.0 * (3.0 - 0.8 * math.log(9.0))
        assert report.total == pytest.approx(expected, abs=1e-12)
        brute = brute_affinity_total(two_by_two_probs, None, two_by_two_labels, (1,))
        assert abs(report.total - brute) < 1e-10
        (terms,) = report.per_dilation
        assert terms.fg == 0.0 and terms.bg == 0.0
        assert terms.counts == (2, 0, 4)

    def test_uniform_probs_open_every_hinge(self):
        # class = flat index mod 3: every row holds neighbours of different classes
        labels = LabelMap.from_array((np.arange(144).reshape(12, 12) % 3).astype(np.uint8))
        probs = np.full((12, 12, 3), 1.0 / 3.0)
        cfg = replace(SA, kernels=KernelSet.of([1, 2]))
        report = sa_loss(probs, build_pairs(labels, cfg.kernels), cfg)
        for t in report.per_dilation:
            assert t.fg == 0.0 and t.bg == 0.0
            assert t.neg == pytest.approx(3.0)
        assert report.total == pytest.approx(2 * 2 * 3.0)

    def test_reduction_identity(self):
        labels, probs, _ = _instance(2)
        cfg = replace(SA, kernels=KernelSet.of([1, 2, 3]))
        report = sa_loss(probs, build_pairs(labels, cfg.kernels), cfg)
        assembled = 0.0
        for t in report.per_dilation:
            assembled += t.fg + t.bg + 2.0 * t.neg
        assert report.total == assembled

    def test_doubling_margin_changes_only_negatives(self):
        labels, probs, _ = _instance(3)
        pairs = build_pairs(labels, SA.kernels)
        a = sa_loss(probs, pairs, SA).per_dilation[0]
        b = sa_loss(probs, pairs, replace(SA, margin_m=6.0)).per_dilation[0]
        assert (a.fg, a.bg) == (b.fg, b.bg)
        assert b.neg > a.neg

    def test_empty_pair_set_gives_zero(self):
        labels = LabelMap.full(4, 4, 255)
        probs = np.full((4, 4, 2), 0.5)
        report = sa_loss(probs, build_pairs(labels, SA.kernels), SA)
        assert report.total == 0.0
        assert not report.grad_probs.any()

    def test_rejects_non_distributions(self):
        labels, probs, _ = _instance(4)
        with pytest.raises(ArgumentError):
            sa_loss(probs * 2.0, build_pairs(labels, SA.kernels), SA)

    def test_wrong_mode(self):
        labels, probs, _ = _instance(4)
        with pytest.raises(ArgumentError):
            sa_loss(probs, build_pairs(labels, AA.kernels), AA)

    def test_accepts_dense_tensor(self):
        labels, probs, _ = _instance(5)
        pairs = build_pairs(labels, SA.kernels)
        t = DenseTensor.from_array(probs)
        assert sa_loss(t, pairs, SA).total == sa_loss(t.to_float64(), pairs, SA).total


@pytest.mark.unit
class TestAaLoss:
    def test_unit_confidence_matches_sa_bit_for_bit(self):
        for seed in range(5):
            labels, probs, _ = _instance(seed)
            cfg_sa = replace(SA, kernels=KernelSet.of([1, 2]))
            pairs = build_pairs(labels, cfg_sa.kernels)
            ones = np.ones((12, 12))
            for fn in ModelingFn:
                cfg_aa = replace(cfg_sa, mode=AffinityMode.AA, modeling_fn=fn)
                aa = aa_loss(probs, ones, pairs, cfg_aa)
                sa = sa_loss(probs, pairs, cfg_sa)
                assert aa.total == sa.total
                assert np.array_equal(aa.grad_probs, sa.grad_probs)

    def test_single_negative_pair_hand_value(self):
        labels = LabelMap.from_array([[0, 1], [255, 255]])
        probs = np.array([[[0.7, 0.3], [0.2, 0.8]], [[0.5, 0.5], [0.5, 0.5]]])
        conf = np.array([[0.5, 0.2], [0.0, 0.0]])
        pairs = build_pairs(labels, AA.kernels)
        report = aa_loss(probs, conf, pairs, AA)
        w_01 = kl_pair([0.7, 0.3], [0.2, 0.8])
        w_10 = kl_pair([0.2, 0.8], [0.7, 0.3])
        neg = (max(0.0, 0.5 * 3.0 - w_01) + max(0.0, 0.5 * 3.0 - w_10)) / 2.0
        assert report.per_dilation[0].neg == pytest.approx(neg, abs=1e-12)
        assert report.total == pytest.approx(2.0 * neg, abs=1e-12)
        assert report.per_dilation[0].counts == (0, 0, 2)

    def test_zero_confidence_annihilates(self):
        labels, probs, _ = _instance(6)
        report = aa_loss(probs, np.zeros((12, 12)), build_pairs(labels, AA.kernels), AA)
        assert report.total == 0.0

    def test_matches_brute_force(self):
        for seed in range(10):
            labels, probs, conf = _instance(seed, 9, 13, 4)
            for fn in ModelingFn:
                cfg = replace(AA, kernels=KernelSet.of([1, 2]), modeling_fn=fn)
                got = aa_loss(probs, conf, build_pairs(labels, cfg.kernels), cfg).total
                brute = brute_affinity_total(probs, conf, labels, (1, 2), modeling_fn=fn.value)
                assert abs(got - brute) < 1e-10

    def test_raising_positive_omega_never_lowers_loss(self):
        labels, probs, conf = _instance(7)
        pairs = build_pairs(labels, AA.kernels)
        base = aa_loss(probs, conf, pairs, AA)
        fg = pairs.by_dilation[0].fg_pos
        if fg.shape[0]:
            i = int(fg[0, 0])
            bumped = conf.copy().reshape(-1)
            bumped[i] = 1.0
            after = aa_loss(probs, bumped.reshape(12, 12), pairs, AA)
            assert after.per_dilation[0].fg >= base.per_dilation[0].fg

    def test_conf_dims_mismatch(self):
        labels, probs, _ = _instance(8)
        with pytest.raises(ArgumentError):
            aa_loss(probs, np.ones((6, 6)), build_pairs(labels, AA.kernels), AA)

    def test_conf_out_of_range(self):
        labels, probs, _ = _instance(8)
        with pytest.raises(ArgumentError):
            aa_loss(probs, np.full((12, 12), 1.5), build_pairs(labels, AA.kernels), AA)

    def test_conf_gradient_only_when_requested(self):
        labels, probs, conf = _instance(9)
        pairs = build_pairs(labels, AA.kernels)
        assert aa_loss(probs, conf, pairs, AA).grad_conf is None
        report = aa_loss(probs, conf, pairs, replace(AA, detach_conf=False))
        assert report.grad_conf is not None and report.grad_conf.shape == (12, 12)


@pytest.mark.unit
class TestAffinityDispatch:
    def test_dispatch_by_mode(self):
        labels, probs, conf = _instance(10)
        pairs = build_pairs(labels, SA.kernels)
        assert affinity_loss(probs, conf, pairs, SA).total == sa_loss(probs, pairs, SA).total
        assert affinity_loss(probs, conf, pairs, AA).total == aa_loss(probs, conf, pairs, AA).total

    def test_aa_needs_confidence(self):
        labels, probs, _ = _instance(10)
        with pytest.raises(ArgumentError, match="confidence"):
            affinity_loss(probs, None, build_pairs(labels, AA.kernels), AA)

    def test_report_dict_layout(self):
        labels, probs, conf = _instance(11)
        cfg = replace(AA, kernels=KernelSet.of([1, 2]))
        d = affinity_loss(probs, conf, build_pairs(labels, cfg.kernels), cfg).to_dict()
        assert set(d) == {"total", "per_dilation"}
        assert set(d["per_dilation"]) == {"1", "2"}
        assert set(d["per_dilation"]["1"]) == {"fg", "bg", "neg", "counts"}


@pytest.mark.integration
class TestThreadDeterminism:
    def test_thread_count_does_not_change_totals(self):
        labels, probs, conf = _instance(12, 48, 48, 5)
        cfg = replace(AA, kernels=KernelSet.of([1, 2, 4, 8]))
        pairs = build_pairs(labels, cfg.kernels)
        set_thread_count(1)
        one = affinity_loss(probs, conf, pairs, cfg)
        set_thread_count(4)
        four = affinity_loss(probs, conf, pairs, cfg)
        assert one.total == four.total
        assert np.array_equal(one.grad_probs, four.grad_probs)
