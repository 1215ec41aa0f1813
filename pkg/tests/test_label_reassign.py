"""Tests for centroids, cosine reassignment and the label reassign loss."""

import numpy as np
import pytest

from affinity_refine.errors import ArgumentError, LrUndefinedError
from affinity_refine.losses.label_reassign import (
    LrConfig,
    compute_centroids,
    cosine_sim,
    lr_loss,
    lr_terms,
    modulation,
    reassign,
)
from affinity_refine.oracles import brute_lr_total
from affinity_refine.random_instances import random_blob_labels, random_conf, random_embed
from affinity_refine.tensor_core import LabelMap, Rng


def _instance(seed: int, h: int = 10, w: int = 10, c: int = 3, c1: int = 4):
    rng = Rng(seed)
    labels = random_blob_labels(rng, h, w, c)
    return random_embed(rng, h, w, c1), labels, random_conf(rng, h, w)


@pytest.mark.unit
class TestCentroids:
    def test_weighted_mean(self):
        labels = LabelMap.from_array([[1, 1], [0, 255]])
        embed = np.array([[[0.0], [4.0]], [[7.0], [9.0]]])
        conf = np.array([[1.0, 3.0], [0.5, 1.0]])
        cs = compute_centroids(embed, labels, conf)
        assert cs.classes == (0, 1)
        assert cs.centroid(1)[0] == pytest.approx(3.0)
        assert cs.centroid(0)[0] == 7.0
        assert cs.counts.tolist() == [1, 2]
        assert cs.weights.tolist() == [0.5, 4.0]

    def test_zero_weight_class_falls_back_to_plain_mean(self):
        labels = LabelMap.from_array([[0, 1, 1]])
        embed = np.array([[[1.0], [2.0], [6.0]]])
        cs = compute_centroids(embed, labels, np.array([[1.0, 0.0, 0.0]]))
        assert cs.centroid(1)[0] == pytest.approx(4.0)

    def test_single_class_is_undefined(self):
        labels = LabelMap.from_array([[2, 2], [255, 2]])
        with pytest.raises(LrUndefinedError, match="LR loss undefined"):
            compute_centroids(np.ones((2, 2, 3)), labels, np.ones((2, 2)))

    def test_conf_out_of_range(self):
        embed, labels, _ = _instance(0)
        with pytest.raises(ArgumentError):
            compute_centroids(embed, labels, np.full((10, 10), -0.1))


@pytest.mark.unit
class TestCosineAndModulation:
    def test_cosine_values(self):
        assert cosine_sim([2.0, 1.0], [2.0, 1.0]) == pytest.approx(1.0)
        assert cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0
        assert cosine_sim([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.707107, abs=1e-6)

    def test_zero_vector_is_guarded(self):
        assert cosine_sim([0.0, 0.0], [1.0, 0.0]) == 0.0

    def test_modulation_values(self):
        # shifted similarities 0.9 / 0.3 -> raw 0.8 / -0.4
        assert modulation(np.array([0.8]), np.array([-0.4]), 2.0)[0] == pytest.approx(0.25)
        assert modulation(np.array([0.8]), np.array([-0.4]), 0.0)[0] == 1.0
        assert modulation(np.array([0.3]), np.array([0.3]), 5.0)[0] == 1.0

    def test_modulation_shrinks_with_gap(self):
        second = np.full(5, 0.0)
        best = np.linspace(0.0, 1.0, 5)
        alpha = modulation(best, second, 2.0)
        assert np.all(np.diff(alpha) <= 0.0)
        assert alpha.min() >= 0.0 and alpha.max() <= 1.0


# ============================================================================
# Reassignment
# ============================================================================


@pytest.mark.unit
class TestReassign:
    def test_relabels_outlying_pixel(self):
        labels = LabelMap.from_array([[0, 0, 1]])
        embed = np.array([[[0.0, 1.0], [1.0, 0.05], [1.0, 0.0]]])
        conf = np.array([[1.0, 0.01, 1.0]])
        cfg = LrConfig(gamma=2.0)
        ra = reassign(embed, labels, compute_centroids(embed, labels, conf), cfg)
        assert ra.assigned.tolist() == [0, 1, 1]
        assert ra.changed == 1
        assert ra.counts() == (1, 2)
        assert ra.to_label_map().labels.tolist() == [[0, 1, 1]]
        assert np.all(ra.s_best >= ra.s_second)

    def test_neutral_pixels_stay_neutral(self):
        embed, labels, conf = _instance(1)
        ra = reassign(embed, labels, compute_centroids(embed, labels, conf), LrConfig())
        out = ra.to_label_map().labels
        neutral = labels.labels == 255
        assert np.all(out[neutral] == 255)
        assert set(np.unique(out[~neutral]).tolist()) <= set(labels.classes_present())

    def test_ties_go_to_lowest_class(self):
        labels = LabelMap.from_array([[0, 1, 2]])
        embed = np.ones((1, 3, 2))
        ra = reassign(embed, labels, compute_centroids(embed, labels, np.ones((1, 3))), LrConfig())
        assert ra.assigned.tolist() == [0, 0, 0]
        assert np.all(ra.alpha == 1.0)

    def test_gamma_zero_gives_unit_alpha(self):
        embed, labels, conf = _instance(2)
        ra = reassign(embed, labels, compute_centroids(embed, labels, conf), LrConfig(gamma=0.0))
        assert np.all(ra.alpha == 1.0)

    def test_positive_scaling_changes_nothing(self):
        embed, labels, conf = _instance(3)
        cfg = LrConfig()
        a = reassign(embed, labels, compute_centroids(embed, labels, conf), cfg)
        scaled = embed * 7.5
        b = reassign(scaled, labels, compute_centroids(scaled, labels, conf), cfg)
        assert np.array_equal(a.assigned, b.assigned)
        np.testing.assert_allclose(a.s_best, b.s_best, atol=1e-12)
        np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-12)

    def test_centroid_width_mismatch(self):
        embed, labels, conf = _instance(4)
        cs = compute_centroids(embed, labels, conf)
        with pytest.raises(ArgumentError):
            reassign(embed[:, :, :2], labels, cs, LrConfig())


# ============================================================================
# LR loss
# ============================================================================


@pytest.mark.unit
class TestLrLoss:
    ORTHO_LABELS = LabelMap.from_array([[0, 1]])
    ORTHO_EMBED = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    ORTHO_CONF = np.ones((1, 2))

    def test_orthogonal_centroids_unit_margin(self):
        report = lr_loss(self.ORTHO_EMBED, self.ORTHO_LABELS, self.ORTHO_CONF, LrConfig(margin_n=1.0, gamma=0.0))
        assert report.total == 0.0

    def test_orthogonal_centroids_wider_margin(self):
        report = lr_loss(self.ORTHO_EMBED, self.ORTHO_LABELS, self.ORTHO_CONF, LrConfig(margin_n=1.5, gamma=0.0))
        assert report.l_minus == pytest.approx(0.5)
        assert report.l_plus == pytest.approx(0.5)
        assert report.total == pytest.approx(1.0)

    def test_orthogonal_centroids_modulated(self):
        report = lr_loss(self.ORTHO_EMBED, self.ORTHO_LABELS, self.ORTHO_CONF, LrConfig(margin_n=1.5, gamma=2.0))
        # shifted best 1.0, runner-up 0.5 -> alpha = (2/3)^2
        assert report.total == pytest.approx(2 * 0.5 * (2.0 / 3.0) ** 2)

    def test_identical_embeddings_open_every_hinge(self):
        labels = LabelMap.from_array([[0, 1], [2, 1]])
        embed = np.tile([1.0, 2.0, 3.0], (2, 2, 1))
        report = lr_loss(embed, labels, np.ones((2, 2)), LrConfig(gamma=0.0))
        # everything ties to class 0: one part, two open hinges of n each
        assert report.l_plus == 0.0
        assert report.l_minus == pytest.approx(2.0)
        assert report.reassignment.changed == 3

    def test_matches_brute_force(self):
        for seed in range(10):
            embed, labels, conf = _instance(seed, 9, 11, 4, 5)
            for gamma in (0.0, 2.0):
                cfg = LrConfig(gamma=gamma)
                got = lr_loss(embed, labels, conf, cfg).total
                assert abs(got - brute_lr_total(embed, labels, conf, gamma=gamma)) < 1e-10

    def test_gamma_zero_equals_unit_alpha_reference(self):
        embed, labels, conf = _instance(5)
        cfg = LrConfig(gamma=0.0)
        report = lr_loss(embed, labels, conf, cfg)
        ra = report.reassignment
        cs = report.centroids
        x = embed.reshape(-1, embed.shape[2])[ra.pixels]
        l_minus, l_plus, _, _ = lr_terms(
            x, cs.normalized(cfg.sim_eps), ra.assigned_index, np.ones(ra.pixels.size), ra.fg_mask,
            cfg.margin_n, cfg.sim_eps,
        )
        assert report.l_minus == l_minus and report.l_plus == l_plus
        assert abs(report.total - brute_lr_total(embed, labels, conf, gamma=2.0, unit_alpha=True)) < 1e-10

    def test_large_gamma_drives_loss_down(self):
        embed, labels, conf = _instance(6)
        low = lr_loss(embed, labels, conf, LrConfig(gamma=0.0)).total
        high = lr_loss(embed, labels, conf, LrConfig(gamma=50.0)).total
        assert high < low

    def test_gradient_only_on_labelled_pixels(self):
        embed, labels, conf = _instance(7)
        report = lr_loss(embed, labels, conf, LrConfig())
        assert report.grad.shape == embed.shape
        assert not report.grad[labels.labels == 255].any()

    def test_to_dict_names_both_parts(self):
        embed, labels, conf = _instance(8)
        d = lr_loss(embed, labels, conf, LrConfig()).to_dict()
        assert set(d) == {"total", "l_minus", "l_plus"}

    @pytest.mark.parametrize("bad", [{"margin_n": 0.0}, {"gamma": -1.0}, {"sim_eps": 0.0}, {"extra": 1}])
    def test_invalid_config(self, bad):
        with pytest.raises(ArgumentError):
            LrConfig.from_dict(bad)
