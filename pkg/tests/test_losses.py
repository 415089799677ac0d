"""Cross-entropy and additive-margin softmax behaviour."""

import numpy as np
import pytest

from spkvlad import losses, tensor as t
from spkvlad.losses import AmSoftmaxConfig
from spkvlad.tensor import Tensor


def naive_ce(logits, labels):
    """Direct exp/sum transcription, float64."""
    out = 0.0
    for row, y in zip(logits, labels):
        p = np.exp(row) / np.exp(row).sum()
        out -= np.log(p[y])
    return out / len(labels)


class TestSoftmaxCe:
    def test_two_equal_logits(self):
        loss = losses.softmax_ce(Tensor(np.array([[0.0, 0.0]])), [0])
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_extreme_logits_no_overflow(self):
        loss = losses.softmax_ce(Tensor(np.array([[10.0, -10.0]])), [0])
        assert loss.item() == pytest.approx(np.log1p(np.exp(-20.0)), rel=1e-6)
        loss = losses.softmax_ce(Tensor(np.array([[1000.0, 0.0]])), [0])
        assert np.isfinite(loss.item())

    def test_matches_naive_evaluation(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((3, 5)) * 3
        labels = rng.integers(0, 5, size=3)
        ours = losses.softmax_ce(Tensor(logits), labels).item()
        assert ours == pytest.approx(naive_ce(logits, labels), abs=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            losses.softmax_ce(Tensor(np.zeros((2, 3))), [0, 3])

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            logits = rng.standard_normal((4, 6)) * 5
            labels = rng.integers(0, 6, size=4)
            assert losses.softmax_ce(Tensor(logits), labels).item() >= 0

    def test_gradients(self):
        rng = np.random.default_rng(2)
        logits = t.parameter(rng.standard_normal((3, 5)))
        labels = np.array([0, 2, 4])
        err = t.grad_check(lambda: losses.softmax_ce(logits, labels), [logits])
        assert err < 1e-4


class TestAmSoftmax:
    def test_degenerates_to_ce_on_cosine_logits(self):
        rng = np.random.default_rng(3)
        cfg = AmSoftmaxConfig(margin=0.0, scale=1.0, num_classes=5)
        for _ in range(20):
            feats = Tensor(rng.standard_normal((4, 6)))
            weights = Tensor(rng.standard_normal((5, 6)))
            labels = rng.integers(0, 5, size=4)
            am = losses.am_softmax(feats, weights, labels, cfg).item()
            cos = losses.cosine_logits(feats, weights)
            ce = losses.softmax_ce(cos, labels).item()
            assert am == pytest.approx(ce, abs=1e-10)

    def test_closed_form_perfect_separation(self):
        # cos(correct) = 1, cos(other) = -1, m=0.4, s=30:
        # L = -log(e^18 / (e^18 + e^-30)) = log1p(e^-48), numerically 0.
        feats = Tensor(np.array([[1.0, 0.0]]))
        weights = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        cfg = AmSoftmaxConfig(margin=0.4, scale=30.0, num_classes=2)
        loss = losses.am_softmax(feats, weights, [0], cfg).item()
        assert 0.0 <= loss < 1e-15

    def test_loss_strictly_decreases_in_correct_cosine(self):
        cfg = AmSoftmaxConfig(margin=0.4, scale=30.0, num_classes=2)
        weights = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        prev = np.inf
        for angle in np.linspace(1.2, 0.0, 8):
            feat = np.array([[np.cos(angle), np.sin(angle)]])
            loss = losses.am_softmax(Tensor(feat), weights, [0], cfg).item()
            assert loss < prev
            prev = loss

    def test_invariant_to_feature_rescaling(self):
        rng = np.random.default_rng(4)
        cfg = AmSoftmaxConfig(margin=0.4, scale=30.0, num_classes=4)
        feats = rng.standard_normal((3, 5))
        weights = Tensor(rng.standard_normal((4, 5)))
        labels = np.array([1, 0, 3])
        base = losses.am_softmax(Tensor(feats), weights, labels, cfg).item()
        for scale in (0.1, 2.7, 1000.0):
            scaled = losses.am_softmax(Tensor(feats * scale), weights, labels, cfg).item()
            assert scaled == pytest.approx(base, abs=1e-6)

    def test_zero_norm_feature_bumps_counter(self):
        cfg = AmSoftmaxConfig(margin=0.1, scale=5.0, num_classes=2)
        feats = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]))
        weights = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        before = losses.zero_norm_feature_count
        loss = losses.am_softmax(feats, weights, [0, 1], cfg)
        assert losses.zero_norm_feature_count == before + 1
        assert np.isfinite(loss.item())

    def test_gradients_through_both_normalizations(self):
        rng = np.random.default_rng(5)
        feats = t.parameter(rng.standard_normal((4, 6)))
        weights = t.parameter(rng.standard_normal((5, 6)))
        labels = np.array([0, 1, 4, 2])
        cfg = AmSoftmaxConfig(margin=0.4, scale=30.0, num_classes=5)
        err = t.grad_check(lambda: losses.am_softmax(feats, weights, labels, cfg),
                           [feats, weights])
        assert err < 1e-4

    def test_config_validation(self):
        with pytest.raises(ValueError, match="margin"):
            AmSoftmaxConfig(margin=1.0, scale=30.0, num_classes=3)
        with pytest.raises(ValueError, match="classes"):
            AmSoftmaxConfig(margin=0.4, scale=30.0, num_classes=1)
