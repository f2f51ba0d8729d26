"""Tests for attention scores, probabilities, weights, and their loss."""

import math

import numpy as np
import pytest

from attnmil import attention as att
from attnmil import autodiff as ad
from attnmil.autodiff import Tape, Tensor
from attnmil.backbone import FeatureMap
from attnmil.errors import ShapeMismatchError


def feature_map(rows, tape=None):
    rows = np.asarray(rows, dtype=np.float64)
    return FeatureMap(Tensor(rows, tape), depth=1, height=1, width=rows.shape[0])


class TestAttentionValues:
    def test_zero_head_gives_zero_scores(self):
        fm = feature_map(np.random.default_rng(0).uniform(size=(6, 4)))
        out = att.attention_values(fm, Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros(6))

    def test_basis_feature_picks_head_entry(self):
        fm = feature_map([[1.0, 0.0, 0.0]])
        out = att.attention_values(fm, Tensor([2.0, 3.0, 4.0]))
        assert float(out.data[0]) == 2.0

    def test_matches_per_location_dot_loop(self):
        rng = np.random.default_rng(1)
        rows = rng.uniform(-1, 1, size=(10, 5))
        head = rng.uniform(-1, 1, size=5)
        out = att.attention_values(feature_map(rows), Tensor(head)).data
        for i in range(10):
            ref = sum(rows[i, j] * head[j] for j in range(5))
            assert out[i] == pytest.approx(ref, rel=1e-12)

    def test_dimension_mismatch_rejected(self):
        fm = feature_map(np.zeros((3, 4)))
        with pytest.raises(ShapeMismatchError):
            att.attention_values(fm, Tensor(np.zeros(5)))


class TestAttentionProbs:
    def test_zero_maps_to_half(self):
        out = att.attention_probs(Tensor([0.0]))
        assert float(out.data[0]) == 0.5

    def test_ln3_maps_to_three_quarters(self):
        out = att.attention_probs(Tensor([math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.75], atol=1e-15)

    def test_matches_elementwise_reference(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-4, 4, size=20)
        out = att.attention_probs(Tensor(x)).data
        np.testing.assert_allclose(out, 1.0 / (1.0 + np.exp(-x)), rtol=1e-12)


class TestAttentionWeights:
    def test_uniform_field_gives_uniform_weights(self):
        out = att.attention_weights(Tensor(np.full(5, 1.3)))
        np.testing.assert_allclose(out.data, np.full(5, 0.2), rtol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-2, 2, size=12)
        a = att.attention_weights(Tensor(x)).data
        b = att.attention_weights(Tensor(x + 7.5)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_hand_evaluated_softmax(self):
        out = att.attention_weights(Tensor([0.0, math.log(2.0), math.log(4.0)]))
        np.testing.assert_allclose(out.data, [1 / 7, 2 / 7, 4 / 7], rtol=1e-12)

    def test_sums_to_one_and_argmax_preserved(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            x = rng.uniform(-50, 50, size=rng.integers(2, 40))
            w = att.attention_weights(Tensor(x)).data
            assert abs(w.sum() - 1.0) < 1e-9
            assert np.all(w >= 0.0)
            assert int(np.argmax(w)) == int(np.argmax(x))


class TestAttentionFieldExport:
    def test_export_flat_arrays_with_dims(self):
        rng = np.random.default_rng(9)
        rows = rng.uniform(-1, 1, size=(12, 4))
        fm = FeatureMap(Tensor(rows), depth=3, height=2, width=2)
        field = att.compute_attention_field(fm, Tensor(rng.uniform(-1, 1, size=4)))
        exported = field.export_arrays()
        assert exported["dims"] == (3, 2, 2)
        for key in ("raw", "prob", "weight"):
            assert exported[key].shape == (12,)
            assert exported[key].dtype == np.float64
        np.testing.assert_allclose(
            exported["prob"], 1.0 / (1.0 + np.exp(-exported["raw"])), rtol=1e-12
        )
        assert abs(exported["weight"].sum() - 1.0) < 1e-9


class TestAttentionLoss:
    def test_uniform_half_probabilities(self):
        n = 9
        probs = Tensor(np.full(n, 0.5))
        mask = np.random.default_rng(5).integers(0, 2, size=n)
        loss = att.attention_loss(probs, mask)
        np.testing.assert_allclose(float(loss.data), n * math.log(2.0), rtol=1e-12)

    def test_perfect_prediction_is_nearly_zero(self):
        mask = np.array([1, 0, 1, 0, 0])
        probs = att.attention_probs(
            Tensor(np.where(mask == 1, 50.0, -50.0).astype(float))
        )
        loss = att.attention_loss(probs, mask)
        assert 0.0 <= float(loss.data) < 5 * 1e-6 * abs(math.log(1e-12))

    def test_matches_per_term_oracle(self):
        rng = np.random.default_rng(6)
        p = rng.uniform(0.05, 0.95, size=10)
        y = rng.integers(0, 2, size=10)
        loss = att.attention_loss(Tensor(p), y)
        ref = -sum(
            yi * math.log(pi) + (1 - yi) * math.log(1 - pi) for pi, yi in zip(p, y)
        )
        np.testing.assert_allclose(float(loss.data), ref, rtol=1e-12)

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            p = rng.uniform(1e-8, 1 - 1e-8, size=rng.integers(1, 30))
            y = rng.integers(0, 2, size=p.size)
            assert float(att.attention_loss(Tensor(p), y).data) >= 0.0

    def test_mask_size_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            att.attention_loss(Tensor(np.full(4, 0.5)), np.zeros(5))

    def test_gradient_through_head_and_features(self):
        from test_autodiff import finite_difference

        rng = np.random.default_rng(8)
        rows = rng.uniform(-1, 1, size=(12, 4))
        head = rng.uniform(-1, 1, size=4)
        mask = rng.integers(0, 2, size=12)

        tape = Tape()
        fm = feature_map(rows, tape)
        head_t = Tensor(head, tape)
        loss = att.attention_loss(
            att.attention_probs(att.attention_values(fm, head_t)), mask
        )
        loss.backward()

        def loss_at(rows_a, head_a):
            probs = 1.0 / (1.0 + np.exp(-(rows_a @ head_a)))
            return float(
                -(mask * np.log(probs) + (1 - mask) * np.log(1 - probs)).sum()
            )

        fd_rows, fd_head = finite_difference(loss_at, [rows, head])
        for got, ref in ((fm.features.grad, fd_rows), (head_t.grad, fd_head)):
            denom = np.maximum(np.maximum(np.abs(got), np.abs(ref)), 1e-6)
            assert (np.abs(got - ref) / denom).max() < 1e-4
