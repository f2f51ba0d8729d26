"""Tests for the exact two-group threshold separation."""

import numpy as np
import pytest

from attnmil import separation as sep
from attnmil.errors import DegenerateFieldError, ShapeMismatchError


def brute_force_minimum(p, squared=False):
    """Cost of the best threshold split, by enumerating every gap."""
    v = np.sort(np.asarray(p, dtype=np.float64))
    best = np.inf
    for k in range(1, v.size):
        if not v[k - 1] < v[k]:
            continue
        lo, hi = v[:k], v[k:]
        if squared:
            cost = ((lo - lo.mean()) ** 2).sum() + ((hi - hi.mean()) ** 2).sum()
        else:
            cost = np.abs(lo - lo.mean()).sum() + np.abs(hi - hi.mean()).sum()
        best = min(best, cost)
    return best


class TestSeparateRegions:
    def test_symmetric_two_point_clusters(self):
        result = sep.separate_regions([0.1, 0.1, 0.9, 0.9])
        np.testing.assert_array_equal(result.foreground, [2, 3])
        np.testing.assert_array_equal(result.background, [0, 1])
        assert result.threshold == pytest.approx(0.5)
        assert result.cost == 0.0
        assert result.pseudo_fg_label == 1 and result.pseudo_bg_label == 0

    def test_three_point_case(self):
        # Splits of sorted [0.1, 0.2, 0.8]: {0.1}|{0.2, 0.8} costs 0.6,
        # {0.1, 0.2}|{0.8} costs 0.1, so the single 0.8 is foreground.
        result = sep.separate_regions([0.1, 0.2, 0.8])
        np.testing.assert_array_equal(result.foreground, [2])
        np.testing.assert_array_equal(result.background, [0, 1])
        assert result.cost == pytest.approx(0.1, rel=1e-12)

    def test_degenerate_field_signals(self):
        with pytest.raises(DegenerateFieldError):
            sep.separate_regions([0.5, 0.5, 0.5])
        with pytest.raises(DegenerateFieldError):
            sep.separate_regions([0.5, 0.5 + 1e-9])

    def test_too_few_values_rejected(self):
        with pytest.raises(ShapeMismatchError):
            sep.separate_regions([0.5])

    def test_matches_exhaustive_enumeration_exactly(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            n = int(rng.integers(2, 65))
            p = rng.uniform(0.0, 1.0, size=n)
            if p.max() - p.min() < 1e-6:
                continue
            result = sep.separate_regions(p)
            assert result.cost == brute_force_minimum(p)

    def test_squared_mode_matches_enumeration(self):
        rng = np.random.default_rng(43)
        for _ in range(300):
            p = rng.uniform(0.0, 1.0, size=int(rng.integers(2, 40)))
            if p.max() - p.min() < 1e-6:
                continue
            result = sep.separate_regions(p, squared=True)
            assert result.cost == brute_force_minimum(p, squared=True)

    def test_partition_properties(self):
        rng = np.random.default_rng(44)
        for _ in range(300):
            p = rng.uniform(0.0, 1.0, size=int(rng.integers(2, 50)))
            if p.max() - p.min() < 1e-6:
                continue
            r = sep.separate_regions(p)
            merged = np.sort(np.concatenate([r.foreground, r.background]))
            np.testing.assert_array_equal(merged, np.arange(p.size))
            assert r.foreground.size > 0 and r.background.size > 0
            assert p[r.foreground].min() > r.threshold > p[r.background].max()
            assert p[r.foreground].mean() > p[r.background].mean()

    def test_permutation_invariance(self):
        rng = np.random.default_rng(45)
        p = rng.uniform(0.0, 1.0, size=21)
        base = sep.separate_regions(p)
        perm = rng.permutation(21)
        permuted = sep.separate_regions(p[perm])
        np.testing.assert_array_equal(
            np.sort(perm[permuted.foreground]), base.foreground
        )
        assert permuted.cost == base.cost
        assert permuted.threshold == base.threshold


class TestClusteringCost:
    def test_equal_values_cost_zero(self):
        assert sep.clustering_cost([np.arange(4)], np.full(4, 0.3)) == 0.0

    def test_two_singletons_cost_zero(self):
        assert sep.clustering_cost([[0], [1]], [0.1, 0.9]) == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(46)
        p = rng.uniform(size=12)
        groups = [np.array([0, 3, 5, 7]), np.array([1, 2, 4, 6, 8, 9, 10, 11])]
        ref = 0.0
        for idx in groups:
            m = sum(p[i] for i in idx) / len(idx)
            ref += sum(abs(p[i] - m) for i in idx)
        got = sep.clustering_cost(groups, p)
        np.testing.assert_allclose(got, ref, rtol=1e-12)

    def test_empty_cluster_rejected(self):
        with pytest.raises(ShapeMismatchError):
            sep.clustering_cost([[0, 1], []], [0.1, 0.9])

    def test_returned_partition_cost_is_consistent(self):
        rng = np.random.default_rng(47)
        p = rng.uniform(size=30)
        r = sep.separate_regions(p)
        recomputed = sep.clustering_cost([r.background, r.foreground], p)
        np.testing.assert_allclose(recomputed, r.cost, rtol=1e-9, atol=1e-12)
