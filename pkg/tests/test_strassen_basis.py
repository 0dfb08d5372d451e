import numpy as np
import pytest

from strassen_tile.dense_core import make_rng, matmul
from strassen_tile.snf_operator import stl_reference
from strassen_tile.strassen_basis import (
    nested_subset_chain,
    pruned_subset_init,
    random_gaussian_init,
    strassen_rank49,
    strassen_rank7,
    subset_triple,
)
from strassen_tile.training import population_class0_loss


@pytest.fixture(scope="module")
def s49():
    return strassen_rank49()


def elementary(t, idx):
    m = np.zeros((t, t))
    m[idx // t, idx % t] = 1.0
    return m


class TestRank7:
    def test_identity_pair(self):
        s7 = strassen_rank7()
        assert np.array_equal(stl_reference(np.eye(2), np.eye(2), s7), np.eye(2))

    def test_all_elementary_pairs_exact(self):
        s7 = strassen_rank7()
        for a in range(4):
            for b in range(4):
                x, w = elementary(2, a), elementary(2, b)
                assert np.array_equal(stl_reference(x, w, s7), matmul(x, w))

    def test_row_structure(self):
        s7 = strassen_rank7()
        for factor in (s7.e_x, s7.e_w, s7.d):
            for row in factor:
                nonzero = row[row != 0]
                assert nonzero.size <= 4
                assert set(np.unique(nonzero)) <= {-1.0, 1.0}


class TestRank49:
    def test_right_identity(self, s49):
        rng = make_rng(0)
        for _ in range(100):
            x = rng.standard_normal((4, 4))
            assert np.abs(stl_reference(x, np.eye(4), s49) - x).max() <= 1e-13

    def test_all_256_elementary_pairs_exact(self, s49):
        for a in range(16):
            for b in range(16):
                x, w = elementary(4, a), elementary(4, b)
                assert np.array_equal(stl_reference(x, w, s49), matmul(x, w))

    def test_random_gaussian_pair(self, s49):
        rng = make_rng(1)
        for _ in range(20):
            x = rng.standard_normal((4, 4))
            w = rng.standard_normal((4, 4))
            assert np.abs(stl_reference(x, w, s49) - matmul(x, w)).max() <= 1e-12

    def test_entries_ternary(self, s49):
        for factor in (s49.e_x, s49.e_w, s49.d):
            assert set(np.unique(factor)) <= {-1.0, 0.0, 1.0}

    def test_shape(self, s49):
        assert (s49.t, s49.r) == (4, 49)
        assert s49.e_x.shape == (49, 16)


class TestPrunedSubset:
    def test_full_subset_is_identity(self, s49):
        got = pruned_subset_init(s49, 49, make_rng(2))
        for f in ("e_x", "e_w", "d"):
            assert np.array_equal(getattr(got, f), getattr(s49, f))

    def test_minimal_subset(self, s49):
        got = pruned_subset_init(s49, 1, make_rng(3))
        assert got.r == 1 and got.e_x.shape == (1, 16)
        out = stl_reference(np.eye(4), np.eye(4), got)
        assert np.all(np.isfinite(out))

    def test_same_rows_across_factors(self, s49):
        got = pruned_subset_init(s49, 5, make_rng(4))
        # every selected row must appear at the same position in all factors
        for i in range(5):
            matches = [
                np.flatnonzero([np.array_equal(got.e_x[i], row) for row in s49.e_x]),
                np.flatnonzero([np.array_equal(got.e_w[i], row) for row in s49.e_w]),
                np.flatnonzero([np.array_equal(got.d[i], row) for row in s49.d]),
            ]
            common = set(matches[0]) & set(matches[1]) & set(matches[2])
            assert common, f"row {i} does not come from one shared source index"

    def test_seed_determinism_and_sensitivity(self, s49):
        a = pruned_subset_init(s49, 32, make_rng(5))
        b = pruned_subset_init(s49, 32, make_rng(5))
        c = pruned_subset_init(s49, 32, make_rng(6))
        assert np.array_equal(a.e_x, b.e_x)
        assert not np.array_equal(a.e_x, c.e_x)

    def test_out_of_range_rejected(self, s49):
        with pytest.raises(ValueError):
            pruned_subset_init(s49, 0, make_rng(0))
        with pytest.raises(ValueError):
            pruned_subset_init(s49, 50, make_rng(0))


class TestNestedChain:
    def test_chain_is_permutation(self):
        chain = nested_subset_chain(make_rng(7))
        assert sorted(chain) == list(range(49))

    def test_prefixes_are_nested_and_reach_zero(self, s49):
        chain = nested_subset_chain(make_rng(7))
        full_loss = population_class0_loss(subset_triple(s49, chain))
        assert full_loss <= 1e-20  # the complete triple is exact
        for r in (1, 16, 32, 48):
            loss = population_class0_loss(subset_triple(s49, chain[:r]))
            assert loss > 0.0  # strictly lossy below rank 49

    def test_init_loss_is_not_monotone_in_r(self, s49):
        # Documented counterexample: expanding the single best row by ANY
        # second row strictly increases the expected initialization loss,
        # so no nested chain has non-increasing init loss.  (The trained
        # loss, not the init loss, is what decreases with r.)
        base = min(range(49), key=lambda p: population_class0_loss(subset_triple(s49, [p])))
        base_loss = population_class0_loss(subset_triple(s49, [base]))
        grown = [
            population_class0_loss(subset_triple(s49, [base, q]))
            for q in range(49)
            if q != base
        ]
        assert min(grown) > base_loss + 1e-9

    def test_subset_triple_validation(self, s49):
        with pytest.raises(ValueError):
            subset_triple(s49, [1, 1])
        with pytest.raises(ValueError):
            subset_triple(s49, [49])


class TestRandomInit:
    def test_zero_scale(self):
        snf = random_gaussian_init(4, 8, make_rng(8), scale=0.0)
        x = make_rng(9).standard_normal((8, 8))
        assert np.all(stl_reference(x, x, snf) == 0)

    def test_determinism(self):
        a = random_gaussian_init(4, 24, make_rng(10), scale=1.0)
        b = random_gaussian_init(4, 24, make_rng(10), scale=1.0)
        assert np.array_equal(a.e_x, b.e_x) and np.array_equal(a.d, b.d)

    def test_pooled_variance(self):
        pooled = []
        for seed in range(100):
            snf = random_gaussian_init(4, 24, make_rng(seed), scale=1.0)
            pooled.extend([snf.e_x, snf.e_w, snf.d])
        entries = np.concatenate([m.reshape(-1) for m in pooled])
        assert abs(entries.var() - 1.0) <= 0.05
