import numpy as np
import pytest

from audioadapt.labels import (AbsentLabels, LabelError, absent_mask_multi,
                               absent_set_single, class_prior, hard_pseudo)


def brute_force_lowest(p, r):
    # independent oracle: full sort on (value, index) pairs
    pairs = sorted((float(v), i) for i, v in enumerate(p))
    return sorted(i for _, i in pairs[:r])


class TestAbsentSetSingle:
    def test_explicit(self):
        assert absent_set_single([0.5, 0.2, 0.15, 0.10, 0.05], 3) == [2, 3, 4]

    def test_uniform_tie_break(self):
        assert absent_set_single([0.2] * 5, 3) == [0, 1, 2]

    def test_matches_sort_oracle(self, rng):
        for _ in range(1000):
            k = int(rng.integers(2, 12))
            p = rng.dirichlet(np.ones(k))
            r = int(rng.integers(1, k))
            assert absent_set_single(p, r) == brute_force_lowest(p, r)

    def test_never_contains_unique_argmax(self, rng):
        for _ in range(200):
            k = int(rng.integers(3, 10))
            p = rng.dirichlet(np.ones(k))
            r = int(rng.integers(1, k))
            if len(np.flatnonzero(p == p.max())) == 1 and r < k:
                assert int(np.argmax(p)) not in absent_set_single(p, r)

    def test_rank_invariance_under_rescaling(self, rng):
        for _ in range(100):
            p = rng.dirichlet(np.ones(6))
            scaled = 3.7 * p
            scaled = scaled / scaled.sum()
            assert absent_set_single(p, 3) == absent_set_single(scaled, 3)

    @pytest.mark.parametrize("r", [0, 5, 9])
    def test_invalid_r(self, r):
        with pytest.raises(LabelError):
            absent_set_single([0.2] * 5, r)


class TestAbsentMaskMulti:
    def test_floor_count(self):
        P = np.random.default_rng(0).random((100, 3))
        alpha = np.array([0.2, 0.2, 0.2])
        mask = absent_mask_multi(P, alpha, 0.05)
        # floor(0.8 * 0.05 * 100) = 4 per class
        assert list(mask.sum(axis=0)) == [4, 4, 4]

    def test_zero_count_column(self):
        P = np.random.default_rng(1).random((10, 2))
        mask = absent_mask_multi(P, np.array([1.0, 0.0]), 0.05)
        assert mask[:, 0].sum() == 0  # alpha=1 -> no videos marked

    def test_matches_per_column_sort_oracle(self, rng):
        for _ in range(1000):
            M = int(rng.integers(2, 50))
            K = int(rng.integers(2, 7))
            P = rng.random((M, K))
            alpha = rng.random(K)
            gamma = float(rng.uniform(0.01, 1.0))
            mask = absent_mask_multi(P, alpha, gamma)
            for k in range(K):
                c_k = int(np.floor((1 - alpha[k]) * gamma * M))
                expect = brute_force_lowest(P[:, k], c_k) if c_k else []
                assert sorted(np.flatnonzero(mask[:, k]).tolist()) == expect

    def test_column_sums_exact(self, rng):
        P = rng.random((50, 7))
        alpha = rng.random(7)
        mask = absent_mask_multi(P, alpha, 0.3)
        for k in range(7):
            assert mask[:, k].sum() == int(np.floor((1 - alpha[k]) * 0.3 * 50))

    def test_dimension_mismatch(self):
        with pytest.raises(LabelError):
            absent_mask_multi(np.zeros((5, 3)), np.zeros(4), 0.05)


class TestHardPseudo:
    def test_argmax(self):
        assert hard_pseudo([0.1, 0.7, 0.2], "single") == 1

    def test_uniform_tie_break(self):
        assert hard_pseudo([0.25] * 4, "single") == 0

    def test_multi_threshold(self):
        out = hard_pseudo([0.6, 0.4, 0.5], "multi", threshold=0.5)
        assert out.tolist() == [1, 0, 1]

    def test_batch(self):
        out = hard_pseudo(np.array([[0.1, 0.9], [0.8, 0.2]]), "single")
        assert out.tolist() == [1, 0]

    def test_all_nan(self):
        with pytest.raises(LabelError):
            hard_pseudo([np.nan, np.nan], "single")


class TestClassPrior:
    def test_single_label(self):
        labels = [0, 0, 0, 1, 1, 2, 2, 2, 2, 3]
        alpha = class_prior(labels, 4)
        assert alpha[0] == pytest.approx(0.3)

    def test_all_contain_class(self):
        vecs = [np.array([1, 1]), np.array([1, 0]), np.array([1, 1])]
        alpha = class_prior(vecs, 2)
        assert alpha[0] == 1.0
        mask = absent_mask_multi(np.random.default_rng(3).random((10, 2)), alpha, 0.5)
        assert mask[:, 0].sum() == 0

    def test_matches_counting_oracle(self, rng):
        K = 6
        vecs = [(rng.random(K) < 0.4).astype(int) for _ in range(30)]
        alpha = class_prior(vecs, K)
        for k in range(K):
            assert alpha[k] == pytest.approx(sum(v[k] for v in vecs) / 30)

    def test_empty(self):
        with pytest.raises(LabelError):
            class_prior([], 4)


def test_absent_labels_container_validation():
    with pytest.raises(LabelError):
        AbsentLabels(mode="bogus", provenance="audio")
    with pytest.raises(LabelError):
        AbsentLabels(mode="single", provenance="thermal")
