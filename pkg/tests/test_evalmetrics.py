import math

import numpy as np
import pytest

from bifair.dataio import GroupAssignment
from bifair.evalmetrics import (RankingResult, cv, epsilon_if, group_utilities,
                                group_utility, hr_at_k, min_bottom, ndcg_at_k,
                                overall_metric, rank_topk, recall_at_k,
                                topk_from_scores)
from bifair.recmodel import init_projector, project, score
from conftest import make_dataset


class TestTopK:
    def test_three_items(self):
        got = topk_from_scores(np.array([0.1, 0.9, 0.5]), np.empty(0, dtype=int), K=2)
        assert got.tolist() == [1, 2]

    def test_equal_scores_tie_break(self):
        got = topk_from_scores(np.full(5, 3.3), np.empty(0, dtype=int), K=2)
        assert got.tolist() == [0, 1]

    def test_masked_items_never_appear(self):
        got = topk_from_scores(np.array([9.0, 8.0, 7.0, 6.0]), np.array([0, 2]), K=3)
        assert got.tolist() == [1, 3]

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = rng.standard_normal(15)
            masked = rng.choice(15, size=3, replace=False)
            a = topk_from_scores(s, masked, K=6)
            b = topk_from_scores(np.exp(s), masked, K=6)
            assert a.tolist() == b.tolist()

    def test_rank_topk_matches_full_sort_oracle(self):
        ds = make_dataset(num_users=10, num_items=20, hist_len=4, seed=1)
        rng = np.random.default_rng(2)
        Z = rng.standard_normal((20, 6))
        theta = init_projector("mlp2", 6, 4, hidden=5, seed=3)
        result = rank_topk(theta, Z, ds, K=5, mask_policy="train", tau=0.3)
        for u in range(ds.num_users):
            zu = Z[np.sort(ds.train[u])].mean(axis=0)
            eu = project(theta, zu)
            scores = np.array([score(eu, project(theta, Z[i]), 0.3)
                               for i in range(ds.num_items)])
            scores[ds.train[u]] = -np.inf
            order = sorted(range(20), key=lambda i: (-scores[i], i))
            expected = [i for i in order if np.isfinite(scores[i])][:5]
            assert result.topk[u].tolist() == expected

    def test_list_length_bounded_by_unmasked(self):
        got = topk_from_scores(np.arange(4.0), np.array([0, 1, 2]), K=3)
        assert got.tolist() == [3]


class TestPointMetrics:
    def test_perfect_ranking(self):
        topk = np.array([4, 2])
        rel = {4, 2}
        assert recall_at_k(topk, rel) == 1.0
        assert ndcg_at_k(topk, rel, K=2) == pytest.approx(1.0)
        assert hr_at_k(topk, rel) == 1.0

    def test_hand_ndcg(self):
        # relevant {a, b}, list [a, c]: DCG 1, IDCG 1 + 1/log2(3)
        topk = np.array([0, 2])
        rel = {0, 1}
        assert recall_at_k(topk, rel) == 0.5
        assert hr_at_k(topk, rel) == 1.0
        expected = 1.0 / (1.0 + 1.0 / math.log2(3))
        assert ndcg_at_k(topk, rel, K=2) == pytest.approx(expected, abs=1e-4)
        assert ndcg_at_k(topk, rel, K=2) == pytest.approx(0.6131, abs=1e-4)

    def test_no_overlap(self):
        topk = np.array([5, 6])
        rel = {0, 1}
        assert recall_at_k(topk, rel) == 0.0
        assert ndcg_at_k(topk, rel, K=2) == 0.0
        assert hr_at_k(topk, rel) == 0.0

    def test_metrics_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            n = int(rng.integers(4, 20))
            k = int(rng.integers(1, 6))
            topk = rng.choice(n, size=min(k, n), replace=False)
            rel = set(rng.choice(n, size=int(rng.integers(1, n)), replace=False).tolist())
            for fn in (recall_at_k, hr_at_k):
                assert 0.0 <= fn(topk, rel) <= 1.0
            assert 0.0 <= ndcg_at_k(topk, rel, K=k) <= 1.0

    def test_empty_relevant_is_error(self):
        with pytest.raises(ValueError):
            recall_at_k(np.array([1]), set())


def two_group_world():
    """4 items: group 0 = {0, 1}, group 1 = {2, 3}; 2 users with test sets."""
    ds = make_dataset(num_users=2, num_items=4, hist_len=2, seed=5)
    ds.test = [np.array([0, 2]), np.array([1])]
    ds.val = [np.array([], dtype=np.int64), np.array([], dtype=np.int64)]
    groups = GroupAssignment(2, np.array([0, 0, 1, 1]), ["a", "b"])
    return ds, groups


class TestGroupUtility:
    def test_single_group_equals_overall(self):
        ds = make_dataset(num_users=5, num_items=10, hist_len=3, seed=6)
        groups = GroupAssignment(1, np.zeros(10, dtype=np.int64), ["all"])
        result = RankingResult(
            topk=[np.array([0, 1, 2]) for _ in range(5)], K=3)
        overall = overall_metric(result, ds.test, "recall")
        assert group_utility(result, ds, groups, 0, metric="recall") == pytest.approx(overall)

    def test_hand_fixture_half(self):
        ds, groups = two_group_world()
        # user 0 gets item 0 at the top (hit in group 0), user 1 misses item 1
        result = RankingResult(topk=[np.array([0, 3]), np.array([2, 3])], K=2)
        # group 0: user0 relevant {0} hit -> 1.0; user1 relevant {1} miss -> 0.0
        assert group_utility(result, ds, groups, 0, metric="recall") == pytest.approx(0.5)

    def test_group_without_test_items_undefined(self):
        ds, groups = two_group_world()
        ds.test = [np.array([0]), np.array([1])]  # nothing from group 1
        result = RankingResult(topk=[np.array([0]), np.array([1])], K=1)
        with pytest.warns(UserWarning, match="undefined"):
            val = group_utility(result, ds, groups, 1, metric="recall")
        assert math.isnan(val)

    def test_strict_mode_counts_zeros(self):
        ds, groups = two_group_world()
        # user 0's list contains its group-1 relevant item 2; user 1 has no
        # group-1 relevant items at all
        result = RankingResult(topk=[np.array([0, 2]), np.array([2, 3])], K=2)
        loose = group_utility(result, ds, groups, 1, metric="recall")
        strict = group_utility(result, ds, groups, 1, metric="recall", strict=True)
        assert loose == pytest.approx(1.0)
        assert strict == pytest.approx(0.5)  # user 1 contributes a zero

    def test_hit_count_conservation(self):
        rng = np.random.default_rng(7)
        for trial in range(10):
            n_items = 12
            ds = make_dataset(num_users=4, num_items=n_items, hist_len=3, seed=trial)
            group_of = rng.integers(0, 3, size=n_items)
            group_of[:3] = [0, 1, 2]
            ds.test = [np.sort(rng.choice(n_items, size=4, replace=False))
                       for _ in range(4)]
            result = RankingResult(
                topk=[np.sort(rng.choice(n_items, size=5, replace=False))
                      for _ in range(4)], K=5)
            for u in range(4):
                total = len(set(result.topk[u]) & set(ds.test[u].tolist()))
                by_group = 0
                for g in range(3):
                    members = set(np.flatnonzero(group_of == g).tolist())
                    rel_g = set(ds.test[u].tolist()) & members
                    by_group += len(set(result.topk[u].tolist()) & rel_g)
                assert by_group == total


class TestDispersionMetrics:
    def test_cv_constant(self):
        assert cv(np.array([0.4, 0.4, 0.4])) == pytest.approx(0.0, abs=1e-12)

    def test_cv_hand_value(self):
        assert cv(np.array([1.0, 3.0])) == pytest.approx(0.5)

    def test_cv_permutation_invariant(self):
        u = np.array([0.2, 0.5, 0.9, 0.1])
        assert cv(u) == pytest.approx(cv(u[::-1]))

    def test_cv_scale_invariant_min_bottom_scales(self):
        u = np.array([0.2, 0.5, 0.9, 0.1])
        assert cv(3.0 * u) == pytest.approx(cv(u))
        assert min_bottom(3.0 * u) == pytest.approx(3.0 * min_bottom(u))

    def test_cv_zero_mean_error(self):
        with pytest.raises(ValueError, match="mean"):
            cv(np.array([0.0, 0.0]))

    def test_min_bottom_two_groups_is_min(self):
        assert min_bottom(np.array([0.7, 0.2])) == pytest.approx(0.2)

    def test_min_bottom_quarter(self):
        assert min_bottom(np.array([0.1, 0.2, 0.3, 0.4])) == pytest.approx(0.1)

    def test_min_bottom_ceiling(self):
        vals = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
        assert min_bottom(vals, 0.25) == pytest.approx(0.15)

    def test_epsilon_if(self):
        assert epsilon_if(np.array([0.3, 0.3, 0.3]), 0.01) is True
        assert epsilon_if(np.array([0.1, 0.4]), 0.2) is False
        assert epsilon_if(np.array([0.1, 0.25, 0.3]), 0.2) is True  # inclusive


def test_group_utilities_vector(tiny_world):
    ds, groups, Z = tiny_world
    theta = init_projector("linear", Z.shape[1], 4, seed=8)
    result = rank_topk(theta, Z, ds, K=3, mask_policy="train+val")
    util = group_utilities(result, ds, groups, metric="recall")
    assert util.values.shape == (groups.num_groups,)
    assert util.defined.dtype == bool
