import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randviews.evaluation import (
    FrocPoint, balance_training_set, fisher_exact, fold_sizes, froc_curve, make_folds, match_to_truth,
    operating_point_table, roc_auc, sensitivity_at_fp,
)


def pair_auc(scores):
    """O(n^2) Mann-Whitney count."""
    pos = [p for p, l in scores if l == 1]
    neg = [p for p, l in scores if l == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def fisher_enumeration(table):
    """Exact two-sided p from rational hypergeometric probabilities."""
    (a, b), (c, d) = table
    r1, c1, n = a + b, a + c, a + b + c + d

    def prob(x):
        return Fraction(math.comb(c1, x) * math.comb(n - c1, r1 - x), math.comb(n, r1))

    obs = prob(a)
    return float(sum(prob(x) for x in range(max(0, r1 + c1 - n), min(r1, c1) + 1) if prob(x) <= obs))


tables = st.tuples(*[st.integers(0, 25)] * 4).map(lambda t: [[t[0], t[1]], [t[2], t[3]]])


class TestFroc:
    def test_two_candidates(self):
        curve = froc_curve([(0.9, 1), (0.1, 0)], 1)
        assert curve == [FrocPoint(0.9, 1.0, 0.0), FrocPoint(0.1, 1.0, 1.0)]

    def test_perfect_separation(self):
        curve = froc_curve([(0.9, 1), (0.8, 1), (0.3, 0), (0.2, 0)], 2)
        assert any(p.sensitivity == 1.0 and p.fp_per_volume == 0.0 for p in curve)

    def test_all_tied(self):
        curve = froc_curve([(0.4, 1), (0.4, 0), (0.4, 0), (0.4, 1), (0.4, 0)], 2)
        assert curve == [FrocPoint(0.4, 1.0, 1.5)]

    def test_errors(self):
        with pytest.raises(ValueError):
            froc_curve([(0.5, 0)], 1)
        with pytest.raises(ValueError):
            froc_curve([(0.5, 1)], 0)

    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=60), st.integers(1, 5))
    def test_monotone_and_brute_force(self, scores, n_vol):
        if not any(l for _, l in scores):
            scores = scores + [(0.5, 1)]
        curve = froc_curve(scores, n_vol)
        n_pos = sum(l for _, l in scores)
        for a, b in zip(curve, curve[1:]):
            assert a.threshold > b.threshold
            assert a.sensitivity <= b.sensitivity and a.fp_per_volume <= b.fp_per_volume
        for p in curve:
            assert p.sensitivity == sum(1 for s, l in scores if l == 1 and s >= p.threshold) / n_pos
            assert p.fp_per_volume == sum(1 for s, l in scores if l == 0 and s >= p.threshold) / n_vol


class TestSensitivityAtFp:
    curve = [FrocPoint(0.9, 0.25, 0.5), FrocPoint(0.7, 0.5, 1.0), FrocPoint(0.5, 0.75, 2.5), FrocPoint(0.2, 1.0, 4.0)]

    def test_perfect(self):
        assert sensitivity_at_fp([FrocPoint(0.9, 1.0, 0.0)], 3.0) == 1.0

    def test_below_first_point(self):
        assert sensitivity_at_fp(self.curve, 0.25) == 0.0

    @pytest.mark.parametrize("fp, want", [(0.5, 0.25), (0.99, 0.25), (1.0, 0.5), (3.0, 0.75), (4.0, 1.0), (100, 1.0)])
    def test_step_function(self, fp, want):
        assert sensitivity_at_fp(self.curve, fp) == want


class TestAuc:
    def test_examples(self):
        assert roc_auc([(0.9, 1), (0.8, 1), (0.1, 0)]) == 1.0
        assert roc_auc([(0.3, 1), (0.3, 0), (0.3, 0)]) == 0.5
        with pytest.raises(ValueError):
            roc_auc([(0.3, 1), (0.5, 1)])

    def test_pair_oracle_random(self):
        rng = np.random.default_rng(0)
        for n in (20, 200, 1000):
            s = [(float(p), int(l)) for p, l in zip(rng.random(n).round(2), rng.integers(0, 2, n))]
            assert abs(roc_auc(s) - pair_auc(s)) < 1e-12

    @given(st.lists(st.tuples(st.integers(0, 10).map(lambda v: v / 10), st.integers(0, 1)), min_size=2, max_size=80))
    def test_pair_oracle_ties(self, s):
        labels = {l for _, l in s}
        if labels != {0, 1}:
            return
        assert abs(roc_auc(s) - pair_auc(s)) < 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        p, l = rng.random(300), rng.integers(0, 2, 300)
        a = roc_auc(list(zip(p, l)))
        b = roc_auc(list(zip(np.exp(3 * p) / 30, l)))
        assert a == pytest.approx(b, abs=1e-15)


class TestFisher:
    def test_known_table(self):
        p = fisher_exact([[1, 9], [11, 3]])
        assert p == pytest.approx(0.0027594561852200836, rel=1e-9)
        assert abs(p - fisher_enumeration([[1, 9], [11, 3]])) < 1e-10

    def test_identical_rows(self):
        assert fisher_exact([[4, 6], [4, 6]]) == pytest.approx(1.0)
        assert fisher_exact([[0, 0], [3, 5]]) == 1.0

    def test_against_scipy(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        for t in ([[8, 2], [1, 5]], [[104, 0], [0, 104]], [[30, 74], [12, 92]]):
            assert fisher_exact(t) == pytest.approx(scipy_stats.fisher_exact(t)[1], rel=1e-6)

    @settings(max_examples=150)
    @given(tables)
    def test_enumeration_oracle(self, t):
        assert abs(fisher_exact(t) - min(1.0, fisher_enumeration(t))) < 1e-10

    @given(tables)
    def test_symmetry(self, t):
        (a, b), (c, d) = t
        assert fisher_exact(t) == pytest.approx(fisher_exact([[d, c], [b, a]]), rel=1e-12)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            fisher_exact([[-1, 2], [3, 4]])

    def test_operating_point_table(self):
        a = [(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]
        b = [(0.5, 1), (0.5, 1), (0.5, 0), (0.5, 0)]
        assert operating_point_table(a, b, 1, 0.0) == [[2, 0], [0, 2]]


class TestFolds:
    @pytest.mark.parametrize("n, sizes", [(90, [30, 30, 30]), (86, [29, 29, 28])])
    def test_sizes(self, n, sizes):
        folds = make_folds([f"p{i}" for i in range(n)], 3, seed=0)
        assert sorted(fold_sizes(folds, 3), reverse=True) == sizes

    def test_partition_and_determinism(self):
        ids = [f"p{i}" for i in range(17)]
        a = make_folds(ids, 4, seed=3)
        assert a == make_folds(ids, 4, seed=3)
        assert set(a) == set(ids) and set(a.values()) == {0, 1, 2, 3}
        assert a != make_folds(ids, 4, seed=4)

    def test_duplicates_collapse(self):
        assert len(make_folds(["a", "a", "b", "c"], 3)) == 3

    def test_errors(self):
        with pytest.raises(ValueError):
            make_folds(["a", "b"], 3)
        with pytest.raises(ValueError):
            make_folds(["a", "b"], 1)


class TestBalance:
    def test_equalizes(self):
        x = np.arange(400)
        y = np.array([1] * 100 + [0] * 300)
        bx, by = balance_training_set(x, y, np.random.default_rng(0))
        assert (by == 1).sum() == (by == 0).sum() == 300
        # every original example survives
        assert set(bx.tolist()) == set(x.tolist())

    def test_already_balanced(self):
        y = np.array([0, 1] * 10)
        _, by = balance_training_set(np.arange(20), y, np.random.default_rng(0))
        assert len(by) == 20

    @given(st.integers(1, 50), st.integers(1, 50), st.integers(0, 100))
    def test_ratio_one(self, n_pos, n_neg, seed):
        y = np.array([1] * n_pos + [0] * n_neg)
        _, by = balance_training_set(np.arange(len(y)), y, np.random.default_rng(seed))
        assert (by == 1).sum() == (by == 0).sum() == max(n_pos, n_neg)

    def test_single_class(self):
        with pytest.raises(ValueError):
            balance_training_set(np.arange(3), np.zeros(3, int), np.random.default_rng(0))


def test_match_to_truth():
    truth = [[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]]
    pts = [[14.9, 0, 0], [15.0, 0, 0], [15.1, 0, 0], [100, 10, 10], [50, 0, 0]]
    assert match_to_truth(pts, truth).tolist() == [1, 1, 0, 1, 0]
    assert match_to_truth(pts, np.zeros((0, 3))).tolist() == [0] * 5
