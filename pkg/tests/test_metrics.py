import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcamil.errors import LengthMismatch, NoPositives, SingleClassCohort, TooFewFolds
from pcamil.metrics import (
    ConfusionCounts,
    aggregate_folds,
    average_precision,
    binary_report,
    mcnemar_test,
    paired_t_test,
    report_from_counts,
    roc_auc,
)


# ---------------------------------------------------------------- oracles


def auc_pairs(labels, scores):
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    credit = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return credit / (len(pos) * len(neg))


def ap_thresholds(labels, scores):
    """Walk the distinct thresholds from high to low."""
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        sel = [y for y, s in zip(labels, scores) if s >= t]
        recall = sum(sel) / n_pos
        ap += (recall - prev_recall) * (sum(sel) / len(sel))
        prev_recall = recall
    return ap


def mcnemar_enumeration(b, c):
    """Two-sided exact p by listing every assignment of the discordant pairs."""
    n = b + c
    k = min(b, c)
    hits = sum(1 for bits in itertools.product((0, 1), repeat=n) if min(sum(bits), n - sum(bits)) <= k)
    return hits / 2**n


def t_two_sided_p(t, df):
    mpmath.mp.dps = 30
    pdf = lambda x: (mpmath.gamma((df + 1) / 2) / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / 2))
                     * (1 + x**2 / df) ** (-(df + 1) / 2))
    return float(2 * mpmath.quad(pdf, [abs(t), mpmath.inf]))


cohorts = st.integers(2, 12).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y)),
        st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.6, 0.9, 1.0]), min_size=n, max_size=n),
    )
)


# ---------------------------------------------------------------- AUROC


class TestRocAuc:
    def test_perfect(self):
        assert roc_auc([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1]) == 1.0

    def test_all_tied(self):
        assert roc_auc([1, 0, 1, 0, 0], [0.3] * 5) == 0.5

    def test_fixture(self):
        assert auc_pairs([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75
        assert roc_auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75

    def test_single_class(self):
        with pytest.raises(SingleClassCohort):
            roc_auc([1, 1], [0.2, 0.3])

    @settings(max_examples=200)
    @given(cohorts)
    def test_matches_pair_enumeration(self, cohort):
        y, s = cohort
        assert roc_auc(y, s) == pytest.approx(auc_pairs(y, s), abs=1e-12)

    @settings(max_examples=100)
    @given(cohorts)
    def test_monotone_transform_invariant(self, cohort):
        y, s = cohort
        assert roc_auc(y, np.exp(3 * np.array(s)) - 7) == pytest.approx(roc_auc(y, s), abs=1e-12)

    def test_label_flip(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            y = rng.integers(0, 2, size=15)
            if 0 < y.sum() < 15:
                s = rng.random(15)
                assert roc_auc(1 - y, s) == pytest.approx(1 - roc_auc(y, s), abs=1e-12)


# ---------------------------------------------------------------- AP


class TestAveragePrecision:
    def test_positive_first(self):
        assert average_precision([1, 0], [0.9, 0.1]) == 1.0

    def test_positive_last(self):
        assert average_precision([1, 0], [0.1, 0.9]) == 0.5

    @pytest.mark.parametrize("y", [[1, 0, 0, 0], [1, 1, 0], [1, 0, 1, 0, 0, 1, 0]])
    def test_all_tied_equals_prevalence(self, y):
        assert average_precision(y, [0.4] * len(y)) == pytest.approx(sum(y) / len(y), abs=1e-15)

    def test_no_positives(self):
        with pytest.raises(NoPositives):
            average_precision([0, 0], [0.1, 0.2])

    @settings(max_examples=200)
    @given(cohorts)
    def test_matches_threshold_walk(self, cohort):
        y, s = cohort
        assert average_precision(y, s) == pytest.approx(ap_thresholds(y, s), abs=1e-12)


# ---------------------------------------------------------------- thresholded


class TestBinaryReport:
    def test_perfect(self):
        r = binary_report([1, 0, 1, 0], [0.9, 0.1, 0.6, 0.4])
        assert (r.accuracy, r.f1, r.kappa) == (1.0, 1.0, 1.0)

    def test_hand_fixture(self):
        # p_o = 0.8, p_e = 0.3*0.3 + 0.7*0.7 = 0.58
        r = report_from_counts(ConfusionCounts(tp=2, fp=1, fn=1, tn=6))
        assert r.f1 == pytest.approx(0.66667, abs=5e-6)
        assert r.accuracy == pytest.approx(0.8)
        assert r.kappa == pytest.approx(0.22 / 0.42, rel=1e-12)
        assert r.kappa == pytest.approx(0.52381, abs=5e-6)

    def test_fixture_through_scores(self):
        y = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
        s = [0.9, 0.7, 0.2, 0.6, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]
        r = binary_report(y, s)
        assert r.counts == ConfusionCounts(2, 1, 1, 6)

    def test_threshold_is_inclusive(self):
        assert binary_report([1], [0.5]).counts.tp == 1

    def test_degenerate_f1(self):
        r = binary_report([0, 0, 0], [0.1, 0.2, 0.3])
        assert r.f1 == 0.0
        assert r.kappa == 1.0  # p_e = 1 with perfect agreement

    def test_degenerate_kappa_disagreement(self):
        assert report_from_counts(ConfusionCounts(0, 0, 3, 0)).kappa == 0.0

    def test_independent_predictions_have_zero_kappa(self):
        # predictions split each class in half: observed agreement equals chance
        y = [1] * 8 + [0] * 8
        pred = [1, 1, 1, 1, 0, 0, 0, 0] * 2
        assert binary_report(y, pred).kappa == pytest.approx(0.0, abs=1e-15)


# ---------------------------------------------------------------- tests


class TestPairedT:
    def test_equal(self):
        assert paired_t_test([0.5, 0.6, 0.7], [0.5, 0.6, 0.7]) == (0.0, 1.0)

    def test_fixture(self):
        d = np.array([0.1, 0.2, 0.15, 0.05, 0.1])
        t, p = paired_t_test(d + 0.5, np.full(5, 0.5))
        assert t == pytest.approx(4.707, abs=5e-4)
        assert p == pytest.approx(0.0093, abs=5e-5)
        assert p == pytest.approx(t_two_sided_p(t, 4), abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_against_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        a, b = rng.random(n), rng.random(n)
        t, p = paired_t_test(a, b)
        assert p == pytest.approx(t_two_sided_p(t, n - 1), abs=1e-6)

    def test_constant_nonzero_difference(self):
        t, p = paired_t_test([0.75, 0.5, 0.25], [0.5, 0.25, 0.0])
        assert p == 0.0 and t == math.inf

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            paired_t_test([1, 2], [1])
        with pytest.raises(TooFewFolds):
            paired_t_test([1], [1])


class TestMcNemar:
    @staticmethod
    def vectors(b, c, both=3):
        a = [True] * b + [False] * c + [True] * both
        bb = [False] * b + [True] * c + [True] * both
        return a, bb

    def test_balanced(self):
        assert mcnemar_test(*self.vectors(5, 5))[1] == 1.0

    def test_fixture(self):
        p = mcnemar_test(*self.vectors(10, 2))[1]
        assert p == pytest.approx(158 / 4096, abs=1e-15)
        assert p == pytest.approx(0.03857, abs=5e-6)

    def test_no_discordance(self):
        assert mcnemar_test([True, False], [True, False]) == (0.0, 1.0)

    @pytest.mark.parametrize("b, c", [(b, c) for b in range(11) for c in range(11) if 0 < b + c <= 10])
    def test_exact_branch_matches_enumeration(self, b, c):
        assert mcnemar_test(*self.vectors(b, c))[1] == pytest.approx(mcnemar_enumeration(b, c), abs=1e-15)

    def test_chi_square_branch(self):
        stat, p = mcnemar_test(*self.vectors(30, 10))
        assert stat == pytest.approx((20 - 1) ** 2 / 40)
        # chi-square df=1 survival equals erfc(sqrt(x/2))
        assert p == pytest.approx(math.erfc(math.sqrt(stat / 2)), rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            mcnemar_test([True], [True, False])


class TestAggregate:
    def test_identical(self):
        s = aggregate_folds([0.1, 0.1, 0.1])
        assert (s.mean, s.sd, s.ci_low, s.ci_high) == (0.1, 0.0, 0.1, 0.1)

    def test_two_folds(self):
        s = aggregate_folds([0.8, 0.9])
        t975 = math.tan(math.pi * 0.475)  # Cauchy quantile = t with one dof
        assert t975 == pytest.approx(12.706, abs=5e-4)
        assert s.mean == pytest.approx(0.85)
        assert s.sd == pytest.approx(math.sqrt(0.005))
        assert s.ci_low == pytest.approx(0.85 - t975 * math.sqrt(0.005) / math.sqrt(2), rel=1e-10)
        assert s.ci_low == pytest.approx(0.215, abs=5e-4)
        assert s.ci_high == 1.0

    def test_unbounded(self):
        assert aggregate_folds([0.8, 0.9], bounds=None).ci_high > 1.0

    def test_kappa_range_keeps_negative_mean_inside(self):
        s = aggregate_folds([-0.2, -0.1, 0.05], bounds=(-1.0, 1.0))
        assert s.ci_low <= s.mean <= s.ci_high

    def test_too_few(self):
        with pytest.raises(TooFewFolds):
            aggregate_folds([0.5])
