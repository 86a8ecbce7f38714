import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnagg.metrics import (
    DegenerateAttribute,
    MetricsReport,
    NoPositives,
    average_precision,
    balanced_mean_accuracy,
    compute_report,
    example_based,
    mean_ap,
)


def pr_curve_ap(scores, labels):
    """Independent oracle: AP as step integration of the precision-recall
    curve, built rank by rank (same tie rule: descending score, ascending
    index)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    total_pos = sum(labels)
    tp = 0
    ap = 0.0
    prev_recall = 0.0
    for k, i in enumerate(order, start=1):
        if labels[i] == 1:
            tp += 1
        recall = tp / total_pos
        precision = tp / k
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


class TestAveragePrecision:
    def test_spec_fixture(self):
        got = average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
        assert got == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, abs=1e-15)
        assert got == pytest.approx(0.8333333333333333, abs=1e-12)

    def test_perfect_separation(self):
        assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_single_positive_ranked_last(self):
        assert average_precision([0.9, 0.8, 0.7, 0.6], [0, 0, 0, 1]) == 0.25

    def test_no_positives(self):
        with pytest.raises(NoPositives):
            average_precision([0.5, 0.4], [0, 0])

    def test_tie_broken_by_index(self):
        # equal scores: earlier rows rank first
        assert average_precision([0.5, 0.5], [1, 0]) == 1.0
        assert average_precision([0.5, 0.5], [0, 1]) == 0.5

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_pr_curve_integration(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        scores = rng.uniform(size=n)
        labels = (rng.uniform(size=n) < 0.4).astype(int)
        if labels.sum() == 0:
            labels[int(rng.integers(n))] = 1
        got = average_precision(scores, labels)
        want = pr_curve_ap(scores.tolist(), labels.tolist())
        assert abs(got - want) < 1e-12

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0), st.floats(-2, 2))
    @settings(max_examples=40)
    def test_invariant_under_strictly_increasing_transforms(self, seed, a, b):
        rng = np.random.default_rng(seed)
        scores = rng.uniform(size=12)
        labels = (rng.uniform(size=12) < 0.5).astype(int)
        if labels.sum() == 0:
            labels[0] = 1
        base = average_precision(scores, labels)
        assert average_precision(a * scores + b, labels) == pytest.approx(
            base, abs=1e-12)
        assert average_precision(np.exp(scores), labels) == pytest.approx(
            base, abs=1e-12)


class TestMeanAp:
    def test_mean(self):
        scores = np.array([[0.9, 0.9], [0.8, 0.1], [0.1, 0.8], [0.2, 0.3]])
        labels = np.array([[1, 0], [1, 0], [0, 1], [0, 1]])
        aps, m = mean_ap(scores, labels)
        assert m == pytest.approx(np.mean(aps), abs=1e-15)

    def test_single_attribute(self):
        aps, m = mean_ap([[0.9], [0.1]], [[1], [0]])
        assert m == aps[0] == 1.0

    def test_compositional(self):
        rng = np.random.default_rng(1)
        scores = rng.uniform(size=(30, 4))
        labels = (rng.uniform(size=(30, 4)) < 0.3).astype(float)
        labels[0] = 1
        aps, m = mean_ap(scores, labels)
        for c in range(4):
            assert aps[c] == average_precision(scores[:, c], labels[:, c])

    def test_names_failing_attribute(self):
        with pytest.raises(NoPositives) as e:
            mean_ap([[0.9, 0.9], [0.1, 0.2]], [[1, 0], [0, 0]])
        assert "attribute 1" in str(e.value)

    def test_min_prior_filter(self):
        scores = np.array([[0.9, 0.9], [0.8, 0.1], [0.1, 0.8], [0.2, 0.3]])
        labels = np.array([[1.0, 0], [1, 0], [0, 1], [0, 0]])
        aps, m = mean_ap(scores, labels, min_prior=0.3)
        assert np.isnan(aps[1]) and m == aps[0]


class TestBalancedMeanAccuracy:
    def test_fixture(self):
        # TPR 1.0, TNR 0.5 on one attribute
        probs = np.array([[0.9], [0.8], [0.7], [0.2]])
        labels = np.array([[1], [1], [0], [0]])
        assert balanced_mean_accuracy(probs, labels) == pytest.approx(0.75)

    def test_all_correct(self):
        probs = np.array([[0.9], [0.1]])
        labels = np.array([[1], [0]])
        assert balanced_mean_accuracy(probs, labels) == 1.0

    def test_random_guessing_near_half(self):
        rng = np.random.default_rng(7)
        probs = rng.uniform(size=(2000, 2))
        labels = (rng.uniform(size=(2000, 2)) < 0.5).astype(float)
        assert abs(balanced_mean_accuracy(probs, labels) - 0.5) < 0.05

    def test_invariant_to_imbalance_at_fixed_rates(self):
        # two datasets, same TPR/TNR, different imbalance: equal mA
        def make(n_pos, n_neg):
            probs = np.concatenate([
                np.tile([0.9, 0.2], n_pos // 2),  # half the positives hit
                np.tile([0.1, 0.8], n_neg // 2),  # half the negatives hit
            ])[:, None]
            labels = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])[:, None]
            return probs, labels

        a = balanced_mean_accuracy(*make(10, 10))
        b = balanced_mean_accuracy(*make(4, 40))
        assert a == pytest.approx(b, abs=1e-12) == pytest.approx(0.5)

    def test_degenerate(self):
        with pytest.raises(DegenerateAttribute):
            balanced_mean_accuracy([[0.9], [0.8]], [[1], [1]])


class TestExampleBased:
    def test_identical_sets(self):
        probs = np.array([[0.9, 0.9, 0.1]])
        labels = np.array([[1, 1, 0]])
        assert example_based(probs, labels) == (1.0, 1.0, 1.0, 1.0)

    def test_partial_overlap_fixture(self):
        # T = {1, 2}, P = {2, 3}
        probs = np.array([[0.1, 0.2, 0.9, 0.8]])
        labels = np.array([[0, 1, 1, 0]])
        acc, prec, rec, f1 = example_based(probs, labels)
        assert acc == pytest.approx(1 / 3)
        assert prec == pytest.approx(1 / 2)
        assert rec == pytest.approx(1 / 2)

    def test_f1_from_averaged_precision_recall(self):
        # samples with (prec, rec) = (1, 1) and (0.5, 0.5): F1 = 0.75
        probs = np.array([[0.9, 0.1, 0.0, 0.0], [0.9, 0.9, 0.0, 0.0]])
        labels = np.array([[1, 0, 0, 0], [1, 0, 1, 0]])
        acc, prec, rec, f1 = example_based(probs, labels)
        assert prec == pytest.approx(0.75)
        assert rec == pytest.approx(0.75)
        assert f1 == pytest.approx(2 * 0.75 * 0.75 / 1.5) == pytest.approx(0.75)

    def test_empty_set_conventions(self):
        # both empty: contribute 1; pred empty but truth not: contribute 0
        probs = np.array([[0.1, 0.1], [0.1, 0.1]])
        labels = np.array([[0, 0], [1, 0]])
        acc, prec, rec, f1 = example_based(probs, labels)
        assert acc == pytest.approx(0.5)
        assert prec == pytest.approx(0.5)
        assert rec == pytest.approx(0.5)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50)
    def test_all_metrics_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        probs = rng.uniform(size=(8, 3))
        labels = (rng.uniform(size=(8, 3)) < 0.4).astype(float)
        for v in example_based(probs, labels):
            assert 0.0 <= v <= 1.0


class TestReport:
    def make_report(self):
        rng = np.random.default_rng(3)
        probs = rng.uniform(size=(40, 3))
        labels = (rng.uniform(size=(40, 3)) < 0.4).astype(float)
        labels[0] = 1
        labels[1] = 0
        return compute_report(probs, labels)

    def test_fields_in_range(self):
        rep = self.make_report()
        for v in [rep.map, rep.ma, rep.ex_accuracy, rep.ex_precision,
                  rep.ex_recall, rep.ex_f1, *rep.ap]:
            assert 0.0 <= v <= 1.0
        assert rep.map == pytest.approx(np.mean(rep.ap))

    def test_json_six_decimals(self):
        rep = MetricsReport(ap=[1 / 3], map=1 / 3, ma=0.123456789,
                            ex_accuracy=1.0, ex_precision=1.0, ex_recall=1.0,
                            ex_f1=1.0)
        d = rep.to_json_dict()
        assert d["ap"] == [0.333333]
        assert d["ma"] == 0.123457
        assert set(d) == {"ap", "map", "ma", "ex_accuracy", "ex_precision",
                          "ex_recall", "ex_f1", "threshold"}

    def test_perfect_oracle(self):
        labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=float)
        rep = compute_report(labels, labels)
        assert rep.map == 1.0 and rep.ma == 1.0 and rep.ex_f1 == 1.0
