import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proto_calib.core import PrototypeRegistry
from proto_calib.metrics import (
    ChangeAnalysis,
    accuracy_decomposition,
    change_category,
    confidence_interval,
    confusion_counts,
    fnr_fpr,
    harmonic_mean,
    performance_drop,
    prediction_change,
    session_metrics,
    similar_set_size,
    tbr_tnr,
)

from conftest import cosine_oracle

# Toy instance: base classes 0-2 on the axes, new classes 3 and 4 leaning on bases.
TOY_PROTOS = {
    0: [1.0, 0.0, 0.0],
    1: [0.0, 1.0, 0.0],
    2: [0.0, 0.0, 1.0],
    3: [1.0, 0.2, 0.0],
    4: [0.0, 0.3, 1.0],
}
TOY_BASE = {0, 1, 2}
#              label, prediction
TOY_SAMPLES = [(0, 0), (0, 3), (0, 4), (1, 4), (1, 1), (2, 0),
               (3, 0), (3, 3), (3, 1), (4, 2), (4, 4), (4, 2)]
TOY_LABELS = [y for y, _ in TOY_SAMPLES]
TOY_PREDS = [p for _, p in TOY_SAMPLES]


@pytest.fixture()
def toy_registry():
    return PrototypeRegistry.from_entries({c: (v, "empirical") for c, v in TOY_PROTOS.items()})


def enumerate_tbr_tnr(preds, labels, protos, base_ids, m, frac):
    """Brute-force TBR/TNR: rank classes by cosine with explicit loops."""
    base = sorted(c for c in protos if c in base_ids)
    new = sorted(c for c in protos if c not in base_ids)

    def top(src, pool, k):
        ranked = sorted(pool, key=lambda c: (-cosine_oracle(protos[src], protos[c]), c))
        return set(ranked[:k])

    n_sim = int(math.floor(round(frac * len(new), 9)))
    mis_new = [(y, p) for y, p in zip(labels, preds) if p != y and y not in base_ids]
    mis_base = [(y, p) for y, p in zip(labels, preds) if p != y and y in base_ids]
    tbr = (100.0 * sum(p in top(y, base, m) for y, p in mis_new) / len(mis_new)) if mis_new else None
    tnr = (100.0 * sum(p in top(y, new, n_sim) for y, p in mis_base) / len(mis_base)) if mis_base else None
    return tbr, tnr


class TestAccuracyDecomposition:
    def test_all_correct(self):
        assert accuracy_decomposition([0, 1, 5], [0, 1, 5], {0, 1}) == (100.0, 100.0, 100.0)

    def test_hand_count(self):
        # 2 base samples (1 right), 2 new samples (0 right)
        assert accuracy_decomposition([0, 0, 0, 1], [0, 1, 2, 3], {0, 1}) == (25.0, 50.0, 0.0)

    def test_session_zero(self):
        avg, base, new = accuracy_decomposition([0, 1, 1], [0, 1, 0], {0, 1})
        assert new is None
        assert avg == base

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            accuracy_decomposition([0, 1], [0], {0})

    def test_toy(self):
        avg, base, new = accuracy_decomposition(TOY_PREDS, TOY_LABELS, TOY_BASE)
        assert avg == pytest.approx(100 * 4 / 12, abs=1e-9)
        assert base == pytest.approx(100 * 2 / 6, abs=1e-9)
        assert new == pytest.approx(100 * 2 / 6, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=60))
    def test_weighted_consistency(self, pairs):
        labels, preds = zip(*pairs)
        avg, base, new = accuracy_decomposition(preds, labels, {0, 1, 2})
        n_base = sum(y in {0, 1, 2} for y in labels)
        n_new = len(labels) - n_base
        combined = ((base or 0) * n_base + (new or 0) * n_new) / len(labels)
        assert avg == pytest.approx(combined, abs=1e-9)


class TestHarmonicMean:
    def test_idempotent(self):
        assert harmonic_mean(63.5, 63.5) == pytest.approx(63.5, abs=1e-12)

    def test_hand_value(self):
        assert harmonic_mean(80, 40) == pytest.approx(160 / 3, abs=1e-12)

    def test_reported_pair(self):
        assert harmonic_mean(73.24, 38.00) == pytest.approx(50.04, abs=0.01)

    def test_zero(self):
        assert harmonic_mean(0, 50) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-3, 100), st.floats(1e-3, 100))
    def test_between_min_and_arithmetic_mean(self, b, n):
        h = harmonic_mean(b, n)
        assert min(b, n) * (1 - 1e-12) <= h <= (b + n) / 2 * (1 + 1e-12)


class TestPerformanceDrop:
    def test_single(self):
        assert performance_drop([61.2]) == 0

    def test_reported_rows(self):
        assert performance_drop([73.53, 70.55, 52.08]) == pytest.approx(21.45, abs=1e-9)
        assert performance_drop([72.00, 47.63]) == pytest.approx(24.37, abs=1e-9)

    def test_empty(self):
        with pytest.raises(ValueError):
            performance_drop([])


class TestFnrFpr:
    def test_all_base_predictions(self):
        assert fnr_fpr([0, 1, 0, 1], [0, 1, 5, 6], {0, 1}) == (0.0, 100.0)

    def test_hand_counts(self):
        # TP=9, FN=1, FP=3, TN=2
        labels = [0] * 10 + [5] * 5
        preds = [0] * 9 + [5] + [0] * 3 + [5] * 2
        assert confusion_counts(preds, labels, {0}) == {"tp": 9, "fn": 1, "fp": 3, "tn": 2}
        fnr, fpr = fnr_fpr(preds, labels, {0})
        assert fnr == pytest.approx(10.0, abs=1e-9)
        assert fpr == pytest.approx(60.0, abs=1e-9)

    def test_perfect(self):
        assert fnr_fpr([0, 1, 5], [0, 1, 5], {0, 1}) == (0.0, 0.0)

    def test_no_new_samples_is_absent(self):
        assert fnr_fpr([0, 1], [0, 1], {0, 1}) == (0.0, None)

    def test_toy(self):
        fnr, fpr = fnr_fpr(TOY_PREDS, TOY_LABELS, TOY_BASE)
        assert fnr == pytest.approx(50.0, abs=1e-9)
        assert fpr == pytest.approx(100 * 4 / 6, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=60))
    def test_swapping_positive_class_swaps_rates(self, pairs):
        labels, preds = zip(*pairs)
        fnr, fpr = fnr_fpr(preds, labels, {0, 1, 2})
        fnr_new, fpr_new = fnr_fpr(preds, labels, {3, 4, 5, 6})
        assert (fnr, fpr) == (fpr_new, fnr_new)


class TestTbrTnr:
    def test_arithmetic(self):
        # 10 misclassified new samples, 5 of them into their similar base class
        reg = PrototypeRegistry.from_entries({0: ([1.0, 0.0], "empirical"),
                                              1: ([0.0, 1.0], "empirical"),
                                              2: ([1.0, 0.1], "empirical")})
        labels = [2] * 10
        preds = [0] * 5 + [1] * 5
        tbr, tnr = tbr_tnr(preds, labels, reg, {0, 1}, m_new_similar=1)
        assert tbr == 50.0
        assert tnr is None

    def test_toy_hand_values(self, toy_registry):
        # similar base: 3->{0}, 4->{2}; similar new (1 of 2): 0->{3}, 1->{4}, 2->{4}
        tbr, tnr = tbr_tnr(TOY_PREDS, TOY_LABELS, toy_registry, TOY_BASE,
                           m_new_similar=1, base_fraction=0.5)
        assert tbr == pytest.approx(75.0, abs=1e-9)
        assert tnr == pytest.approx(50.0, abs=1e-9)

    def test_toy_superset(self, toy_registry):
        tbr, _ = tbr_tnr(TOY_PREDS, TOY_LABELS, toy_registry, TOY_BASE, m_new_similar=10)
        assert tbr == 100.0

    def test_perfect_classifier_absent(self, toy_registry):
        assert tbr_tnr(TOY_LABELS, TOY_LABELS, toy_registry, TOY_BASE) == (None, None)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(4)
        for trial in range(30):
            protos = {c: rng.normal(size=3).tolist() for c in range(5)}
            reg = PrototypeRegistry.from_entries({c: (v, "empirical") for c, v in protos.items()})
            labels = rng.integers(0, 5, size=20).tolist()
            preds = rng.integers(0, 5, size=20).tolist()
            base = {0, 1, 2}
            for m, frac in [(1, 0.5), (2, 0.2), (3, 1.0)]:
                got = tbr_tnr(preds, labels, reg, base, m, frac)
                want = enumerate_tbr_tnr(preds, labels, protos, base, m, frac)
                for g, w in zip(got, want):
                    assert (g is None and w is None) or abs(g - w) <= 1e-9

    @pytest.mark.parametrize("frac, n, size", [(0.2, 5, 1), (0.2, 40, 8), (0.29, 100, 29),
                                               (0.2, 4, 0), (0.7, 10, 7)])
    def test_similar_set_size(self, frac, n, size):
        assert similar_set_size(frac, n) == size


class TestPredictionChange:
    def test_unchanged(self):
        ch = prediction_change([0, 1, 3], [0, 1, 3], [0, 2, 3], {0, 1, 2})
        assert ch.UC.count == 3 and ch.total == 3

    def test_single_flip(self):
        ch = prediction_change([1, 5], [1, 4], [1, 4], {0, 1})
        assert ch.WR.count == 1
        assert ch.WR.new_pct == 100.0 and ch.WR.base_pct == 0.0

    def test_toy_categories(self):
        labels = [0, 0, 1, 1, 5, 5, 6]
        before = [0, 5, 1, 0, 1, 5, 0]
        after = [0, 0, 6, 5, 5, 1, 1]
        ch = prediction_change(before, after, labels, {0, 1})
        assert [change_category(b, a, y) for b, a, y in zip(before, after, labels)] == [
            "UC", "WR", "RW", "WW", "WR", "RW", "WW"]
        assert (ch.UC.count, ch.WR.count, ch.RW.count, ch.WW.count) == (1, 2, 2, 2)
        assert ch.WR.base_pct == 50.0 and ch.RW.new_pct == 50.0

    def test_empty_category_composition_absent(self):
        ch = prediction_change([0], [0], [0], {0})
        assert ch.RW.base_pct is None

    def test_collapse(self):
        ch = prediction_change([0, 5], [1, 6], [0, 4], {0, 1})
        rows = ch.rows(collapse_ww=True)
        assert [r["category"] for r in rows] == ["UC", "WR", "RW"]
        assert rows[0]["count"] == 1

    def test_randomized_matches_case_analysis(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            labels, b, a = rng.integers(0, 6, size=(3, 100))
            ch = prediction_change(b, a, labels, {0, 1, 2})
            oracle = {c: [0, 0] for c in ("UC", "WR", "RW", "WW")}
            for bi, ai, yi in zip(b, a, labels):
                if bi == ai:
                    cat = "UC"
                elif ai == yi:
                    cat = "WR"
                elif bi == yi:
                    cat = "RW"
                else:
                    cat = "WW"
                oracle[cat][0 if yi <= 2 else 1] += 1
            assert ch.total == 100
            for cat, (nb, nn) in oracle.items():
                stats = getattr(ch, cat)
                assert (stats.n_base, stats.n_new) == (nb, nn)
                if stats.count:
                    assert stats.base_pct + stats.new_pct == pytest.approx(100.0, abs=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            prediction_change([0, 1], [0], [0, 1], {0})


class TestConfidenceInterval:
    def test_constant(self):
        assert confidence_interval([0.7] * 10) == (pytest.approx(0.7), 0.0)

    def test_two_points(self):
        mean, half = confidence_interval([0, 1])
        assert mean == 0.5
        assert half == pytest.approx(0.98, abs=1e-12)

    def test_mean_exact(self):
        vals = np.random.default_rng(0).uniform(size=600)
        mean, _ = confidence_interval(vals)
        assert abs(mean - math.fsum(vals) / 600) <= 1e-12

    def test_too_short(self):
        with pytest.raises(ValueError):
            confidence_interval([1.0])


class TestSessionMetrics:
    def test_base_only_session(self):
        m = session_metrics([0, 1], [0, 0], {0, 1})
        assert m.new_acc is None and m.hmean is None and m.tbr is None and m.tnr is None
        # base is the positive class: FNR is defined, FPR has no negatives
        assert m.fnr == 0.0 and m.fpr is None
        assert session_metrics([0, 5], [0, 1], {0, 1}).fnr == 50.0

    def test_toy_bundle(self, toy_registry):
        m = session_metrics(TOY_PREDS, TOY_LABELS, TOY_BASE, toy_registry, 1, 0.5)
        assert m.hmean == pytest.approx(100 / 3, abs=1e-9)
        assert (m.tbr, m.tnr) == (pytest.approx(75.0), pytest.approx(50.0))
