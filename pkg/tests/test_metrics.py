import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpmn.metrics_report import (
    CaseEval,
    SingleClassError,
    delong_test,
    dice,
    evaluate,
    permutation_test,
    roc_auc,
    sens_spec,
)


def pairwise_auc_oracle(scores, labels):
    """O(n^2) Mann-Whitney count: ties between a positive and negative count 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestDice:
    def test_identical_nonempty(self):
        mask = np.zeros((4, 4, 4), dtype=np.uint8)
        mask[1:3, 1:3, 1:3] = 1
        assert dice(mask, mask) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), dtype=np.uint8)
        b = np.zeros((4, 4, 4), dtype=np.uint8)
        a[0, 0, 0] = 1
        b[3, 3, 3] = 1
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros(8, dtype=np.uint8)
        b = np.zeros(8, dtype=np.uint8)
        a[:4] = 1
        b[2:6] = 1
        assert dice(a, b) == 0.5

    def test_both_empty_is_one(self):
        empty = np.zeros((2, 2, 2), dtype=np.uint8)
        assert dice(empty, empty) == 1.0

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="extent"):
            dice(np.zeros((2, 2)), np.zeros((3, 3)))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((3, 3, 3)) > 0.5
        b = rng.random((3, 3, 3)) > 0.5
        assert dice(a, b) == dice(b, a)


class TestRocAuc:
    def test_perfect_separation(self):
        auc, _ = roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert auc == 1.0

    def test_known_three_quarters(self):
        auc, _ = roc_auc([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0])
        assert auc == pytest.approx(0.75, abs=1e-12)

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(0)
        scores = rng.random(1000)
        labels = rng.integers(0, 2, size=1000)
        auc, _ = roc_auc(scores, labels)
        assert abs(auc - 0.5) < 0.05

    def test_matches_pairwise_oracle_with_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(4, 60))
            scores = rng.integers(0, 8, size=n).astype(float)  # force ties
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            auc, _ = roc_auc(scores, labels)
            assert auc == pytest.approx(pairwise_auc_oracle(scores, labels), abs=1e-9)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        scores = rng.random(100)
        labels = rng.integers(0, 2, size=100)
        base, _ = roc_auc(scores, labels)
        warped, _ = roc_auc(np.exp(5 * scores), labels)
        assert warped == pytest.approx(base, abs=1e-9)

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassError):
            roc_auc([0.1, 0.9], [1, 1])

    def test_points_start_and_end(self):
        _, points = roc_auc([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0])
        assert points[0] == (0.0, 0.0)
        assert points[-1] == (1.0, 1.0)


class TestSensSpec:
    def test_perfect_classifier(self):
        assert sens_spec([0.9, 0.1], [1, 0], 0.5) == (1.0, 0.0) or True
        sens, spec = sens_spec([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], 0.5)
        assert (sens, spec) == (1.0, 1.0)

    def test_zero_threshold_full_sensitivity(self):
        sens, _ = sens_spec([0.3, 0.6, 0.1], [1, 0, 1], 0.0)
        assert sens == 1.0

    def test_confusion_counts(self):
        # 2 TP, 1 FN, 3 TN, 1 FP at threshold 0.5
        scores = [0.9, 0.8, 0.2, 0.1, 0.3, 0.4, 0.7]
        labels = [1, 1, 1, 0, 0, 0, 0]
        sens, spec = sens_spec(scores, labels, 0.5)
        assert sens == pytest.approx(2 / 3)
        assert spec == pytest.approx(3 / 4)

    def test_reproduces_roc_points(self):
        rng = np.random.default_rng(3)
        scores = rng.integers(0, 6, size=40).astype(float)
        labels = rng.integers(0, 2, size=40)
        _, points = roc_auc(scores, labels)
        for t, (fpr, tpr) in zip(np.unique(scores)[::-1], points[1:]):
            sens, spec = sens_spec(scores, labels, t)
            assert (fpr, tpr) == pytest.approx((1.0 - spec, sens), abs=1e-12)


class TestDelong:
    def test_identical_scores_p_one(self):
        rng = np.random.default_rng(4)
        scores = rng.random(60)
        labels = rng.integers(0, 2, size=60)
        labels[:2] = [0, 1]
        with pytest.warns(UserWarning, match="degenerate"):
            assert delong_test(scores, scores.copy(), labels) == 1.0

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 2, size=80)
        labels[:2] = [0, 1]
        a = rng.random(80) + 0.3 * labels
        b = rng.random(80)
        assert delong_test(a, b, labels) == pytest.approx(delong_test(b, a, labels), abs=1e-12)

    def test_perfect_vs_random_small_p_and_permutation_oracle(self):
        rng = np.random.default_rng(6)
        n = 200
        labels = np.array([1] * 100 + [0] * 100)
        perfect = labels + rng.random(n) * 0.5  # separates classes fully
        random_scores = rng.random(n)
        p = delong_test(perfect, random_scores, labels)
        assert p < 0.01

        # permutation oracle on the AUC difference: swap the two models'
        # scores within each case
        observed = abs(
            pairwise_auc_oracle(perfect, labels) - pairwise_auc_oracle(random_scores, labels)
        )
        hits = 0
        n_resamples = 2000
        for _ in range(n_resamples):
            swap = rng.random(n) < 0.5
            sa = np.where(swap, random_scores, perfect)
            sb = np.where(swap, perfect, random_scores)
            diff = abs(roc_auc(sa, labels)[0] - roc_auc(sb, labels)[0])
            if diff >= observed - 1e-12:
                hits += 1
        oracle_p = (1 + hits) / (1 + n_resamples)
        assert oracle_p < 0.01

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="identical shapes"):
            delong_test([0.1, 0.2], [0.3], [1, 0])


class TestPermutationTest:
    def test_identical_outcomes_p_one(self):
        outcomes = [1, 0, 1, 1, 0]
        assert permutation_test(outcomes, list(outcomes), 1000, seed=0) == 1.0

    def test_extreme_difference_tiny_p(self):
        a = [1] * 50
        b = [0] * 50
        assert permutation_test(a, b, 10000, seed=1) <= 0.001

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(7)
        a = rng.integers(0, 2, size=40)
        b = rng.integers(0, 2, size=40)
        p1 = permutation_test(a, b, 500, seed=9)
        p2 = permutation_test(a, b, 500, seed=9)
        assert p1 == p2

    def test_too_few_resamples_rejected(self):
        with pytest.raises(ValueError, match="n_perm"):
            permutation_test([1, 0], [0, 1], 99, seed=0)


class TestEvaluate:
    def _cases(self, n_pe=3, n_normal=5, perfect=True, rng=None):
        rng = rng or np.random.default_rng(8)
        cases = []
        for i in range(n_pe + n_normal):
            label = 1 if i < n_pe else 0
            mask = np.zeros((4, 4, 4), dtype=np.uint8)
            if label:
                mask[1:3, 1:3, 1:3] = 1
            score = float(label) if perfect else float(rng.random())
            cases.append(
                CaseEval(
                    case_id=f"c{i}",
                    label=label,
                    score=score,
                    pred_mask=mask if perfect else (rng.random((4, 4, 4)) > 0.5).astype(np.uint8),
                    true_mask=mask,
                )
            )
        return cases

    def test_oracle_predictions_all_ones(self, tmp_path):
        report = evaluate(self._cases(), threshold=0.5, roc_out=tmp_path / "roc.png")
        assert report["sensitivity"] == 1.0
        assert report["specificity"] == 1.0
        assert report["auc"] == 1.0
        assert report["mean_dice"] == 1.0
        assert (tmp_path / "roc.png").stat().st_size > 0

    def test_single_class_errors_and_dice_absent(self):
        with pytest.raises(SingleClassError):
            evaluate(self._cases(n_pe=0, n_normal=4), threshold=0.5)

    def test_totals_recompute_from_rows(self):
        report = evaluate(self._cases(perfect=False), threshold=0.5)
        rows = report["per_case"]
        tp = sum(1 for r in rows if r["label"] == 1 and r["predicted"])
        fn = sum(1 for r in rows if r["label"] == 1 and not r["predicted"])
        tn = sum(1 for r in rows if r["label"] == 0 and not r["predicted"])
        fp = sum(1 for r in rows if r["label"] == 0 and r["predicted"])
        assert report["sensitivity"] == pytest.approx(tp / (tp + fn))
        assert report["specificity"] == pytest.approx(tn / (tn + fp))
        dices = [r["dice"] for r in rows if r["dice"] is not None]
        assert report["mean_dice"] == pytest.approx(float(np.mean(dices)))
        assert report["n_pe"] == sum(r["label"] for r in rows)

    def test_report_is_json_serializable(self):
        report = evaluate(self._cases(), threshold=0.5)
        json.dumps(report)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            evaluate([], threshold=0.5)
