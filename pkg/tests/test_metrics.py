import numpy as np
import pytest

from engagerank import metrics

from _oracles import icc_2_1_anova


class TestConfusionMatrix:
    def test_counts_land_in_truth_rows(self):
        cm = metrics.confusion_matrix(preds=[0, 2, 2, 3], labels=[0, 1, 2, 2])
        expect = np.zeros((4, 4), dtype=int)
        expect[0, 0] = 1
        expect[1, 2] = 1
        expect[2, 2] = 1
        expect[2, 3] = 1
        np.testing.assert_array_equal(cm, expect)

    def test_repeats_accumulate(self):
        cm = metrics.confusion_matrix([1] * 5, [1] * 5)
        assert cm[1, 1] == 5 and cm.sum() == 5

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="equal length"):
            metrics.confusion_matrix([0, 1], [0])

    def test_range_validation(self):
        with pytest.raises(ValueError, match="prediction out of range"):
            metrics.confusion_matrix([4], [0])
        with pytest.raises(ValueError, match="label out of range"):
            metrics.confusion_matrix([0], [-1])


class TestAccuracyMetrics:
    def test_perfect_predictions(self):
        cm = np.diag([5, 6, 7, 8])
        report = metrics.accuracy_metrics(cm)
        assert report.acc == 1.0 and report.avg_acc == 1.0

    def test_majority_collapse_separates_the_two_accuracies(self):
        """99 correct majority calls and one missed minority: acc 0.99, avg 0.5."""
        cm = np.zeros((4, 4), dtype=int)
        cm[2, 2] = 99
        cm[0, 2] = 1
        report = metrics.accuracy_metrics(cm)
        assert report.acc == pytest.approx(0.99)
        assert report.avg_acc == pytest.approx(0.5)
        np.testing.assert_array_equal(report.recall[[0, 2]], [0.0, 1.0])
        assert np.isnan(report.recall[1]) and np.isnan(report.recall[3])

    def test_absent_classes_do_not_drag_the_average(self):
        cm = np.zeros((4, 4), dtype=int)
        cm[1, 1] = 3
        cm[2, 2] = 1
        cm[2, 1] = 1
        report = metrics.accuracy_metrics(cm)
        assert report.avg_acc == pytest.approx(0.75)   # mean of 1.0 and 0.5

    def test_hand_mixed_case(self):
        cm = np.array([[2, 1, 0, 0],
                       [0, 3, 1, 0],
                       [1, 0, 8, 1],
                       [0, 0, 2, 2]])
        report = metrics.accuracy_metrics(cm)
        assert report.acc == pytest.approx(15 / 21)
        assert report.avg_acc == pytest.approx(
            (2 / 3 + 3 / 4 + 8 / 10 + 2 / 4) / 4)
        assert report.n_samples == 21

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError, match="empty confusion matrix"):
            metrics.accuracy_metrics(np.zeros((4, 4), dtype=int))

    def test_shape_checked(self):
        with pytest.raises(ValueError, match="4x4"):
            metrics.accuracy_metrics(np.ones((3, 3), dtype=int))

    def test_as_dict_uses_null_for_absent_recall(self):
        cm = np.zeros((4, 4), dtype=int)
        cm[2, 2] = 4
        d = metrics.accuracy_metrics(cm).as_dict()
        assert d["recall"] == [None, None, 1.0, None]
        assert d["classes"][0] == "HIGHLY_DISENGAGED"


class TestRatingMatrix:
    def test_minimum_size(self):
        with pytest.raises(ValueError, match="at least 2"):
            metrics.RatingMatrix(np.zeros((1, 3)))
        with pytest.raises(ValueError, match="at least 2"):
            metrics.RatingMatrix(np.zeros((3, 1)))

    def test_no_missing_cells(self):
        with pytest.raises(ValueError, match="missing"):
            metrics.RatingMatrix(np.array([[1.0, np.nan], [0.0, 1.0]]))

    def test_must_be_2d(self):
        with pytest.raises(ValueError, match="2D"):
            metrics.RatingMatrix(np.zeros(5))


class TestIcc:
    def test_hand_table(self):
        """The 3x2 ladder [[1,2],[3,4],[5,6]] comes out at exactly 8/9."""
        assert metrics.icc_2_1([[1, 2], [3, 4], [5, 6]]) == pytest.approx(
            8.0 / 9.0, abs=1e-12)

    def test_perfect_agreement(self):
        assert metrics.icc_2_1([[1, 1], [3, 3], [2, 2]]) == pytest.approx(1.0)

    def test_all_identical_table(self):
        assert metrics.icc_2_1(np.full((4, 3), 2.0)) == 1.0

    def test_degenerate_variance(self):
        # crossed 2x2 disagreement: every mean-square term in the denominator
        # cancels, so there is no agreement scale to divide by
        with pytest.raises(ValueError, match="degenerate variance"):
            metrics.icc_2_1([[0.0, 1.0], [1.0, 0.0]])

    def test_constant_rater_offsets_score_zero(self):
        # raters disagree by a constant, subjects identical: MSR = 0, ICC = 0
        assert metrics.icc_2_1([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]) == 0.0

    def test_matches_independent_anova(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            n = int(rng.integers(3, 12))
            k = int(rng.integers(2, 6))
            subject = rng.standard_normal((n, 1)) * 2.0
            rater = rng.standard_normal((1, k)) * 0.5
            table = subject + rater + 0.3 * rng.standard_normal((n, k))
            got = metrics.icc_2_1(table)
            want = icc_2_1_anova(table.tolist())
            assert got == pytest.approx(want, abs=1e-6)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(1)
        table = rng.standard_normal((6, 3))
        base = metrics.icc_2_1(table)
        for trial in range(5):
            perm = rng.permutation(6)
            assert metrics.icc_2_1(table[perm]) == pytest.approx(base, rel=1e-9)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        table = rng.standard_normal((5, 4))
        assert metrics.icc_2_1(table + 7.5) == pytest.approx(
            metrics.icc_2_1(table), rel=1e-9)

    def test_noise_lowers_agreement(self):
        rng = np.random.default_rng(3)
        subject = np.linspace(-2, 2, 10)[:, None]
        clean = subject + 0.01 * rng.standard_normal((10, 4))
        noisy = subject + 1.5 * rng.standard_normal((10, 4))
        assert metrics.icc_2_1(clean) > 0.95 > metrics.icc_2_1(noisy)


class TestRecallCsv:
    def test_layout(self, tmp_path):
        cm_a = np.diag([1, 2, 3, 4])
        cm_b = np.zeros((4, 4), dtype=int)
        cm_b[2, 2] = 2
        cm_b[3, 2] = 1
        reports = {"run_a": metrics.accuracy_metrics(cm_a),
                   "run_b": metrics.accuracy_metrics(cm_b)}
        path = tmp_path / "recall.csv"
        metrics.write_recall_csv(path, reports)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "class,run_a,run_b"
        assert lines[1].startswith("HIGHLY_DISENGAGED,1.000000,")
        # class absent from run_b stays blank, not zero
        assert lines[1].endswith(",")
        assert lines[4] == "HIGHLY_ENGAGED,1.000000,0.000000"
        assert len(lines) == 5
