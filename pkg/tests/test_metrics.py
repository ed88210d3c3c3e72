import math

import numpy as np
import pytest

from chmseg.core import ChmError
from helpers import greedy_vs_optimal_f
from chmseg.metrics import (
    THRESHOLDS,
    average_precision,
    binary_scores,
    boundary_benchmark,
    confusion,
    greedy_match,
    multiclass_scores,
    scores_from_counts,
)


def brute_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_scores(pred, gt):
    tp, fp, fn, tn = brute_counts(pred, gt)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    tnr = tn / (tn + fp) if tn + fp else 1.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f, math.sqrt(recall * tnr), (tp + tn) / pred.size


class TestBinaryScores:
    def test_counts_example(self):
        s = scores_from_counts(8, 2, 2, 88)
        assert s.precision == pytest.approx(0.8) and s.recall == pytest.approx(0.8)
        assert s.f_value == pytest.approx(0.8)

    def test_g_mean_example(self):
        # recall 0.8 and TNR 0.9
        s = scores_from_counts(8, 1, 2, 9)
        assert s.g_mean == pytest.approx(math.sqrt(0.72))

    def test_perfect(self):
        gt = np.array([[0, 1], [1, 1]])
        s = binary_scores(gt.astype(float), gt)
        assert s.f_value == s.g_mean == s.accuracy == 1

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            h, w = rng.integers(1, 9, size=2)
            probs = rng.random((h, w))
            gt = (rng.random((h, w)) < rng.random()).astype(int)
            t = float(rng.choice(THRESHOLDS))
            s = binary_scores(probs, gt, t)
            f, g, acc = brute_scores(probs >= t, gt)
            assert (s.f_value, s.g_mean, s.accuracy) == (f, g, acc)

    def test_g_mean_symmetric_f_not(self):
        gt = np.zeros(100, dtype=int)
        gt[:10] = 1
        pred = np.zeros(100)
        pred[:8] = 1
        pred[50:55] = 1
        a = binary_scores(pred, gt)
        b = binary_scores(1 - pred, 1 - gt)
        assert a.g_mean == pytest.approx(b.g_mean)
        assert a.f_value != pytest.approx(b.f_value)


class TestMulticlass:
    def test_identical(self):
        lab = np.array([[0, 1], [2, 2]])
        s = multiclass_scores(lab, lab, 3)
        assert s.pixel_accuracy == s.class_average_accuracy == 1
        np.testing.assert_array_equal(s.counts.matrix, np.diag([1, 1, 2]))

    def test_one_class_wrong(self):
        gt = np.array([0] * 9 + [1])
        pred = np.zeros(10, dtype=int)
        s = multiclass_scores(pred, gt, 2)
        assert s.pixel_accuracy == 0.9 and s.class_average_accuracy == 0.5

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            h, w = rng.integers(1, 9, size=2)
            c = int(rng.integers(2, 5))
            gt, pred = rng.integers(c, size=(2, h, w))
            m = np.zeros((c, c), dtype=int)
            for g, p in zip(gt.ravel(), pred.ravel()):
                m[g, p] += 1
            s = multiclass_scores(pred, gt, c)
            np.testing.assert_array_equal(s.counts.matrix, m)
            assert s.counts.total == h * w
            assert s.pixel_accuracy == np.trace(m) / m.sum()
            recalls = [m[k, k] / m[k].sum() for k in range(c) if m[k].sum()]
            assert s.class_average_accuracy == pytest.approx(np.mean(recalls), abs=0, rel=1e-15)

    def test_confusion_sums(self):
        assert confusion([0, 1, 1], [1, 1, 0], 2).total == 3


def line_image(n=100, col=50):
    g = np.zeros((n, n))
    g[:, col] = 1
    return g


class TestBoundary:
    def test_identical(self):
        g = line_image()
        s = boundary_benchmark([g], [[g]])
        assert s.ods == s.ois == 1
        assert s.ap == pytest.approx(1.0)

    def test_shift_within_tolerance(self):
        # tolerance 0.02 x diagonal ~ 2.8 px
        s = boundary_benchmark([line_image(col=51)], [[line_image()]], tolerance_fraction=0.02)
        assert s.ods == 1

    def test_shift_outside_tolerance(self):
        s = boundary_benchmark([line_image(col=60)], [[line_image()]])
        assert s.ods == 0

    def test_curve_shape(self):
        rng = np.random.default_rng(2)
        s = boundary_benchmark([rng.random((20, 20))], [[rng.random((20, 20)) < 0.1]])
        assert len(s.curve.thresholds) == 99 and len(list(s.curve.rows())) == 99
        assert np.all(np.diff(s.curve.recall) <= 1e-12)
        assert 0 <= s.ap <= 1

    def test_no_ground_truth(self):
        with pytest.raises(ChmError):
            boundary_benchmark([np.ones((5, 5))], [[np.zeros((5, 5))]])

    @pytest.mark.parametrize("kind", ["curve", "scatter"])
    @pytest.mark.parametrize("max_dist", [1.0, 1.5, 2.0, 3.0])
    def test_greedy_near_optimal(self, kind, max_dist):
        """Greedy F within 0.02 of the optimal bipartite F on <= 50-point instances."""
        rng = np.random.default_rng(3)
        for _ in range(20):
            f_greedy, f_opt = greedy_vs_optimal_f(rng, kind, max_dist)
            assert f_greedy <= f_opt + 1e-12
            assert f_opt - f_greedy <= 0.02

    def test_ois_dominates_ods(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            maps = [rng.random((10, 10)) ** 2 for _ in range(3)]
            gts = [[rng.random((10, 10)) < 0.1 for _ in range(rng.integers(1, 3))] for _ in range(3)]
            s = boundary_benchmark(maps, gts, tolerance_fraction=0.1)
            assert s.ois >= s.ods

    def test_average_precision_perfect(self):
        from chmseg.metrics import PrCurve

        curve = PrCurve(THRESHOLDS, np.ones(99), np.ones(99))
        assert average_precision(curve) == 1.0

    def test_greedy_prefers_constrained_points(self):
        # nearest-first would pair (0, 1) with the closer gt (0, 1.2) and strand (0, 0)
        pred = np.array([[0.0, 0.0], [0.0, 1.0]])
        gt = np.array([[0.0, 1.2], [0.0, 2.0]])
        p, g = greedy_match(pred, gt, 1.2)
        assert p.all() and g.all()

    def test_greedy_one_to_one(self):
        pred = np.array([[0.0, 0.0], [0.0, 1.0]])
        gt = np.array([[0.0, 0.5]])
        p, g = greedy_match(pred, gt, 1.0)
        assert p.sum() == 1 and g.sum() == 1
