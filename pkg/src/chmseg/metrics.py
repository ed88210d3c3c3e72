"""Segmentation and boundary-detection scores.

Ratios with an empty denominator count as perfect (precision with no
predicted positives is 1, recall with no true positives is 1), so a
prediction that exactly reproduces an all-background map scores 1.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import ChmError, DimensionError, LabelMap, ProbabilityMap

THRESHOLDS = np.arange(1, 100) / 100.0


def _ratio(num, den):
    return num / den if den else 1.0


def _array(grid) -> np.ndarray:
    if isinstance(grid, ProbabilityMap):
        return grid.plane(0)
    if isinstance(grid, LabelMap):
        return grid.data
    return np.asarray(grid)


@dataclass(frozen=True, eq=False)
class ConfusionCounts:
    """``matrix[g, p]`` counts pixels of ground-truth class g predicted as p."""

    matrix: np.ndarray

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    @property
    def tp(self) -> int:
        return int(self.matrix[1, 1])

    @property
    def fp(self) -> int:
        return int(self.matrix[0, 1])

    @property
    def fn(self) -> int:
        return int(self.matrix[1, 0])

    @property
    def tn(self) -> int:
        return int(self.matrix[0, 0])


def confusion(pred, gt, class_count: int) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise DimensionError("prediction and ground truth differ in size")
    counts = np.bincount(gt * class_count + pred, minlength=class_count * class_count)
    return ConfusionCounts(counts.reshape(class_count, class_count))


class BinaryScores(NamedTuple):
    f_value: float
    g_mean: float
    accuracy: float
    precision: float
    recall: float
    tnr: float


def scores_from_counts(tp: int, fp: int, fn: int, tn: int) -> BinaryScores:
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    tnr = _ratio(tn, tn + fp)
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return BinaryScores(
        f_value=f,
        g_mean=math.sqrt(recall * tnr),
        accuracy=_ratio(tp + tn, tp + fp + fn + tn),
        precision=precision,
        recall=recall,
        tnr=tnr,
    )


def binary_scores(pred, gt, threshold: float = 0.5) -> BinaryScores:
    """F-value, G-mean and pixel accuracy of ``pred >= threshold`` against binary ``gt``."""
    pred = _array(pred)
    gt = _array(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    c = confusion(pred >= threshold, gt > 0, 2)
    return scores_from_counts(c.tp, c.fp, c.fn, c.tn)


class MulticlassScores(NamedTuple):
    pixel_accuracy: float
    class_average_accuracy: float
    counts: ConfusionCounts


def multiclass_scores(pred, gt, class_count: int | None = None) -> MulticlassScores:
    """Pixel accuracy and mean per-class recall over the classes present in ``gt``."""
    pred = _array(pred)
    gt = _array(gt)
    if class_count is None:
        class_count = int(max(pred.max(), gt.max())) + 1
    c = confusion(pred, gt, class_count)
    m = c.matrix
    support = m.sum(axis=1)
    present = support > 0
    recalls = np.diag(m)[present] / support[present]
    return MulticlassScores(
        pixel_accuracy=float(np.trace(m) / m.sum()),
        class_average_accuracy=float(recalls.mean()) if present.any() else 1.0,
        counts=c,
    )


# -- boundary benchmark -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @property
    def f_value(self) -> np.ndarray:
        p, r = self.precision, self.recall
        s = p + r
        return np.where(s > 0, 2 * p * r / np.where(s > 0, s, 1), 0.0)

    def rows(self):
        for t, p, r, f in zip(self.thresholds, self.precision, self.recall, self.f_value):
            yield float(t), float(p), float(r), float(f)


def greedy_match(pred_points: np.ndarray, gt_points: np.ndarray, max_dist: float):
    """Greedy one-to-one matching of points within ``max_dist``.

    Repeatedly takes the unmatched point with the fewest unmatched
    candidates left and pairs it with its nearest candidate. Plain
    nearest-first pairing strands points whose only candidate was taken by
    a closer pair; serving the most constrained point first avoids most of
    that and stays close to a maximum matching.

    Returns boolean match flags for the predicted and the ground-truth points.
    """
    n_pred, n_gt = len(pred_points), len(gt_points)
    pred_hit = np.zeros(n_pred, dtype=bool)
    gt_hit = np.zeros(n_gt, dtype=bool)
    if not n_pred or not n_gt:
        return pred_hit, gt_hit
    pairs = cKDTree(pred_points).sparse_distance_matrix(cKDTree(gt_points), max_dist, output_type="ndarray")
    if not len(pairs):
        return pred_hit, gt_hit
    # nodes 0..n_pred-1 are predictions, the rest ground truth
    order = np.lexsort((pairs["j"], pairs["i"], pairs["v"]))
    adj: list[list[int]] = [[] for _ in range(n_pred + n_gt)]
    for i, j in zip(pairs["i"][order].tolist(), pairs["j"][order].tolist()):
        adj[i].append(n_pred + j)  # each list ends up sorted nearest first
        adj[n_pred + j].append(i)
    matched = np.zeros(n_pred + n_gt, dtype=bool)
    degree = [len(a) for a in adj]
    heap = [(d, v) for v, d in enumerate(degree) if d]
    heapq.heapify(heap)
    while heap:
        d, v = heapq.heappop(heap)
        if matched[v] or d != degree[v] or d == 0:
            continue
        u = next(w for w in adj[v] if not matched[w])
        matched[v] = matched[u] = True
        for w in adj[v] + adj[u]:
            if not matched[w]:
                degree[w] -= 1
                heapq.heappush(heap, (degree[w], w))
    pred_hit[:] = matched[:n_pred]
    gt_hit[:] = matched[n_pred:]
    return pred_hit, gt_hit


def _points(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(mask).astype(np.float64)


class ImageCounts(NamedTuple):
    """Per-threshold counts for one image."""

    pred_matched: np.ndarray  # predicted pixels matched in any annotation
    pred_total: np.ndarray
    gt_matched: np.ndarray  # matched annotation pixels, summed over annotators
    gt_total: np.ndarray


def boundary_counts(edge_map, annotations: Sequence, tolerance_fraction: float = 0.0075, thresholds=THRESHOLDS) -> ImageCounts:
    edge_map = _array(edge_map).astype(np.float64)
    masks = [np.asarray(_array(a)) > 0 for a in annotations]
    for m in masks:
        if m.shape != edge_map.shape:
            raise DimensionError("annotation and prediction differ in shape")
    max_dist = tolerance_fraction * math.hypot(*edge_map.shape)
    gt_points = [_points(m) for m in masks]
    n = len(thresholds)
    out = ImageCounts(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))
    for k, t in enumerate(thresholds):
        pred = _points(edge_map >= t)
        any_hit = np.zeros(len(pred), dtype=bool)
        for gp in gt_points:
            p_hit, g_hit = greedy_match(pred, gp, max_dist)
            any_hit |= p_hit
            out.gt_matched[k] += g_hit.sum()
            out.gt_total[k] += len(gp)
        out.pred_matched[k] = any_hit.sum()
        out.pred_total[k] = len(pred)
    return out


def _pr_f(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


def _curve(c: ImageCounts, thresholds) -> PrCurve:
    precision = np.array([_ratio(a, b) for a, b in zip(c.pred_matched, c.pred_total)])
    recall = np.array([_ratio(a, b) for a, b in zip(c.gt_matched, c.gt_total)])
    return PrCurve(np.asarray(thresholds), precision, recall)


def average_precision(curve: PrCurve) -> float:
    """Trapezoidal area under the interpolated (upper-envelope) PR curve,
    anchored at recall 0."""
    order = np.argsort(curve.recall, kind="stable")
    r = curve.recall[order]
    p = curve.precision[order]
    p_interp = np.maximum.accumulate(p[::-1])[::-1]
    r = np.concatenate([[0.0], r])
    p_interp = np.concatenate([[p_interp[0]], p_interp])
    area = np.sum(np.diff(r) * (p_interp[1:] + p_interp[:-1]) / 2.0)
    return float(np.clip(area, 0.0, 1.0))


def _pooled_f(totals: np.ndarray) -> float:
    return _pr_f(_ratio(totals[0], totals[1]), _ratio(totals[2], totals[3]))


def _best_per_image_f(per_image: list[ImageCounts], start: int, sweeps: int = 100) -> float:
    """Pooled F with a threshold chosen per image.

    Starts with every image at the shared ODS threshold and moves one
    image's threshold at a time while the pooled F improves, so the result
    is never below ODS.
    """
    counts = np.stack([np.stack(c, axis=1) for c in per_image])  # (images, thresholds, 4)
    picks = [start] * len(per_image)
    totals = counts[np.arange(len(picks)), picks].sum(axis=0)
    best_f = _pooled_f(totals)
    for _ in range(sweeps):
        moved = False
        for i in range(len(picks)):
            base = totals - counts[i, picks[i]]
            scores = [_pooled_f(base + counts[i, k]) for k in range(counts.shape[1])]
            k = int(np.argmax(scores))
            if scores[k] > best_f:
                picks[i], best_f, totals, moved = k, scores[k], base + counts[i, k], True
        if not moved:
            break
    return float(best_f)


class BoundaryScores(NamedTuple):
    ods: float
    ois: float
    ap: float
    curve: PrCurve
    ods_threshold: float


def boundary_benchmark(edge_maps: Sequence, annotation_sets: Sequence[Sequence], tolerance_fraction: float = 0.0075, thresholds=THRESHOLDS) -> BoundaryScores:
    """ODS, OIS and AP over a dataset of thinned edge maps.

    Each image may carry several annotations. A predicted pixel is a hit if
    it is matched in any annotation; recall pools all annotations. ODS is
    the best pooled F at one shared threshold, OIS the pooled F with
    per-image thresholds, AP the area under the interpolated PR curve.
    """
    if len(edge_maps) != len(annotation_sets):
        raise DimensionError("one annotation set is needed per edge map")
    per_image = [boundary_counts(m, a, tolerance_fraction, thresholds) for m, a in zip(edge_maps, annotation_sets)]
    if not per_image or sum(c.gt_total[0] for c in per_image) == 0:
        raise ChmError("no ground-truth boundaries in the dataset")
    pooled = ImageCounts(*(np.sum([getattr(c, f) for c in per_image], axis=0) for f in ImageCounts._fields))
    curve = _curve(pooled, thresholds)
    f = np.array([_pooled_f(np.array(row)) for row in zip(*pooled)])
    best = int(np.argmax(f))
    ois = _best_per_image_f(per_image, best)
    return BoundaryScores(float(f[best]), ois, average_precision(curve), curve, float(thresholds[best]))
