"""Shared fixtures: boundary instances and an exact matching oracle."""

import numpy as np
from scipy.optimize import linear_sum_assignment
from skimage.draw import circle_perimeter, line

from chmseg.metrics import greedy_match


def optimal_matches(pred, gt, max_dist):
    """Maximum number of one-to-one pairs within ``max_dist`` (bipartite oracle)."""
    if not len(pred) or not len(gt):
        return 0
    d = np.linalg.norm(pred[:, None] - gt[None], axis=2)
    cost = np.where(d <= max_dist, 0.0, 1.0)
    rows, cols = linear_sum_assignment(cost)
    return int(np.sum(cost[rows, cols] == 0))


def curve_mask(rng, n=16):
    m = np.zeros((n, n), dtype=bool)
    if rng.random() < 0.5:
        r0, c0, r1, c1 = rng.integers(0, n, 4)
        rr, cc = line(r0, c0, r1, c1)
    else:
        rr, cc = circle_perimeter(n // 2, n // 2, int(rng.integers(3, 7)), shape=(n, n))
    m[rr, cc] = True
    return m


def noisy_detection(rng, gt):
    """Shifted, jittered, gappy copy of ``gt`` with spurious pixels and
    occasionally a doubled (2-px thick) response."""
    n = gt.shape[0]
    pts = np.argwhere(gt) + rng.integers(-1, 2, size=2)
    keep = rng.random(len(pts)) > 0.15
    pts = pts[keep] + (rng.random((keep.sum(), 2)) < 0.2) * rng.integers(-1, 2, size=(keep.sum(), 2))
    extra = rng.integers(0, n, size=(rng.integers(0, 6), 2))
    if rng.random() < 0.3:
        pts = np.vstack([pts, pts + [0, 1]])
    pts = np.clip(np.vstack([pts, extra]), 0, n - 1)
    m = np.zeros((n, n), dtype=bool)
    m[pts[:, 0], pts[:, 1]] = True
    return m


def matching_instance(rng, kind):
    """One image's (pred, gt) point sets, each at most 50 points."""
    if kind == "curve":
        gt = curve_mask(rng)
        pred = noisy_detection(rng, gt)
    else:
        gt = rng.random((12, 12)) < 0.15
        pred = rng.random((12, 12)) < 0.15
    return np.argwhere(pred).astype(float)[:50], np.argwhere(gt).astype(float)[:50]


def greedy_vs_optimal_f(rng, kind, max_dist, images=5):
    """Pooled F of greedy and of optimal matching over a small image set."""
    greedy = optimal = total = 0
    for _ in range(images):
        pred, gt = matching_instance(rng, kind)
        greedy += greedy_match(pred, gt, max_dist)[0].sum()
        optimal += optimal_matches(pred, gt, max_dist)
        total += len(pred) + len(gt)
    return 2 * greedy / total, 2 * optimal / total
