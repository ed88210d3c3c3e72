"""Deterministic toy datasets.

``textures``: Bernoulli noise whose density differs slightly by region.
Single pixels and small patches are close to uninformative; the density
only shows up in averages over large windows, so context has to do the
work.

``bars``: thick bars whose outline is drawn but whose interior is the same
noise as the background. Labelling the interior means filling in from the
outline.

``xor-blobs``: four Gaussian clusters in the plane labelled by XOR of the
coordinate signs.
"""

from __future__ import annotations

import numpy as np

KINDS = ("textures", "bars", "xor-blobs")
TEXTURE_DENSITIES = {2: (0.46, 0.54), 3: (0.44, 0.5, 0.56)}


def _regions(rng: np.random.Generator, size: int, classes: int) -> np.ndarray:
    # bands across a random direction with a gently bent boundary; regions
    # are tens of pixels wide so coarse levels see mostly one class
    theta = rng.uniform(0, 2 * np.pi)
    y, x = np.indices((size, size)) - size / 2 + 0.5
    along = x * np.cos(theta) + y * np.sin(theta)
    across = -x * np.sin(theta) + y * np.cos(theta)
    bend = rng.uniform(0, size / 16) * np.sin(2 * np.pi * across / size + rng.uniform(0, 2 * np.pi))
    proj = along + bend
    qs = np.linspace(0, 1, classes + 1)[1:-1] + rng.uniform(-0.15, 0.15, classes - 1) / classes
    cuts = np.quantile(proj, np.sort(qs))
    return np.digitize(proj, cuts).astype(np.int64)


def texture_image(rng: np.random.Generator, size: int = 64, classes: int = 2):
    labels = _regions(rng, size, classes)
    density = np.asarray(TEXTURE_DENSITIES[classes])[labels]
    bits = rng.random((size, size)) < density
    image = np.where(bits, 0.75, 0.25) + rng.normal(scale=0.05, size=(size, size))
    return np.clip(image, 0.0, 1.0), labels


def bars_image(rng: np.random.Generator, size: int = 64, bars: int = 3):
    image = rng.uniform(0.2, 0.8, size=(size, size))
    labels = np.zeros((size, size), dtype=np.int64)
    for _ in range(bars):
        thick = int(rng.integers(max(4, size // 10), max(6, size // 5)))
        length = int(rng.integers(size // 2, size - 4))
        r0 = int(rng.integers(0, size - thick))
        c0 = int(rng.integers(0, size - length))
        if rng.random() < 0.5:
            rows, cols = slice(r0, r0 + thick), slice(c0, c0 + length)
            edges = [(r0, cols), (r0 + thick - 1, cols)]
            edge_rows = True
        else:
            rows, cols = slice(c0, c0 + length), slice(r0, r0 + thick)
            edges = [(r0, rows), (r0 + thick - 1, rows)]
            edge_rows = False
        labels[rows, cols] = 1
        for fixed, span in edges:
            if edge_rows:
                image[fixed, span] = 1.0
            else:
                image[span, fixed] = 1.0
    return image, labels


def xor_blobs(rng: np.random.Generator, count: int = 2000, spread: float = 0.3):
    centers = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    which = rng.integers(4, size=count)
    points = centers[which] + rng.normal(scale=spread, size=(count, 2))
    return points, (which < 2).astype(np.int64)


def generate(kind: str, count: int, size: int, seed: int, classes: int = 2):
    """Return ``count`` ``(image, labels)`` pairs (or ``(points, labels)`` for xor-blobs)."""
    rng = np.random.default_rng(seed)
    if kind == "textures":
        return [texture_image(rng, size, classes) for _ in range(count)]
    if kind == "bars":
        return [bars_image(rng, size) for _ in range(count)]
    if kind == "xor-blobs":
        return xor_blobs(rng, count)
    raise ValueError(f"unknown dataset kind {kind!r}; choose from {KINDS}")
