"""Per-pixel feature extraction.

Appearance features come from the input image at the resolution of the
current pyramid level; context features are plain neighbourhood samples of
classifier output maps taken on a sparse 57-point stencil inside a 15x15
window. Every window feature pads by edge replication, so images of any
size (down to 1x1) are accepted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage
from skimage.feature import canny as _skimage_canny

from .core import DimensionError, FeatureConfig, ImagePlane, ProbabilityMap

STENCIL_RADIUS = 7
HAAR_SIZES = (4, 8, 16)
HAAR_KINDS = ("h", "v", "x")
HOG_BINS = 9
HOG_CELL = 8
DENSE_CELL = 4
GABOR_WAVELENGTHS = (4.0, 8.0)
GABOR_ORIENTATIONS = 4
POSITION_NAMES = ("x", "y", "x2", "y2", "xy")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Row per pixel (row-major pixel order), column per feature."""

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.labels):
            raise DimensionError("feature values and labels disagree")

    @property
    def pixel_count(self) -> int:
        return self.values.shape[0]

    @property
    def feature_count(self) -> int:
        return self.values.shape[1]

    def hstack(self, other: "FeatureMatrix") -> "FeatureMatrix":
        return FeatureMatrix(np.hstack([self.values, other.values]), self.labels + other.labels)


def _ring(radius: int) -> list[tuple[int, int]]:
    # clockwise from the top-left corner
    r = radius
    cells = [(-r, c) for c in range(-r, r + 1)]
    cells += [(row, r) for row in range(-r + 1, r + 1)]
    cells += [(r, c) for c in range(r - 1, -r - 1, -1)]
    cells += [(row, -r) for row in range(r - 1, -r, -1)]
    return cells


@lru_cache(maxsize=None)
def stencil_layout() -> tuple[tuple[int, int], ...]:
    """The 57 (row, col) offsets of the sparse 15x15 stencil.

    Dense core of Chebyshev radius 2 (25 cells), every 2nd cell of ring 3,
    every 4th of ring 5 and ten evenly spaced cells of ring 7.
    """
    core = [(r, c) for r in range(-2, 3) for c in range(-2, 3)]
    ring3 = _ring(3)[::2]
    ring5 = _ring(5)[::4]
    outer = _ring(7)
    ring7 = [outer[round(k * len(outer) / 10)] for k in range(10)]
    return tuple(core + ring3 + ring5 + ring7)


def sample_stencil(grid: np.ndarray, offsets=None) -> np.ndarray:
    """``(H*W, len(offsets))`` neighbourhood samples with edge replication."""
    offsets = stencil_layout() if offsets is None else offsets
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    r = STENCIL_RADIUS
    padded = np.pad(grid, r, mode="edge")
    out = np.empty((h * w, len(offsets)))
    for k, (dr, dc) in enumerate(offsets):
        out[:, k] = padded[r + dr : r + dr + h, r + dc : r + dc + w].ravel()
    return out


# -- Haar -------------------------------------------------------------------


def integral_image(a: np.ndarray) -> np.ndarray:
    """Summed-area table with a leading zero row and column."""
    ii = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    ii[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    return ii


def box_sums(ii: np.ndarray, top: int, left: int, height: int, width: int, out_shape) -> np.ndarray:
    """Sums of the ``height x width`` boxes whose corners sit at ``(top + i, left + j)``
    in the array behind ``ii``, for every output pixel ``(i, j)``."""
    h, w = out_shape
    r0, c0 = top, left
    r1, c1 = top + height, left + width
    return (
        ii[r1 : r1 + h, c1 : c1 + w]
        - ii[r0 : r0 + h, c1 : c1 + w]
        - ii[r1 : r1 + h, c0 : c0 + w]
        + ii[r0 : r0 + h, c0 : c0 + w]
    )


def haar_responses(plane: np.ndarray) -> np.ndarray:
    """Two-rectangle (horizontal, vertical) and checkerboard responses at each
    window size, centred on every pixel, normalised by window area."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    pad = max(HAAR_SIZES) // 2
    ii = integral_image(np.pad(plane, pad, mode="edge"))
    out = np.empty((h * w, len(HAAR_SIZES) * len(HAAR_KINDS)))
    k = 0
    for size in HAAR_SIZES:
        half = size // 2
        o = pad - half  # top-left of the window in padded coordinates
        tl = box_sums(ii, o, o, half, half, (h, w))
        tr = box_sums(ii, o, o + half, half, half, (h, w))
        bl = box_sums(ii, o + half, o, half, half, (h, w))
        br = box_sums(ii, o + half, o + half, half, half, (h, w))
        area = float(size * size)
        out[:, k] = ((tl + bl) - (tr + br)).ravel() / area
        out[:, k + 1] = ((tl + tr) - (bl + br)).ravel() / area
        out[:, k + 2] = ((tl + br) - (tr + bl)).ravel() / area
        k += 3
    return out


# -- gradient histograms ----------------------------------------------------


def _gradients(plane: np.ndarray):
    p = np.pad(plane, 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx, gy


def hog_cells(plane: np.ndarray, cell: int = HOG_CELL, bins: int = HOG_BINS, eps: float = 1e-6) -> np.ndarray:
    """Block-normalised cell histograms, shape ``(cells_y, cells_x, bins)``.

    Unsigned orientations, magnitude-weighted hard binning. Each cell is
    normalised by the L2 norm of the 2x2-cell block it heads (edge cells
    reuse themselves as missing neighbours).
    """
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    gx, gy = _gradients(plane)
    mag = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    bin_index = np.minimum((angle / (np.pi / bins)).astype(int), bins - 1)
    ch, cw = math.ceil(h / cell), math.ceil(w / cell)
    votes = np.zeros((ch * cell, cw * cell, bins))
    rows, cols = np.indices((h, w))
    votes[rows, cols, bin_index] = mag
    hist = votes.reshape(ch, cell, cw, cell, bins).sum(axis=(1, 3))
    padded = np.pad(hist, ((0, 1), (0, 1), (0, 0)), mode="edge")
    block_sq = (
        (padded[:-1, :-1] ** 2).sum(-1)
        + (padded[1:, :-1] ** 2).sum(-1)
        + (padded[:-1, 1:] ** 2).sum(-1)
        + (padded[1:, 1:] ** 2).sum(-1)
    )
    return hist / np.sqrt(block_sq + eps**2)[..., None]


def hog_features(plane: np.ndarray, cell: int = HOG_CELL) -> np.ndarray:
    """Each pixel takes the normalised histogram of the cell containing it."""
    h, w = np.shape(plane)
    cells = hog_cells(plane, cell)
    rows = np.arange(h) // cell
    cols = np.arange(w) // cell
    return cells[rows[:, None], cols[None, :]].reshape(h * w, -1)


# -- Gabor / Canny / position -----------------------------------------------


@lru_cache(maxsize=None)
def gabor_kernel(wavelength: float, theta: float) -> np.ndarray:
    """Even-symmetric, zero-mean Gabor kernel."""
    sigma = 0.5 * wavelength
    radius = int(math.ceil(2 * sigma))
    y, x = np.mgrid[-radius : radius + 1, -radius : radius + 1].astype(float)
    xr = x * math.cos(theta) + y * math.sin(theta)
    yr = -x * math.sin(theta) + y * math.cos(theta)
    k = np.exp(-(xr**2 + yr**2) / (2 * sigma**2)) * np.cos(2 * math.pi * xr / wavelength)
    k -= k.mean()
    return k / np.abs(k).sum()


def gabor_features(plane: np.ndarray) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    cols = []
    for wavelength in GABOR_WAVELENGTHS:
        for i in range(GABOR_ORIENTATIONS):
            kernel = gabor_kernel(wavelength, i * math.pi / GABOR_ORIENTATIONS)
            cols.append(np.abs(ndimage.correlate(plane, kernel, mode="nearest")).ravel())
    return np.stack(cols, axis=1)


def canny_edges(plane: np.ndarray) -> np.ndarray:
    """Binary Canny map (sigma 1, hysteresis at the 70th/90th gradient percentiles)."""
    plane = np.asarray(plane, dtype=np.float64)
    if min(plane.shape) < 3 or np.ptp(plane) == 0:
        return np.zeros(plane.shape)
    edges = _skimage_canny(
        plane, sigma=1.0, low_threshold=0.7, high_threshold=0.9, use_quantiles=True, mode="nearest"
    )
    return edges.astype(np.float64)


def position_features(shape: tuple[int, int]) -> np.ndarray:
    """Normalised ``x, y, x^2, y^2, xy`` with pixel centres at ``(i + 0.5) / n``."""
    h, w = shape
    y, x = np.indices((h, w), dtype=np.float64)
    x = ((x + 0.5) / w).ravel()
    y = ((y + 0.5) / h).ravel()
    return np.stack([x, y, x * x, y * y, x * y], axis=1)


# -- registry ---------------------------------------------------------------


def feature_labels(config: FeatureConfig, channels: int) -> tuple[str, ...]:
    """Column names of the appearance matrix, in extraction order."""
    labels: list[str] = []
    if config.haar:
        labels += [f"haar{ch}_{k}{s}" for ch in range(channels) for s in HAAR_SIZES for k in HAAR_KINDS]
    if config.hog:
        labels += [f"hog{ch}_{b}" for ch in range(channels) for b in range(HOG_BINS)]
    if config.dense_orientation:
        labels += [f"dense_{b}" for b in range(HOG_BINS)]
    if config.gabor:
        labels += [
            f"gabor_l{int(wl)}_o{i}" for wl in GABOR_WAVELENGTHS for i in range(GABOR_ORIENTATIONS)
        ]
    if config.canny:
        labels.append("canny")
    if config.position:
        labels += [f"pos_{n}" for n in POSITION_NAMES]
    if config.stencil:
        labels += [f"stencil{ch}_{k}" for ch in range(channels) for k in range(len(stencil_layout()))]
    return tuple(labels)


def appearance_width(config: FeatureConfig, channels: int) -> int:
    return len(feature_labels(config, channels))


def _planes(image) -> np.ndarray:
    if isinstance(image, ImagePlane):
        return image.data
    a = np.asarray(image, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def extract_appearance(image, config: FeatureConfig | None = None) -> FeatureMatrix:
    """Appearance features for every pixel of ``image`` (``ImagePlane`` or ``(C, H, W)``)."""
    config = config or FeatureConfig()
    planes = _planes(image)
    channels = planes.shape[0]
    luminance = planes[0] if channels == 1 else planes[:3].mean(axis=0)
    blocks = []
    if config.haar:
        blocks += [haar_responses(p) for p in planes]
    if config.hog:
        blocks += [hog_features(p) for p in planes]
    if config.dense_orientation:
        blocks.append(hog_features(luminance, DENSE_CELL))
    if config.gabor:
        blocks.append(gabor_features(luminance))
    if config.canny:
        blocks.append(canny_edges(luminance).reshape(-1, 1))
    if config.position:
        blocks.append(position_features(luminance.shape))
    if config.stencil:
        blocks += [sample_stencil(p) for p in planes]
    n = luminance.size
    values = np.hstack(blocks) if blocks else np.empty((n, 0))
    return FeatureMatrix(values, feature_labels(config, channels))


def extract_context(context_maps) -> FeatureMatrix:
    """57 stencil samples from each context map, concatenated in map order."""
    grids = [m.plane(0) if isinstance(m, ProbabilityMap) else np.asarray(m, dtype=np.float64) for m in context_maps]
    if not grids:
        return FeatureMatrix(np.empty((0, 0)), ())
    shape = grids[0].shape
    for g in grids:
        if g.shape != shape:
            raise DimensionError(f"context maps disagree in shape: {g.shape} vs {shape}")
    n = len(stencil_layout())
    values = np.hstack([sample_stencil(g) for g in grids])
    labels = tuple(f"ctx{i}_{k}" for i in range(len(grids)) for k in range(n))
    return FeatureMatrix(values, labels)
