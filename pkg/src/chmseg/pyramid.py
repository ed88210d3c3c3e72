"""Resolution operators: 2x2 average downsampling, 2x2 max-pooling,
pixel-duplication upsampling and bilinear resizing.

All operators act on the last two axes, so a ``(planes, H, W)`` stack is
processed plane by plane. Odd sizes are padded by replicating the last
row/column before each halving step, which gives ``ceil(n / 2)`` outputs.
"""

from __future__ import annotations

import numpy as np

from .core import ImagePlane, ProbabilityMap, Pyramid, DimensionError


def _unwrap(grid):
    if isinstance(grid, (ImagePlane, ProbabilityMap)):
        return grid.data, type(grid)
    return np.asarray(grid, dtype=np.float64), None


def _rewrap(array, kind):
    return kind(array) if kind is not None else array


def _pad_even(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2:]
    pad = [(0, 0)] * (a.ndim - 2) + [(0, h % 2), (0, w % 2)]
    if h % 2 or w % 2:
        a = np.pad(a, pad, mode="edge")
    return a


def _blocks(a: np.ndarray) -> np.ndarray:
    a = _pad_even(a)
    h, w = a.shape[-2:]
    return a.reshape(a.shape[:-2] + (h // 2, 2, w // 2, 2))


def _halve(a: np.ndarray, reduce: str) -> np.ndarray:
    b = _blocks(a)
    if reduce == "max":
        return b.max(axis=(-3, -1))
    # sum the four corners explicitly so the result does not depend on numpy's
    # pairwise-summation order
    return (b[..., 0, :, 0] + b[..., 0, :, 1] + b[..., 1, :, 0] + b[..., 1, :, 1]) / 4.0


def downsample(grid, l: int):
    """Average each 2x2 window, ``l`` times. ``l = 0`` returns the input."""
    if l < 0:
        raise ValueError("l must be non-negative")
    a, kind = _unwrap(grid)
    for _ in range(l):
        a = _halve(a, "mean")
    return _rewrap(a, kind)


def maxpool(grid, l: int):
    """Take the maximum of each 2x2 window, ``l`` times."""
    if l < 0:
        raise ValueError("l must be non-negative")
    a, kind = _unwrap(grid)
    for _ in range(l):
        a = _halve(a, "max")
    return _rewrap(a, kind)


def upsample(grid, l: int, target: tuple[int, int] | None = None):
    """Duplicate every pixel into a 2x2 block, ``l`` times.

    ``target`` crops the result to the given ``(height, width)`` so that an
    upsampled coarse map lines up with the original-resolution grid.
    """
    if l < 0:
        raise ValueError("l must be non-negative")
    a, kind = _unwrap(grid)
    if l:
        factor = 2**l
        a = np.repeat(np.repeat(a, factor, axis=-2), factor, axis=-1)
    if target is not None:
        th, tw = target
        h, w = a.shape[-2:]
        if th > h or tw > w:
            raise DimensionError(f"cannot crop {(h, w)} to larger target {(th, tw)}")
        a = a[..., :th, :tw]
    return _rewrap(a, kind)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: output i samples input coordinate (i + 0.5) * n_in / n_out - 0.5
    if n_in == n_out:
        idx = np.arange(n_in)
        return idx, idx, np.zeros(n_in)
    coord = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    coord = np.clip(coord, 0.0, n_in - 1)
    lo = np.floor(coord).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, coord - lo


def resize_bilinear(grid, scale: float | None = None, size: tuple[int, int] | None = None):
    """Bilinear resize by ``scale`` (output ``round(scale * n)``, at least 1)
    or to an explicit ``size = (height, width)``."""
    a, kind = _unwrap(grid)
    h, w = a.shape[-2:]
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError("scale must be positive")
        size = (max(1, int(round(scale * h))), max(1, int(round(scale * w))))
    oh, ow = size
    r0, r1, fr = _axis_weights(h, oh)
    c0, c1, fc = _axis_weights(w, ow)
    fr = fr[:, None]
    top = a[..., r0, :] * (1 - fr) + a[..., r1, :] * fr
    out = top[..., c0] * (1 - fc) + top[..., c1] * fc
    if oh == h and ow == w:
        out = a.copy()
    else:
        # convex weights can overshoot by an ulp
        out = np.clip(out, a.min(), a.max())
    return _rewrap(out, kind)


def build_pyramid(grid, levels: int, op=downsample) -> Pyramid:
    """Levels 1..``levels`` of ``grid``, each one halving step below the last."""
    a, _ = _unwrap(grid)
    out = [a]
    for _ in range(levels - 1):
        out.append(op(out[-1], 1))
    return Pyramid(tuple(out))
