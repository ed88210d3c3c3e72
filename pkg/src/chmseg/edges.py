"""Edge-map post-processing: multi-scale averaging and non-maximum suppression."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import ndimage

from .core import ImagePlane, ProbabilityMap
from .pyramid import resize_bilinear

SCALES = (0.5, 1.0, 2.0)
NMS_SIGMA = 2.0


def _predictor(model) -> Callable[[ImagePlane], np.ndarray]:
    if callable(model):

        def predict(im):
            out = model(im)
            return np.asarray(out.plane(0) if isinstance(out, ProbabilityMap) else out, dtype=np.float64)

        return predict
    from .chm import chm_infer

    return lambda im: chm_infer(model, im).plane(0)


def multiscale_infer(model, image: ImagePlane, scales=SCALES) -> ProbabilityMap:
    """Average of the model's output at half, original and double resolution,
    each resized back to the input size.

    ``model`` is a trained ``ChmModel`` or any callable mapping an
    ``ImagePlane`` to a 2-D probability array.
    """
    if isinstance(image, np.ndarray):
        image = ImagePlane(image)
    predict = _predictor(model)
    shape = image.shape
    total = np.zeros(shape)
    for scale in scales:
        scaled = image if scale == 1.0 else ImagePlane(resize_bilinear(image.data, scale))
        out = predict(scaled)
        if out.shape != shape:
            out = resize_bilinear(out, size=shape)
        total += out
    return ProbabilityMap(np.clip(total / len(scales), 0.0, 1.0))


def edge_orientation(edge_map: np.ndarray, sigma: float = NMS_SIGMA) -> np.ndarray:
    """Angle (radians, x = column axis) of the dominant gradient direction.

    Uses the smoothed structure tensor of the smoothed map, so ridge crests,
    where the gradient itself vanishes, still get the across-ridge direction.
    """
    smooth = ndimage.gaussian_filter(edge_map, sigma, mode="nearest")
    gy, gx = np.gradient(smooth)
    jxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    jyy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    jxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    return 0.5 * np.arctan2(2.0 * jxy, jxx - jyy)


def _neighbour_gap(e: np.ndarray, dr: np.ndarray, dc: np.ndarray) -> np.ndarray:
    """``e - e(p + d)`` with bilinear interpolation, written as a weighted sum
    of differences so equal neighbours give an exact zero."""
    h, w = e.shape
    rows, cols = np.indices(e.shape, dtype=np.float64)
    r = np.clip(rows + dr, 0, h - 1)
    c = np.clip(cols + dc, 0, w - 1)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    return (
        (1 - fr) * (1 - fc) * (e - e[r0, c0])
        + (1 - fr) * fc * (e - e[r0, c1])
        + fr * (1 - fc) * (e - e[r1, c0])
        + fr * fc * (e - e[r1, c1])
    )


def nms_thin(edge_map, sigma: float = NMS_SIGMA):
    """Keep pixels that are maxima along the edge normal, zero the rest.

    A pixel must be strictly above its forward neighbour and at least equal
    to its backward neighbour (both at distance 1, bilinear), so plateaus do
    not survive as thick bands. Survivors keep their value.
    """
    wrap = isinstance(edge_map, ProbabilityMap)
    e = edge_map.plane(0) if wrap else np.asarray(edge_map, dtype=np.float64)
    theta = edge_orientation(e, sigma)
    dc, dr = np.cos(theta), np.sin(theta)
    keep = (_neighbour_gap(e, dr, dc) > 0) & (_neighbour_gap(e, -dr, -dc) >= 0)
    out = np.where(keep, e, 0.0)
    return ProbabilityMap(out) if wrap else out
