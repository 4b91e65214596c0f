"""Bilinear sampling shared by scanning, FOV matching and warping."""

from __future__ import annotations

import numpy as np


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray, fill=None) -> np.ndarray:
    """Sample ``image`` at fractional (column ``x``, row ``y``) positions.

    Integer positions return stored values exactly. Positions are clamped to
    the border pixels; when ``fill`` is given, positions beyond the pixel
    footprint ``[-0.5, W-0.5] x [-0.5, H-0.5]`` receive ``fill`` instead
    (scalar or per-channel sequence).
    """
    image = np.asarray(image)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w = image.shape[:2]

    outside = None
    if fill is not None:
        outside = (x < -0.5) | (x > w - 0.5) | (y < -0.5) | (y > h - 0.5) | ~np.isfinite(x) | ~np.isfinite(y)
    xc = np.clip(np.nan_to_num(x), 0, w - 1)
    yc = np.clip(np.nan_to_num(y), 0, h - 1)

    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]

    out = ((1 - fx) * (1 - fy) * image[y0, x0]
           + fx * (1 - fy) * image[y0, x1]
           + (1 - fx) * fy * image[y1, x0]
           + fx * fy * image[y1, x1])
    if outside is not None and outside.any():
        out[outside] = fill
    return out


def resize_bilinear(image: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Resample with pixel-center alignment (no anti-aliasing)."""
    h, w = image.shape[:2]
    oh, ow = out_shape
    if (oh, ow) == (h, w):
        return np.array(image, dtype=np.float64, copy=True)
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(image, xx, yy)
