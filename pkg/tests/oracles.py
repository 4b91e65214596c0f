"""Slow, direct-formula reference implementations used only by the tests."""

import math

import numpy as np


def ssim_direct(a, b, data_range, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Window-by-window SSIM with explicit weighted sums (no filtering tricks)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    half = (window - 1) / 2.0
    g = [math.exp(-((i - half) ** 2) / (2 * sigma * sigma)) for i in range(window)]
    total = sum(g)
    g = [v / total for v in g]
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    h, w = a.shape
    values = []
    for r in range(h - window + 1):
        for c in range(w - window + 1):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(window):
                for j in range(window):
                    wt = g[i] * g[j]
                    x = a[r + i, c + j]
                    y = b[r + i, c + j]
                    mx += wt * x
                    my += wt * y
            for i in range(window):
                for j in range(window):
                    wt = g[i] * g[j]
                    dx = a[r + i, c + j] - mx
                    dy = b[r + i, c + j] - my
                    sxx += wt * dx * dx
                    syy += wt * dy * dy
                    sxy += wt * dx * dy
            values.append(((2 * mx * my + c1) * (2 * sxy + c2))
                          / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return sum(values) / len(values)


def rmse_direct(a, b):
    a = np.asarray(a, dtype=np.float64).ravel().tolist()
    b = np.asarray(b, dtype=np.float64).ravel().tolist()
    return math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a, b)) / len(a))


def quantile_sorted(values, q):
    """Linear-interpolated order statistic at fraction q via an explicit sort."""
    s = sorted(np.asarray(values, dtype=np.float64).ravel().tolist())
    pos = q * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def enumerate_origins(h, w, patch, stride):
    """Every top-left corner by scanning all pixels, plus edge-snapped corners."""
    rows = [r for r in range(h) if r % stride == 0 and r + patch <= h]
    cols = [c for c in range(w) if c % stride == 0 and c + patch <= w]
    if rows[-1] + patch < h:
        rows.append(h - patch)
    if cols[-1] + patch < w:
        cols.append(w - patch)
    return [(r, c) for r in rows for c in cols]


def conv_out(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1
