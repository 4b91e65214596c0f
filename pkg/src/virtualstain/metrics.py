"""Lab-space SSIM / RMSE evaluation of virtual stains."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import RGBImage, array_digest

# sRGB (IEC 61966-2-1) primaries to CIE XYZ, D65 white
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = SRGB_TO_XYZ.sum(axis=1)  # XYZ of RGB = (1, 1, 1)

_DELTA = 6.0 / 29.0

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
# dynamic range per Lab channel: L spans 0..100, a and b span -128..127
LAB_RANGES = (100.0, 255.0, 255.0)


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def rgb_to_lab(img) -> np.ndarray:
    """Convert unit-range sRGB to CIE Lab (D65). Accepts RGBImage or (..., 3) array."""
    rgb = img.pixels if isinstance(img, RGBImage) else np.asarray(img, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError("last axis must hold 3 color channels")
    xyz = srgb_to_linear(rgb) @ SRGB_TO_XYZ.T
    f = _lab_f(xyz / D65_WHITE)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


# --------------------------------------------------------------------------- #
# SSIM
# --------------------------------------------------------------------------- #

def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    n = len(taps)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ taps
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ taps


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float, window: int = WINDOW,
             sigma: float = SIGMA, k1: float = K1, k2: float = K2) -> np.ndarray:
    """Local SSIM for every window position fully inside the image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"need two equal-shape 2-D images, got {a.shape} and {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    taps = gaussian_window(window, sigma)
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, **kwargs) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    return float(ssim_map(a, b, data_range, **kwargs).mean())


def lab_ssim(lab_a: np.ndarray, lab_b: np.ndarray) -> float:
    """Equal-weight mean of the per-channel SSIMs of two Lab images."""
    return float(np.mean([ssim(lab_a[..., i], lab_b[..., i], LAB_RANGES[i]) for i in range(3)]))


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean squared difference over all pixels and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


# --------------------------------------------------------------------------- #
# Patch protocol
# --------------------------------------------------------------------------- #

@dataclass
class MetricsReport:
    n_patches: int
    patch_px: int
    ssim_mean: float
    ssim_std: float
    rmse_mean: float
    rmse_std: float
    seed: int
    source_digests: dict[str, str] = field(default_factory=dict)
    per_patch_ssim: list[float] = field(default_factory=list, repr=False)
    per_patch_rmse: list[float] = field(default_factory=list, repr=False)

    def summary(self) -> str:
        return (f"SSIM {self.ssim_mean:.3f} ± {self.ssim_std:.3f}, "
                f"RMSE {self.rmse_mean:.3f} ± {self.rmse_std:.3f} "
                f"over {self.n_patches} patches of {self.patch_px}x{self.patch_px} px")

    def to_dict(self, per_patch: bool = False) -> dict:
        d = asdict(self)
        if not per_patch:
            d.pop("per_patch_ssim")
            d.pop("per_patch_rmse")
        d["summary"] = self.summary()
        return d

    def write(self, path: str | Path, per_patch: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(per_patch), indent=2) + "\n")


def _integral(x: np.ndarray) -> np.ndarray:
    s = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    s[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    return s


def _box_means(sat: np.ndarray, r: np.ndarray, c: np.ndarray, size: int) -> np.ndarray:
    total = sat[r + size, c + size] - sat[r, c + size] - sat[r + size, c] + sat[r, c]
    return total / (size * size)


def sample_patch_origins(shape: tuple[int, int], n_patches: int, patch_px: int,
                         seed: int) -> np.ndarray:
    """Uniform top-left corners; without replacement when enough exist."""
    h, w = shape
    if h < patch_px or w < patch_px:
        raise ValueError(f"image {h}x{w} smaller than patch {patch_px}")
    nr, nc = h - patch_px + 1, w - patch_px + 1
    total = nr * nc
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=n_patches, replace=total < n_patches)
    return np.column_stack(np.divmod(flat, nc))


def evaluate(pred: RGBImage, truth: RGBImage, n_patches: int = 1000, patch_px: int = 256,
             seed: int = 0) -> MetricsReport:
    """Per-patch Lab SSIM / RMSE statistics over seeded random patches.

    Whole-image SSIM maps are computed once per Lab channel; the SSIM of a
    patch is the mean of the map entries whose windows lie inside the patch,
    which equals running SSIM on the cropped patch.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if patch_px < WINDOW:
        raise ValueError(f"patch must be at least {WINDOW} px")
    origins = sample_patch_origins(pred.shape, n_patches, patch_px, seed)
    lab_p = rgb_to_lab(pred)
    lab_t = rgb_to_lab(truth)

    r, c = origins[:, 0], origins[:, 1]
    inner = patch_px - WINDOW + 1
    ssim_sum = np.zeros(len(origins))
    for ch in range(3):
        sat = _integral(ssim_map(lab_p[..., ch], lab_t[..., ch], LAB_RANGES[ch]))
        ssim_sum += _box_means(sat, r, c, inner)
    per_ssim = ssim_sum / 3.0
    sq = _integral(((lab_p - lab_t) ** 2).mean(axis=-1))
    per_rmse = np.sqrt(np.maximum(_box_means(sq, r, c, patch_px), 0.0))

    return MetricsReport(
        n_patches=int(n_patches),
        patch_px=int(patch_px),
        ssim_mean=float(per_ssim.mean()),
        ssim_std=float(per_ssim.std()),
        rmse_mean=float(per_rmse.mean()),
        rmse_std=float(per_rmse.std()),
        seed=int(seed),
        source_digests={"pred": array_digest(pred.pixels), "truth": array_digest(truth.pixels)},
        per_patch_ssim=per_ssim.tolist(),
        per_patch_rmse=per_rmse.tolist(),
    )


def comparison_panel(*images: RGBImage, gap: int = 8) -> RGBImage:
    """Side-by-side strip (e.g. raw input | virtual stain | ground truth)."""
    h = max(im.shape[0] for im in images)
    parts = []
    for i, im in enumerate(images):
        px = np.ones((h, im.shape[1], 3))
        px[:im.shape[0]] = im.pixels
        parts.append(px)
        if i < len(images) - 1:
            parts.append(np.ones((h, gap, 3)))
    return RGBImage(np.concatenate(parts, axis=1))
