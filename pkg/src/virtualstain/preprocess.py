"""Conditioning of TA-PARS channels into the three-channel model input.

Order: normalize -> contrast stretch -> invert -> histogram match -> stack.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import ChannelImage, MultiChannelImage, RGBImage

N_BINS = 256
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class PreprocessConfig:
    low_saturate_pct: float = 1.0
    high_saturate_pct: float = 1.0
    invert: bool = True
    hist_match: bool = True

    def __post_init__(self):
        lo, hi = self.low_saturate_pct, self.high_saturate_pct
        if lo < 0 or hi < 0 or lo + hi >= 100:
            raise ValueError("need 0 <= low, high and low + high < 100")

    def to_dict(self) -> dict:
        return asdict(self)


def normalize(c: ChannelImage) -> ChannelImage:
    """Min-max rescale to the full unit range (constant channels map to 0)."""
    x = c.pixels
    lo, hi = x.min(), x.max()
    if hi == lo:
        return ChannelImage(np.zeros_like(x), c.pitch_nm)
    return ChannelImage((x - lo) / (hi - lo), c.pitch_nm)


def stretch_limits(values: np.ndarray, cfg: PreprocessConfig) -> tuple[float, float]:
    flat = np.asarray(values, dtype=np.float64).ravel()
    lo = np.quantile(flat, cfg.low_saturate_pct / 100.0, method="linear")
    hi = np.quantile(flat, 1.0 - cfg.high_saturate_pct / 100.0, method="linear")
    return float(lo), float(hi)


def contrast_stretch(c: ChannelImage, cfg: PreprocessConfig = PreprocessConfig()) -> ChannelImage:
    """Saturate the given percentages at each end and rescale linearly.

    Limits are linearly interpolated order statistics. A channel whose two
    limits coincide maps to 0.5 everywhere.
    """
    lo, hi = stretch_limits(c.pixels, cfg)
    if hi == lo:
        return ChannelImage(np.full(c.shape, 0.5), c.pitch_nm)
    return ChannelImage(np.clip((c.pixels - lo) / (hi - lo), 0.0, 1.0), c.pitch_nm)


def invert(c: ChannelImage) -> ChannelImage:
    return ChannelImage(1.0 - c.pixels, c.pitch_nm)


def _edge_cdf(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    edges = np.linspace(0.0, 1.0, N_BINS + 1)
    counts, _ = np.histogram(values, bins=edges)
    cdf = np.concatenate([[0.0], np.cumsum(counts)]) / values.size
    return edges, cdf


@dataclass(frozen=True, eq=False)
class ReferenceHistogram:
    """Target distribution for histogram matching, storable in a checkpoint."""

    cdf: np.ndarray  # cumulative fraction at the N_BINS + 1 bin edges
    constant: float | None = None

    @classmethod
    def from_values(cls, values) -> "ReferenceHistogram":
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            raise ValueError("empty reference")
        if values.min() == values.max():
            return cls(_edge_cdf(values)[1], float(values[0]))
        return cls(_edge_cdf(values)[1])

    def to_dict(self) -> dict:
        return {"cdf": self.cdf.tolist(), "constant": self.constant}

    @classmethod
    def from_dict(cls, data: dict) -> "ReferenceHistogram":
        return cls(np.asarray(data["cdf"], dtype=np.float64), data.get("constant"))


def match_to_reference(c: ChannelImage, ref: ReferenceHistogram) -> ChannelImage:
    if ref.constant is not None:
        return ChannelImage(np.full(c.shape, ref.constant), c.pitch_nm)
    edges, cdf_c = _edge_cdf(c.pixels)
    u = np.interp(c.pixels, edges, cdf_c)
    # inverse of the reference CDF: keep the first edge of every flat run
    keep = np.concatenate([[True], np.diff(ref.cdf) > 0])
    out = np.interp(u, ref.cdf[keep], edges[keep])
    return ChannelImage(np.clip(out, 0.0, 1.0), c.pitch_nm)


def histogram_match(c: ChannelImage, reference: ChannelImage) -> ChannelImage:
    """Map ``c`` through F_ref^-1(F_c(x)) using 256-bin piecewise-linear CDFs.

    A constant reference maps every pixel to that constant.
    """
    return match_to_reference(c, ReferenceHistogram.from_values(reference.pixels))


def luminance(img: RGBImage) -> ChannelImage:
    """Rec. 601 luma of an RGB image."""
    luma = np.clip(img.pixels @ np.asarray(LUMA_WEIGHTS), 0.0, 1.0)
    return ChannelImage(luma, img.pitch_nm if img.pitch_nm is not None else 250.0)


def stack_channels(nr: ChannelImage, rad: ChannelImage, sc: ChannelImage) -> MultiChannelImage:
    if not (nr.shape == rad.shape == sc.shape):
        raise ValueError(f"channel shapes differ: {nr.shape}, {rad.shape}, {sc.shape}")
    if not (nr.pitch_nm == rad.pitch_nm == sc.pitch_nm):
        raise ValueError("channel pitches differ")
    return MultiChannelImage(nr, rad, sc)


def unstack_channels(img: MultiChannelImage) -> tuple[ChannelImage, ChannelImage, ChannelImage]:
    return img.channels


def condition_channel(c: ChannelImage, cfg: PreprocessConfig,
                      reference: ReferenceHistogram | None = None) -> ChannelImage:
    out = contrast_stretch(normalize(c), cfg)
    if cfg.invert:
        out = invert(out)
    if cfg.hist_match and reference is not None:
        out = match_to_reference(out, reference)
    return out


def label_reference(labels) -> ReferenceHistogram:
    """Pooled luminance histogram of one or more registered H&E labels."""
    if isinstance(labels, RGBImage):
        labels = [labels]
    return ReferenceHistogram.from_values(np.concatenate([luminance(l).pixels.ravel() for l in labels]))


def prepare_input(raw: MultiChannelImage, cfg: PreprocessConfig = PreprocessConfig(),
                  reference: ReferenceHistogram | None = None) -> MultiChannelImage:
    """Condition every channel and stack them in the fixed order.

    ``reference`` is the luminance histogram of the registered H&E labels
    (see :func:`label_reference`). Training stores it with the checkpoint so
    that inference conditions unseen images identically. Histogram matching
    is skipped when it is None.
    """
    return stack_channels(*(condition_channel(c, cfg, reference) for c in raw.channels))
