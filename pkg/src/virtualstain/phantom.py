"""Synthetic paired TA-PARS / H&E phantoms and a simulated acquisition path.

Phantom geometry is drawn from a seed: a tissue region with holes, vessel
rings, thin fibers and non-overlapping elliptical nuclei. The non-radiative
channel lights up nuclei, the radiative channel lights up extranuclear
structures, and the scattering channel is a smooth envelope over all tissue.
The paired H&E image is rendered from the same geometry with a fixed
Beer-Lambert style palette.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import DEFAULT_PITCH_NM, ChannelImage, MultiChannelImage, RGBImage
from .registration import ControlPointSet
from .sampling import bilinear_sample

PULSE_RATE_HZ = 50_000.0

# Fixed H&E palette (optical densities per unit stain concentration).
HE_BACKGROUND = (0.97, 0.95, 0.97)
HEMATOXYLIN_OD = (1.10, 1.45, 0.55)
EOSIN_OD = (0.20, 1.90, 0.80)

PALETTE = {
    "background_rgb": HE_BACKGROUND,
    "hematoxylin_od": HEMATOXYLIN_OD,
    "eosin_od": EOSIN_OD,
}


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 512
    width: int = 512
    nuclei_density: float = 5.0  # nuclei per 1e4 px^2
    nucleus_radius_px: float = 6.0
    nucleus_radius_spread: float = 1.5
    fiber_density: float = 2.0  # fibers per 1e4 px^2
    vessel_count: int = 2
    noise_sigma: float = 0.01
    pitch_nm: float = DEFAULT_PITCH_NM

    def __post_init__(self):
        if self.height < 64 or self.width < 64:
            raise ValueError("phantom dimensions must be at least 64 px")
        for name in ("nuclei_density", "fiber_density", "vessel_count",
                     "noise_sigma", "nucleus_radius_spread"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.nucleus_radius_px <= 0 or self.pitch_nm <= 0:
            raise ValueError("nucleus_radius_px and pitch_nm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Phantom:
    """Rendered phantom plus the geometry masks it was drawn from."""

    channels: MultiChannelImage
    he: RGBImage
    nuclei_mask: np.ndarray
    extranuclear_mask: np.ndarray
    n_nuclei: int


def _truncated_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.zeros(shape)
    return np.clip(rng.normal(0.0, sigma, size=shape), -3.0 * sigma, 3.0 * sigma)


def _tissue_mask(rng, h, w) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=min(h, w) / 10.0, mode="wrap")
    return field > np.quantile(field, 0.12)


def _draw_vessels(rng, h, w, count, tissue) -> tuple[np.ndarray, np.ndarray]:
    walls = np.zeros((h, w), dtype=bool)
    lumen = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(count)):
        outer = rng.uniform(14.0, 28.0)
        cy = rng.uniform(outer, h - outer)
        cx = rng.uniform(outer, w - outer)
        d = np.hypot(yy - cy, xx - cx)
        walls |= (d <= outer) & (d > outer - 4.0)
        lumen |= d <= outer - 4.0
    walls &= ~lumen
    return walls, lumen


def _draw_fibers(rng, h, w, density, tissue) -> np.ndarray:
    n = int(round(density * h * w / 1e4))
    fibers = np.zeros((h, w), dtype=bool)
    for _ in range(n):
        y, x = rng.uniform(0, h), rng.uniform(0, w)
        theta = rng.uniform(0, np.pi)
        length = rng.uniform(30.0, 110.0)
        bend = rng.normal(0.0, 0.02)
        steps = int(length * 2)
        for _ in range(steps):
            iy, ix = int(y), int(x)
            if 0 <= iy < h and 0 <= ix < w:
                fibers[iy, ix] = True
            theta += bend
            y += 0.5 * np.sin(theta)
            x += 0.5 * np.cos(theta)
    fibers = ndimage.binary_dilation(fibers, iterations=1)
    return fibers & tissue


def _draw_nuclei(rng, spec: PhantomSpec, allowed: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Place non-overlapping ellipses; returns (label mask, per-nucleus stain, count)."""
    h, w = spec.height, spec.width
    target = int(round(spec.nuclei_density * h * w / 1e4))
    labels = np.zeros((h, w), dtype=np.int32)
    strengths = [0.0]
    centers: list[tuple[float, float]] = []
    radii: list[float] = []
    r_max = spec.nucleus_radius_px * 1.5 * 1.25
    attempts = 0
    max_attempts = 60 * max(target, 1)
    while len(centers) < target and attempts < max_attempts:
        attempts += 1
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if not allowed[int(cy), int(cx)]:
            continue
        r = float(np.clip(rng.normal(spec.nucleus_radius_px, spec.nucleus_radius_spread),
                          max(2.0, 0.5 * spec.nucleus_radius_px), 1.5 * spec.nucleus_radius_px))
        elong = rng.uniform(0.0, 0.25)
        a, b = r * (1 + elong), r / (1 + elong)
        if centers:
            d = np.hypot(np.array([c[0] for c in centers]) - cy, np.array([c[1] for c in centers]) - cx)
            if np.any(d < (np.array(radii) + a + 2.0)):
                continue
        phi = rng.uniform(0, np.pi)
        strength = rng.uniform(0.8, 1.0)
        y0, y1 = max(0, int(cy - r_max - 1)), min(h, int(cy + r_max + 2))
        x0, x1 = max(0, int(cx - r_max - 1)), min(w, int(cx + r_max + 2))
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if not inside.any():
            continue
        labels[y0:y1, x0:x1][inside] = len(centers) + 1
        centers.append((cy, cx))
        radii.append(a)
        strengths.append(strength)
    return labels, np.asarray(strengths), len(centers)


def render_phantom(spec: PhantomSpec, seed: int) -> Phantom:
    """Draw phantom geometry and render both imaging domains."""
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width

    tissue = _tissue_mask(rng, h, w)
    walls, lumen = _draw_vessels(rng, h, w, spec.vessel_count, tissue)
    tissue = tissue & ~lumen
    fibers = _draw_fibers(rng, h, w, spec.fiber_density, tissue)
    labels, strengths, n_nuclei = _draw_nuclei(rng, spec, tissue & ~walls & ~fibers)
    nuclei = labels > 0

    texture = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=6.0)
    texture = 1.0 + 0.15 * texture / (texture.std() + 1e-12)

    nuc_stain = ndimage.gaussian_filter(strengths[labels] * nuclei, sigma=0.7)
    nuc_soft = ndimage.gaussian_filter(nuclei.astype(float), sigma=0.7)
    stroma = 0.35 * ndimage.gaussian_filter(tissue.astype(float), sigma=1.5) * texture
    stroma += 0.45 * ndimage.gaussian_filter(fibers.astype(float), sigma=0.7)
    stroma += 0.55 * ndimage.gaussian_filter(walls.astype(float), sigma=0.7)
    eosin = np.clip(stroma, 0.0, 1.0) * (1.0 - nuc_soft)
    hema = np.clip(nuc_stain, 0.0, 1.0)

    structure = (tissue | walls | nuclei).astype(float)
    scatter = 0.75 * ndimage.gaussian_filter(structure, sigma=3.0) + 0.1 * nuc_soft

    sigma = spec.noise_sigma
    nr = np.clip(hema + _truncated_noise(rng, (h, w), sigma), 0.0, 1.0)
    rad = np.clip(eosin + _truncated_noise(rng, (h, w), sigma), 0.0, 1.0)
    sc = np.clip(scatter + _truncated_noise(rng, (h, w), sigma), 0.0, 1.0)

    od = hema[..., None] * np.asarray(HEMATOXYLIN_OD) + eosin[..., None] * np.asarray(EOSIN_OD)
    he = np.asarray(HE_BACKGROUND) * np.exp(-od)
    he = np.clip(he + _truncated_noise(rng, he.shape, sigma), 0.0, 1.0)

    pitch = spec.pitch_nm
    channels = MultiChannelImage(ChannelImage(nr, pitch), ChannelImage(rad, pitch), ChannelImage(sc, pitch))
    extranuclear = (tissue | walls | fibers) & ~nuclei
    return Phantom(channels, RGBImage(he, pitch), nuclei, extranuclear, n_nuclei)


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[MultiChannelImage, RGBImage]:
    phantom = render_phantom(spec, seed)
    return phantom.channels, phantom.he


# --------------------------------------------------------------------------- #
# Acquisition: per-pulse records and gridding
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    pitch_nm: float = DEFAULT_PITCH_NM
    origin_nm: tuple[float, float] = (0.0, 0.0)  # (x, y)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid must have at least one node")
        if not self.pitch_nm > 0:
            raise ValueError("pitch_nm must be positive")

    def node_positions(self) -> tuple[np.ndarray, np.ndarray]:
        """Raster-ordered node (x, y) positions in nanometres."""
        rows, cols = np.divmod(np.arange(self.height * self.width), self.width)
        x = self.origin_nm[0] + cols * self.pitch_nm
        y = self.origin_nm[1] + rows * self.pitch_nm
        return x, y


@dataclass(frozen=True)
class ScanRecord:
    pulse_index: int
    stage_x_nm: float
    stage_y_nm: float
    f_nr: float
    f_rad: float
    f_sc: float

    @property
    def time_s(self) -> float:
        return self.pulse_index / PULSE_RATE_HZ


@dataclass(frozen=True, eq=False)
class ScanRecords(Sequence):
    """Columnar storage for a pulse stream; indexable as ScanRecord rows."""

    pulse_index: np.ndarray
    x_nm: np.ndarray
    y_nm: np.ndarray
    features: np.ndarray  # (N, 3) in channel order

    def __post_init__(self):
        n = len(self.pulse_index)
        if not (len(self.x_nm) == len(self.y_nm) == len(self.features) == n):
            raise ValueError("record columns must have equal length")
        if self.features.ndim != 2 or self.features.shape[1] != 3:
            raise ValueError("features must be (N, 3)")

    def __len__(self) -> int:
        return len(self.pulse_index)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return ScanRecords(self.pulse_index[i], self.x_nm[i], self.y_nm[i], self.features[i])
        f = self.features[i]
        return ScanRecord(int(self.pulse_index[i]), float(self.x_nm[i]), float(self.y_nm[i]),
                          float(f[0]), float(f[1]), float(f[2]))

    def __iter__(self) -> Iterator[ScanRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def timestamps_s(self) -> np.ndarray:
        return self.pulse_index / PULSE_RATE_HZ

    @classmethod
    def from_records(cls, records: Sequence[ScanRecord]) -> "ScanRecords":
        if isinstance(records, ScanRecords):
            return records
        records = list(records)
        return cls(
            np.array([r.pulse_index for r in records], dtype=np.int64),
            np.array([r.stage_x_nm for r in records], dtype=np.float64),
            np.array([r.stage_y_nm for r in records], dtype=np.float64),
            np.array([[r.f_nr, r.f_rad, r.f_sc] for r in records], dtype=np.float64).reshape(-1, 3),
        )


def simulate_scan(truth: MultiChannelImage, grid: GridSpec, jitter_nm: float = 0.0,
                  seed: int = 0) -> ScanRecords:
    """Emit one pulse per grid node in raster order.

    Stage positions are the node positions plus uniform jitter; features are
    bilinear samples of the truth channels at the jittered positions.
    """
    if jitter_nm < 0:
        raise ValueError("jitter_nm must be non-negative")
    tp = truth.pitch_nm
    th, tw = truth.shape
    x, y = grid.node_positions()
    tol = 1e-9 * tp
    if x.min() < -tol or y.min() < -tol or x.max() > (tw - 1) * tp + tol or y.max() > (th - 1) * tp + tol:
        raise ValueError("scan grid extends beyond the truth image extent")
    rng = np.random.default_rng(seed)
    if jitter_nm > 0:
        x = x + rng.uniform(-jitter_nm, jitter_nm, size=x.shape)
        y = y + rng.uniform(-jitter_nm, jitter_nm, size=y.shape)
    stack = truth.to_array()
    feats = bilinear_sample(stack, x / tp, y / tp)
    feats = np.clip(feats, 0.0, 1.0)
    return ScanRecords(np.arange(len(x), dtype=np.int64), x, y, feats)


def compress_event(trace) -> float:
    """Collapse one sampled pulse response to a pixel value (max |amplitude|, clipped)."""
    trace = np.asarray(trace, dtype=np.float64).ravel()
    if trace.size == 0:
        raise ValueError("cannot compress an empty trace")
    return float(min(1.0, np.max(np.abs(trace))))


def reconstruct_grid(records: Sequence[ScanRecord], grid: GridSpec) -> MultiChannelImage:
    """Fit scattered pulse features onto a Cartesian grid.

    Each node takes the features of the nearest record strictly closer than
    one pitch, so a missing node is not claimed by its neighbours' records.
    Nodes without such a record are filled with the mean of their assigned
    4-neighbours, or 0 when none of them is assigned.
    """
    recs = ScanRecords.from_records(records)
    if len(recs) == 0:
        raise ValueError("no scan records")
    tree = cKDTree(np.column_stack([recs.x_nm, recs.y_nm]))
    nx, ny = grid.node_positions()
    dist, idx = tree.query(np.column_stack([nx, ny]), k=1,
                           distance_upper_bound=grid.pitch_nm * (1.0 - 1e-9))
    h, w = grid.height, grid.width
    have = (idx < len(recs)).reshape(h, w)
    out = np.zeros((h, w, 3))
    out.reshape(-1, 3)[have.ravel()] = recs.features[idx[have.ravel()]]

    if not have.all():
        padded = np.pad(out, ((1, 1), (1, 1), (0, 0)))
        mask = np.pad(have, 1).astype(np.float64)
        nb_sum = (padded[:-2, 1:-1] * mask[:-2, 1:-1, None] + padded[2:, 1:-1] * mask[2:, 1:-1, None]
                  + padded[1:-1, :-2] * mask[1:-1, :-2, None] + padded[1:-1, 2:] * mask[1:-1, 2:, None])
        nb_cnt = mask[:-2, 1:-1] + mask[2:, 1:-1] + mask[1:-1, :-2] + mask[1:-1, 2:]
        gaps = ~have
        filled = np.where(nb_cnt[..., None] > 0, nb_sum / np.maximum(nb_cnt, 1)[..., None], 0.0)
        out[gaps] = filled[gaps]
    out = np.clip(out, 0.0, 1.0)
    return MultiChannelImage.from_array(out, grid.pitch_nm)


_RECORD_HEADER = "pulse_index,x_nm,y_nm,f_nr,f_rad,f_sc"


def write_scan_records(records: Sequence[ScanRecord], path: str | Path) -> None:
    """Columnar text: one pulse per line, positions in nm, features in [0, 1]."""
    recs = ScanRecords.from_records(records)
    with open(path, "w") as fh:
        fh.write(f"# pulse rate {PULSE_RATE_HZ:.0f} Hz; time_s = pulse_index / rate\n")
        fh.write(_RECORD_HEADER + "\n")
        for i in range(len(recs)):
            f = recs.features[i]
            fh.write(f"{int(recs.pulse_index[i])},{float(recs.x_nm[i])!r},{float(recs.y_nm[i])!r},"
                     f"{float(f[0])!r},{float(f[1])!r},{float(f[2])!r}\n")


def read_scan_records(path: str | Path) -> ScanRecords:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    if not lines or lines[0].strip() != _RECORD_HEADER:
        raise ValueError(f"{path}: expected header {_RECORD_HEADER}")
    data = np.loadtxt(lines[1:], delimiter=",", ndmin=2) if len(lines) > 1 else np.zeros((0, 6))
    return ScanRecords(data[:, 0].astype(np.int64), data[:, 1], data[:, 2], data[:, 3:6])


# --------------------------------------------------------------------------- #
# Known non-rigid warps for registration tests
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class DisplacementField:
    """d(x, y) = offset + sum_k v_k exp(-|p - c_k|^2 / (2 s_k^2)), in pixels."""

    centers: np.ndarray  # (K, 2) as (x, y)
    sigmas: np.ndarray  # (K,)
    vectors: np.ndarray  # (K, 2)
    offset: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def translation(cls, dx: float, dy: float) -> "DisplacementField":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), (float(dx), float(dy)))

    def __call__(self, xy) -> np.ndarray:
        p = np.asarray(xy, dtype=np.float64)
        d = np.broadcast_to(np.asarray(self.offset, dtype=np.float64), p.shape).copy()
        for c, s, v in zip(self.centers, self.sigmas, self.vectors):
            g = np.exp(-np.sum((p - c) ** 2, axis=-1) / (2.0 * s * s))
            d += g[..., None] * v
        return d

    def max_magnitude(self, shape: tuple[int, int], step: int = 1) -> float:
        yy, xx = np.mgrid[0:shape[0]:step, 0:shape[1]:step]
        d = self(np.stack([xx, yy], axis=-1).astype(np.float64))
        return float(np.max(np.hypot(d[..., 0], d[..., 1])))


def random_field(shape: tuple[int, int], amplitude: float, seed: int) -> DisplacementField:
    """Sum of 3-6 Gaussian bumps scaled so the max displacement on the pixel grid equals ``amplitude``."""
    if amplitude < 0:
        raise ValueError("warp amplitude must be non-negative")
    h, w = shape
    rng = np.random.default_rng(seed)
    k = int(rng.integers(3, 7))
    centers = np.column_stack([rng.uniform(0, w, k), rng.uniform(0, h, k)])
    sigmas = rng.uniform(0.25, 0.45, k) * min(h, w)
    angles = rng.uniform(0, 2 * np.pi, k)
    mags = rng.uniform(0.5, 1.0, k)
    vectors = np.column_stack([np.cos(angles), np.sin(angles)]) * mags[:, None]
    field = DisplacementField(centers, sigmas, vectors)
    peak = field.max_magnitude(shape)
    scale = amplitude / peak if peak > 0 else 0.0
    return DisplacementField(centers, sigmas, vectors * scale)


def _invert_field(field: DisplacementField, q: np.ndarray, iterations: int = 50) -> np.ndarray:
    """Solve p + d(p) = q for p by fixed-point iteration."""
    p = q.copy()
    for _ in range(iterations):
        p_next = q - field(p)
        if np.max(np.abs(p_next - p)) < 1e-10:
            return p_next
        p = p_next
    return p


def warp_with_field(he: RGBImage, field: DisplacementField, n_points: int = 30,
                    seed: int = 0, margin: float | None = None) -> tuple[RGBImage, ControlPointSet]:
    """Warp ``he`` so that reference point p appears at p + d(p) in the output."""
    h, w = he.shape
    yy, xx = np.mgrid[0:h, 0:w]
    q = np.stack([xx, yy], axis=-1).reshape(-1, 2).astype(np.float64)
    if field.centers.size == 0:
        src = q - np.asarray(field.offset)
    else:
        src = _invert_field(field, q)
    warped = bilinear_sample(he.pixels, src[:, 0], src[:, 1], fill=np.ones(3))
    warped = np.clip(warped.reshape(h, w, 3), 0.0, 1.0)

    if n_points < 12:
        raise ValueError("need at least 12 control points")
    peak = max(abs(field.offset[0]), abs(field.offset[1])) + float(np.abs(field.vectors).sum())
    if margin is None:
        margin = min(peak + 4.0, 0.2 * min(h, w))
    rng = np.random.default_rng([seed, 1])
    side = int(np.ceil(np.sqrt(n_points)))
    cells = rng.permutation(side * side)[:n_points]
    cy, cx = np.divmod(cells, side)
    span_x, span_y = (w - 1 - 2 * margin) / side, (h - 1 - 2 * margin) / side
    ref = np.column_stack([
        margin + (cx + rng.uniform(0.1, 0.9, n_points)) * span_x,
        margin + (cy + rng.uniform(0.1, 0.9, n_points)) * span_y,
    ])
    mov = ref + field(ref)
    return RGBImage(warped, he.pitch_nm), ControlPointSet(ref, mov)


def warp_pair(he: RGBImage, warp_amplitude_px: float, seed: int,
              n_points: int = 30) -> tuple[RGBImage, ControlPointSet]:
    """Apply a random smooth non-rigid warp and return exact correspondences.

    The field is ``random_field(he.shape, warp_amplitude_px, seed)``.
    """
    field = random_field(he.shape, warp_amplitude_px, seed)
    return warp_with_field(he, field, n_points=n_points, seed=seed)
