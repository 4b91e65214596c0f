"""Control-point registration of H&E images onto TA-PARS reference frames.

The TA-PARS non-radiative channel is the fixed reference; the H&E image is
the moving image. Transforms map *reference* pixel coordinates (x=column,
y=row) to *moving* pixel coordinates, and images are resampled by inverse
mapping.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .core import ChannelImage, RGBImage, RegistrationGateError
from .sampling import bilinear_sample, resize_bilinear

MIN_CONTROL_POINTS = 12
DEFAULT_NEIGHBORS = 12
DEFAULT_GATE_PX = 2.0
WHITE = (1.0, 1.0, 1.0)

_CSV_HEADER = ["x_ref", "y_ref", "x_mov", "y_mov"]


@dataclass(frozen=True, eq=False)
class ControlPointSet:
    """Paired landmarks; ``ref[i]`` corresponds to ``mov[i]`` (pixel units)."""

    ref: np.ndarray
    mov: np.ndarray

    def __post_init__(self):
        ref = np.array(self.ref, dtype=np.float64).reshape(-1, 2)
        mov = np.array(self.mov, dtype=np.float64).reshape(-1, 2)
        if ref.shape != mov.shape:
            raise ValueError("ref and mov must hold the same number of points")
        if not (np.all(np.isfinite(ref)) and np.all(np.isfinite(mov))):
            raise ValueError("control points must be finite")
        if len(ref) > 1 and len(np.unique(ref, axis=0)) != len(ref):
            raise ValueError("reference control points must not coincide")
        ref.setflags(write=False)
        mov.setflags(write=False)
        object.__setattr__(self, "ref", ref)
        object.__setattr__(self, "mov", mov)

    @classmethod
    def from_pairs(cls, pairs) -> "ControlPointSet":
        pairs = list(pairs)
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    @property
    def pairs(self) -> list[tuple[tuple[float, float], tuple[float, float]]]:
        return [(tuple(r), tuple(m)) for r, m in zip(self.ref.tolist(), self.mov.tolist())]

    def __len__(self) -> int:
        return len(self.ref)

    def subset(self, index) -> "ControlPointSet":
        return ControlPointSet(self.ref[index], self.mov[index])

    def scale_moving(self, scale: float) -> "ControlPointSet":
        """Express moving coordinates after the moving image was resized by ``scale``."""
        return ControlPointSet(self.ref, (self.mov + 0.5) * scale - 0.5)


def write_control_points(points: ControlPointSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for (xr, yr), (xm, ym) in zip(points.ref.tolist(), points.mov.tolist()):
            writer.writerow([repr(xr), repr(yr), repr(xm), repr(ym)])


def read_control_points(path: str | Path) -> ControlPointSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != _CSV_HEADER:
        raise ValueError(f"{path}: expected header {','.join(_CSV_HEADER)}")
    try:
        values = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed control point row ({exc})") from exc
    values = values.reshape(-1, 4)
    return ControlPointSet(values[:, :2], values[:, 2:])


# --------------------------------------------------------------------------- #
# FOV matching
# --------------------------------------------------------------------------- #

def match_fov(reference: ChannelImage, moving: RGBImage) -> RGBImage:
    """Resample ``moving`` so that it shares the reference pixel pitch."""
    if reference.pitch_nm is None or moving.pitch_nm is None:
        raise ValueError("both images need pixel pitch metadata for FOV matching")
    scale = moving.pitch_nm / reference.pitch_nm
    if scale == 1.0:
        return RGBImage(moving.pixels, reference.pitch_nm)
    h, w = moving.shape
    out_shape = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
    resized = np.clip(resize_bilinear(moving.pixels, out_shape), 0.0, 1.0)
    return RGBImage(resized, reference.pitch_nm)


# --------------------------------------------------------------------------- #
# Local weighted mean transform
# --------------------------------------------------------------------------- #

def _design(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.stack([u, v, u * u, u * v, v * v], axis=-1)


def _compact_weight(r: np.ndarray) -> np.ndarray:
    # 1 - 3r^2 + 2r^3 on [0, 1), zero outside
    return np.where(r < 1.0, 1.0 - 3.0 * r**2 + 2.0 * r**3, 0.0)


@dataclass(frozen=True, eq=False)
class NonRigidTransform:
    """Local weighted mean of per-point quadratic models.

    Each control point carries a quadratic (or, for degenerate neighborhoods,
    linear) model fitted to its ``k`` nearest control points and constrained
    to pass through its own pair. Models are blended with compactly supported
    radial weights that diverge at their own control point, so the transform
    interpolates the control points and reproduces any global polynomial of
    degree <= 2.
    """

    ref: np.ndarray
    mov: np.ndarray
    radii: np.ndarray
    coeffs: np.ndarray  # (n, 5, 2) over [u, v, u^2, uv, v^2]
    degrees: np.ndarray
    k: int
    fit_warnings: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.ref)

    def __call__(self, xy, chunk: int = 8192) -> np.ndarray:
        q_all = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        out = np.empty_like(q_all)
        for start in range(0, len(q_all), chunk):
            out[start:start + chunk] = self._eval_chunk(q_all[start:start + chunk])
        return out.reshape(np.shape(xy))

    def _eval_chunk(self, q: np.ndarray) -> np.ndarray:
        diff = q[:, None, :] - self.ref[None, :, :]
        dist = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff))
        r = dist / self.radii[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            w = _compact_weight(r) / dist**2
        exact = dist == 0.0
        w[exact] = 0.0
        wsum = w.sum(axis=1)

        # u, v, quadratic basis per (query, control point)
        uv = diff / self.radii[None, :, None]
        basis = _design(uv[..., 0], uv[..., 1])
        local = self.mov[None, :, :] + np.einsum("mnj,njd->mnd", basis, self.coeffs)
        out = np.empty((len(q), 2))
        covered = wsum > 0
        with np.errstate(invalid="ignore"):
            out[covered] = np.einsum("mn,mnd->md", w[covered], local[covered]) / wsum[covered, None]
        if (~covered).any():
            nearest = np.argmin(dist[~covered], axis=1)
            out[~covered] = local[np.flatnonzero(~covered), nearest]
        hit_rows, hit_cols = np.nonzero(exact)
        out[hit_rows] = self.mov[hit_cols]
        return out

    def extrapolated(self, xy) -> np.ndarray:
        """True where a query lies outside the control-point convex hull."""
        q = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        try:
            hull = Delaunay(self.ref)
        except Exception:  # degenerate hulls are rejected at fit time
            return np.ones(len(q), dtype=bool)
        return hull.find_simplex(q) < 0


def fit_nonrigid(points: ControlPointSet, k: int = DEFAULT_NEIGHBORS,
                 min_points: int = MIN_CONTROL_POINTS) -> NonRigidTransform:
    """Fit a local-weighted-mean transform mapping reference to moving points."""
    n = len(points)
    if n < min_points:
        raise ValueError(f"need at least {min_points} control points, got {n}")
    ref, mov = points.ref, points.mov
    centered = ref - ref.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[-1] <= 1e-9 * max(sv[0], 1.0):
        raise ValueError("reference control points are collinear")

    k = min(k, n)
    tree = cKDTree(ref)
    dists, nbrs = tree.query(ref, k=k)
    radii = dists[:, -1].copy()
    coeffs = np.zeros((n, 5, 2))
    degrees = np.full(n, 2, dtype=np.int64)
    notes: list[str] = []

    for i in range(n):
        others = nbrs[i, 1:]
        rad = radii[i]
        uv = (ref[others] - ref[i]) / rad
        target = mov[others] - mov[i]
        design = _design(uv[:, 0], uv[:, 1])
        for degree, ncols in ((2, 5), (1, 2)):
            a = design[:, :ncols]
            s = np.linalg.svd(a, compute_uv=False)
            if len(s) == ncols and s[-1] > 1e-8 * s[0]:
                sol, *_ = np.linalg.lstsq(a, target, rcond=None)
                coeffs[i, :ncols] = sol
                degrees[i] = degree
                break
        else:
            degrees[i] = 0
        if degrees[i] < 2:
            msg = f"control point {i}: singular quadratic fit, using degree {degrees[i]}"
            notes.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)

    for arr in (radii, coeffs, degrees):
        arr.setflags(write=False)
    return NonRigidTransform(ref, mov, radii, coeffs, degrees, k, tuple(notes))


def apply_transform(t: NonRigidTransform, moving: RGBImage, out_shape: tuple[int, int],
                    fill=WHITE) -> RGBImage:
    """Resample ``moving`` into the reference frame by inverse mapping."""
    h, w = out_shape
    yy, xx = np.mgrid[0:h, 0:w]
    q = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    src = t(q)
    sampled = bilinear_sample(moving.pixels, src[:, 0], src[:, 1], fill=np.asarray(fill, float))
    pixels = np.clip(sampled.reshape(h, w, 3), 0.0, 1.0)
    return RGBImage(pixels, moving.pitch_nm)


# --------------------------------------------------------------------------- #
# Quality gate
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class RegistrationReport:
    n_points: int
    mean_residual_px: float
    max_residual_px: float
    n_extrapolated: int
    gate_px: float
    passed: bool
    method: str = "holdout"

    def to_dict(self) -> dict:
        return {
            "n_points": self.n_points,
            "mean_residual_px": self.mean_residual_px,
            "max_residual_px": self.max_residual_px,
            "n_extrapolated": self.n_extrapolated,
            "gate_px": self.gate_px,
            "passed": self.passed,
            "method": self.method,
        }


def registration_report(t: NonRigidTransform, holdout: ControlPointSet,
                        gate_px: float = DEFAULT_GATE_PX) -> RegistrationReport:
    """Residuals of ``t`` on held-out correspondences."""
    if len(holdout) == 0:
        raise ValueError("holdout set is empty")
    pred = t(holdout.ref)
    res = np.linalg.norm(pred - holdout.mov, axis=1)
    mean = float(res.mean())
    return RegistrationReport(
        n_points=len(holdout),
        mean_residual_px=mean,
        max_residual_px=float(res.max()),
        n_extrapolated=int(t.extrapolated(holdout.ref).sum()),
        gate_px=gate_px,
        passed=mean <= gate_px,
    )


def leave_one_out_report(points: ControlPointSet, k: int = DEFAULT_NEIGHBORS,
                         gate_px: float = DEFAULT_GATE_PX) -> RegistrationReport:
    """Gate statistics when no separate holdout file exists."""
    n = len(points)
    if n < MIN_CONTROL_POINTS + 1:
        raise ValueError(f"leave-one-out needs at least {MIN_CONTROL_POINTS + 1} points")
    res = np.empty(n)
    extrap = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in range(n):
            keep = np.arange(n) != i
            t = fit_nonrigid(points.subset(keep), k=k)
            res[i] = np.linalg.norm(t(points.ref[i:i + 1])[0] - points.mov[i])
            extrap += int(t.extrapolated(points.ref[i:i + 1])[0])
    mean = float(res.mean())
    return RegistrationReport(n, mean, float(res.max()), extrap, gate_px, mean <= gate_px,
                              method="leave-one-out")


def check_gate(report: RegistrationReport) -> None:
    if not report.passed:
        raise RegistrationGateError(
            f"mean registration residual {report.mean_residual_px:.3f} px exceeds "
            f"gate {report.gate_px:.3f} px", report)
