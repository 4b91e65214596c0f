"""Shared image types, raster I/O and run-manifest persistence."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Union

import numpy as np
import tifffile
from PIL import Image, PngImagePlugin

DEFAULT_PITCH_NM = 250.0
CHANNEL_NAMES = ("non_radiative", "radiative", "scattering")

_TIFF_SUFFIXES = {".tif", ".tiff"}
_PNG_SUFFIXES = {".png"}


class VirtualStainError(Exception):
    """Base class for pipeline errors."""


class RegistrationGateError(VirtualStainError):
    """Registration residuals exceed the configured quality gate."""

    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report


class TrainingDivergedError(VirtualStainError):
    """A training loss became non-finite."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def _check_unit_range(arr: np.ndarray, what: str) -> None:
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{what} values must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class ChannelImage:
    """One unit-range grayscale channel with its pixel pitch."""

    pixels: np.ndarray
    pitch_nm: float = DEFAULT_PITCH_NM

    def __post_init__(self):
        px = _frozen(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"channel must be a non-empty 2-D grid, got shape {px.shape}")
        _check_unit_range(px, "channel")
        if not self.pitch_nm > 0:
            raise ValueError("pitch_nm must be positive")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "pitch_nm", float(self.pitch_nm))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, ChannelImage):
            return NotImplemented
        return self.pitch_nm == other.pitch_nm and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class MultiChannelImage:
    """Three intrinsically registered channels in the fixed model-input order."""

    non_radiative: ChannelImage
    radiative: ChannelImage
    scattering: ChannelImage

    def __post_init__(self):
        ref = self.non_radiative
        for ch in (self.radiative, self.scattering):
            if ch.shape != ref.shape or ch.pitch_nm != ref.pitch_nm:
                raise ValueError("all channels must share shape and pitch")

    @property
    def shape(self) -> tuple[int, int]:
        return self.non_radiative.shape

    @property
    def pitch_nm(self) -> float:
        return self.non_radiative.pitch_nm

    @property
    def channels(self) -> tuple[ChannelImage, ChannelImage, ChannelImage]:
        return (self.non_radiative, self.radiative, self.scattering)

    def to_array(self) -> np.ndarray:
        """Return an (H, W, 3) array in channel order (nr, rad, sc)."""
        return np.stack([c.pixels for c in self.channels], axis=-1)

    @classmethod
    def from_array(cls, arr: np.ndarray, pitch_nm: float = DEFAULT_PITCH_NM) -> "MultiChannelImage":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise ValueError(f"expected (H, W, 3) array, got {arr.shape}")
        return cls(*(ChannelImage(arr[..., i], pitch_nm) for i in range(3)))

    def __eq__(self, other):
        if not isinstance(other, MultiChannelImage):
            return NotImplemented
        return all(a == b for a, b in zip(self.channels, other.channels))


@dataclass(frozen=True, eq=False)
class RGBImage:
    """Unit-range color image; pitch is optional (brightfield scans may lack it)."""

    pixels: np.ndarray
    pitch_nm: float | None = None

    def __post_init__(self):
        px = _frozen(self.pixels)
        if px.ndim != 3 or px.shape[-1] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"RGB image must be (H, W, 3), got shape {px.shape}")
        _check_unit_range(px, "RGB")
        if self.pitch_nm is not None and not self.pitch_nm > 0:
            raise ValueError("pitch_nm must be positive")
        object.__setattr__(self, "pixels", px)
        if self.pitch_nm is not None:
            object.__setattr__(self, "pitch_nm", float(self.pitch_nm))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def __eq__(self, other):
        if not isinstance(other, RGBImage):
            return NotImplemented
        return self.pitch_nm == other.pitch_nm and np.array_equal(self.pixels, other.pixels)


AnyImage = Union[ChannelImage, RGBImage]


# --------------------------------------------------------------------------- #
# Raster I/O
# --------------------------------------------------------------------------- #

def quantize(values: np.ndarray, bit_depth: int) -> np.ndarray:
    """Map unit-range values to integers with round-half-up."""
    if bit_depth not in (8, 16):
        raise ValueError(f"unsupported bit depth {bit_depth}")
    full = (1 << bit_depth) - 1
    q = np.floor(np.asarray(values, dtype=np.float64) * full + 0.5)
    return np.clip(q, 0, full).astype(np.uint8 if bit_depth == 8 else np.uint16)


def save_image(image: AnyImage, path: str | Path, bit_depth: int | None = None) -> None:
    """Write a lossless PNG or TIFF.

    Channels default to 16 bits, RGB images are always 8 bits per channel.
    The pixel pitch, when known, is stored as a PNG text chunk or TIFF
    description so that it survives a round trip.
    """
    path = Path(path)
    if isinstance(image, RGBImage):
        if bit_depth not in (None, 8):
            raise ValueError("RGB images are stored at 8 bits")
        data = quantize(image.pixels, 8)
    elif isinstance(image, ChannelImage):
        data = quantize(image.pixels, bit_depth or 16)
    else:
        raise TypeError(f"cannot save {type(image).__name__}")

    suffix = path.suffix.lower()
    try:
        if suffix in _PNG_SUFFIXES:
            info = PngImagePlugin.PngInfo()
            if image.pitch_nm is not None:
                info.add_text("pitch_nm", repr(image.pitch_nm))
            Image.fromarray(data).save(path, pnginfo=info)
        elif suffix in _TIFF_SUFFIXES:
            meta = {} if image.pitch_nm is None else {"pitch_nm": image.pitch_nm}
            tifffile.imwrite(path, data, description=json.dumps(meta),
                             photometric="rgb" if data.ndim == 3 else "minisblack",
                             metadata=None)
        else:
            raise ValueError(f"unsupported raster format {suffix!r} (use .png or .tif)")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _read_raster(path: Path) -> tuple[np.ndarray, float | None]:
    suffix = path.suffix.lower()
    if suffix in _PNG_SUFFIXES:
        with Image.open(path) as im:
            mode = im.mode
            pitch = im.text.get("pitch_nm") if hasattr(im, "text") else None
            if mode in ("I;16", "I;16B", "I;16L"):
                data = np.asarray(im).astype(np.uint16)
            elif mode in ("L", "RGB"):
                data = np.asarray(im)
            elif mode == "I":
                data = np.asarray(im)
                if data.min() < 0 or data.max() > 65535:
                    raise ValueError(f"{path}: unsupported bit depth (32-bit integer)")
                data = data.astype(np.uint16)
            elif mode in ("RGBA", "LA", "P", "CMYK"):
                data = np.asarray(im)
            else:
                raise ValueError(f"{path}: unsupported image mode {mode}")
        return data, (float(pitch) if pitch is not None else None)
    if suffix in _TIFF_SUFFIXES:
        with tifffile.TiffFile(path) as tf:
            page = tf.pages[0]
            data = page.asarray()
            pitch = None
            desc = page.description
            if desc:
                try:
                    pitch = json.loads(desc).get("pitch_nm")
                except (ValueError, AttributeError):
                    pitch = None
        return data, pitch
    raise ValueError(f"unsupported raster format {suffix!r}")


def load_image(path: str | Path, kind: str, pitch_nm: float | None = None) -> AnyImage:
    """Read a raster as a unit-range :class:`ChannelImage` or :class:`RGBImage`.

    Args:
        path: PNG or TIFF file.
        kind: ``"channel"`` (8/16-bit grayscale) or ``"rgb"`` (8-bit color).
        pitch_nm: overrides the pitch stored in the file. Channels without
            any pitch information fall back to 250 nm.
    """
    path = Path(path)
    if kind not in ("channel", "rgb"):
        raise ValueError(f"kind must be 'channel' or 'rgb', got {kind!r}")
    if not path.is_file():
        raise FileNotFoundError(path)
    data, stored_pitch = _read_raster(path)
    pitch = pitch_nm if pitch_nm is not None else stored_pitch

    if data.dtype == np.uint8:
        scale = 255.0
    elif data.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValueError(f"{path}: unsupported bit depth ({data.dtype})")

    if kind == "channel":
        if data.ndim != 2:
            raise ValueError(f"{path}: expected 1 channel, found {data.shape[-1]}")
        return ChannelImage(data / scale, pitch if pitch is not None else DEFAULT_PITCH_NM)
    if data.ndim != 3 or data.shape[-1] != 3:
        found = 1 if data.ndim == 2 else data.shape[-1]
        raise ValueError(f"{path}: expected 3 color channels, found {found}")
    if data.dtype != np.uint8:
        raise ValueError(f"{path}: RGB images must be 8-bit")
    return RGBImage(data / scale, pitch)


# --------------------------------------------------------------------------- #
# Digests and manifest
# --------------------------------------------------------------------------- #

def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (tuple, np.ndarray)):
        return list(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def config_digest(config: Any) -> str:
    """SHA-256 of the canonical JSON text of a configuration mapping."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_digest(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Reproducibility record written next to every command's outputs."""

    seed: int
    config_digest: str
    tool_version: str = ""
    timestamps: dict[str, str] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    parameters: dict[str, Any] = field(default_factory=dict)
    reports: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.tool_version:
            from . import __version__
            self.tool_version = __version__

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunManifest":
        required = {"seed", "config_digest"}
        if not isinstance(data, dict) or not required <= data.keys():
            raise ValueError("manifest must contain 'seed' and 'config_digest'")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**data)


def write_manifest(manifest: RunManifest, path: str | Path) -> None:
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True, default=_json_default)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> RunManifest:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed manifest {path}: {exc}") from exc
    return RunManifest.from_dict(data)
