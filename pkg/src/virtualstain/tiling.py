"""Overlapping patch grids, spatially blocked splits and feathered stitching.

Arrays are channel-last: ``(H, W)`` or ``(H, W, C)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

HANN_FLOOR = 1e-3
SPLITS = ("train", "val", "test")


def axis_positions(n: int, patch: int, stride: int) -> list[int]:
    """Start offsets along one axis, with the last one snapped to ``n - patch``."""
    pos = list(range(0, n - patch + 1, stride))
    if pos[-1] != n - patch:
        pos.append(n - patch)
    return pos


@dataclass(frozen=True)
class PatchGrid:
    patch: int
    stride: int
    origins: tuple[tuple[int, int], ...]
    image_shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.origins)

    def to_dict(self) -> dict:
        return {"patch": self.patch, "stride": self.stride,
                "image_shape": list(self.image_shape),
                "origins": [list(o) for o in self.origins]}

    @classmethod
    def from_dict(cls, data: dict) -> "PatchGrid":
        return cls(int(data["patch"]), int(data["stride"]),
                   tuple((int(r), int(c)) for r, c in data["origins"]),
                   tuple(int(v) for v in data["image_shape"]))


def plan_patches(shape: tuple[int, int], patch: int = 256, stride: int = 128) -> PatchGrid:
    h, w = int(shape[0]), int(shape[1])
    if patch > h or patch > w:
        raise ValueError(f"image {h}x{w} is smaller than patch {patch}")
    if not 1 <= stride <= patch:
        raise ValueError("stride must satisfy 1 <= stride <= patch")
    rows = axis_positions(h, patch, stride)
    cols = axis_positions(w, patch, stride)
    origins = tuple((r, c) for r in rows for c in cols)
    return PatchGrid(patch, stride, origins, (h, w))


def _check_shape(image: np.ndarray, grid: PatchGrid) -> None:
    if tuple(image.shape[:2]) != tuple(grid.image_shape):
        raise ValueError(f"image shape {image.shape[:2]} does not match grid {grid.image_shape}")


def extract_patches(image: np.ndarray, grid: PatchGrid) -> list[np.ndarray]:
    """Copies of each patch in origin order."""
    image = np.asarray(image)
    _check_shape(image, grid)
    p = grid.patch
    return [image[r:r + p, c:c + p].copy() for r, c in grid.origins]


# --------------------------------------------------------------------------- #
# Train / validation split
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class SplitAssignment:
    block_px: int
    seed: int
    block_split: dict[tuple[int, int], str]  # (block_row, block_col) -> split
    patch_block: tuple[tuple[int, int], ...]  # per patch, in grid order

    @property
    def patch_split(self) -> tuple[str, ...]:
        return tuple(self.block_split[b] for b in self.patch_block)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.patch_split) if s == split]

    def to_dict(self) -> dict:
        return {
            "block_px": self.block_px,
            "seed": self.seed,
            "blocks": [[r, c, s] for (r, c), s in sorted(self.block_split.items())],
            "patch_split": list(self.patch_split),
        }

    @classmethod
    def from_dict(cls, data: dict, grid: PatchGrid) -> "SplitAssignment":
        block_split = {(int(r), int(c)): s for r, c, s in data["blocks"]}
        return cls(int(data["block_px"]), int(data["seed"]), block_split,
                   _patch_blocks(grid, int(data["block_px"])))


def _patch_blocks(grid: PatchGrid, block_px: int) -> tuple[tuple[int, int], ...]:
    half = grid.patch // 2
    return tuple(((r + half) // block_px, (c + half) // block_px) for r, c in grid.origins)


def split_dataset(grid: PatchGrid, ratios: tuple[float, float] = (0.7, 0.3),
                  block_px: int = 512, seed: int = 0) -> SplitAssignment:
    """Assign whole spatial blocks to train/val/test.

    A patch belongs to the block containing its center. Blocks are shuffled
    by ``seed`` and filled into train, then val, until each split reaches its
    target patch count; leftover blocks become test.
    """
    r_train, r_val = ratios
    if r_train <= 0 or r_val <= 0 or r_train + r_val > 1 + 1e-12:
        raise ValueError("ratios must be positive and sum to at most 1")
    if block_px < grid.patch:
        raise ValueError("block_px must be at least the patch size")
    h, w = grid.image_shape
    n_br, n_bc = -(-h // block_px), -(-w // block_px)
    blocks = [(r, c) for r in range(n_br) for c in range(n_bc)]
    patch_block = _patch_blocks(grid, block_px)
    counts = {b: 0 for b in blocks}
    for b in patch_block:
        counts[b] += 1
    occupied = sum(1 for b in blocks if counts[b] > 0)
    if occupied < 2:
        raise ValueError(f"only {occupied} occupied block(s); need at least one per split")

    rng = np.random.default_rng(seed)
    order = [blocks[i] for i in rng.permutation(len(blocks))]
    n = len(patch_block)
    target = {"train": int(round(r_train * n)), "val": int(round(r_val * n))}
    filled = {"train": 0, "val": 0}
    block_split: dict[tuple[int, int], str] = {}
    for b in order:
        for split in ("train", "val"):
            if filled[split] < target[split]:
                block_split[b] = split
                filled[split] += counts[b]
                break
        else:
            block_split[b] = "test"
    return SplitAssignment(block_px, seed, block_split, patch_block)


def write_sidecar(path: str | Path, grid: PatchGrid, split: SplitAssignment | None = None,
                  image_digest: str | None = None) -> None:
    data = {"image_digest": image_digest, "grid": grid.to_dict()}
    if split is not None:
        data["split"] = split.to_dict()
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def read_sidecar(path: str | Path) -> tuple[PatchGrid, SplitAssignment | None, str | None]:
    data = json.loads(Path(path).read_text())
    grid = PatchGrid.from_dict(data["grid"])
    split = SplitAssignment.from_dict(data["split"], grid) if "split" in data else None
    return grid, split, data.get("image_digest")


# --------------------------------------------------------------------------- #
# Stitching
# --------------------------------------------------------------------------- #

def hann_weights(patch: int, floor: float = HANN_FLOOR) -> np.ndarray:
    """Separable 2-D Hann window sampled at pixel centers, floored at ``floor``."""
    n = np.arange(patch)
    w1 = np.sin(np.pi * (n + 0.5) / patch) ** 2
    return np.maximum(np.outer(w1, w1), floor)


def blend_weights(patch: int, blend: str) -> np.ndarray:
    if blend == "hann":
        return hann_weights(patch)
    if blend == "uniform":
        return np.ones((patch, patch))
    raise ValueError(f"unknown blend {blend!r}")


def stitch(patches: Sequence[np.ndarray] | Mapping[int, np.ndarray], grid: PatchGrid,
           blend: str = "hann") -> np.ndarray:
    """Weighted average of overlapping patches.

    ``patches`` may be a sequence in grid order or a mapping from origin
    index to patch (e.g. results collected out of order). Accumulation always
    runs in grid order, so the output does not depend on production order.
    """
    n = len(grid)
    if isinstance(patches, Mapping):
        missing = [i for i in range(n) if i not in patches]
        if missing:
            raise ValueError(f"missing patches for origins {missing[:5]}")
        get = patches.__getitem__
    else:
        if len(patches) != n:
            raise ValueError(f"expected {n} patches, got {len(patches)}")
        get = patches.__getitem__

    p = grid.patch
    first = np.asarray(get(0))
    extra = first.shape[2:]
    weights = blend_weights(p, blend)
    acc = np.zeros(tuple(grid.image_shape) + extra, dtype=np.float64)
    wsum = np.zeros(grid.image_shape, dtype=np.float64)
    wexp = weights.reshape(weights.shape + (1,) * len(extra))
    for i, (r, c) in enumerate(grid.origins):
        tile = np.asarray(get(i), dtype=np.float64)
        if tile.shape[:2] != (p, p) or tile.shape[2:] != extra:
            raise ValueError(f"patch {i} has shape {tile.shape}, expected {(p, p) + extra}")
        acc[r:r + p, c:c + p] += wexp * tile
        wsum[r:r + p, c:c + p] += weights
    return acc / wsum.reshape(wsum.shape + (1,) * len(extra))
