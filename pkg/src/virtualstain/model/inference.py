"""Patch and whole-slide inference with deterministic stitching."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np
import torch

from ..core import MultiChannelImage, RGBImage
from ..tiling import plan_patches, stitch
from .training import Checkpoint

Predictor = Callable[[np.ndarray], np.ndarray]


class GeneratorPredictor:
    """Batch predictor (B, 3, P, P) -> (B, 3, P, P) around a generator in inference mode."""

    def __init__(self, source):
        self.net = source.build_generator() if isinstance(source, Checkpoint) else source
        self.net.eval()

    @property
    def patch_size(self) -> int:
        return self.net.cfg.input_size

    @torch.inference_mode()
    def __call__(self, batch: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
        return self.net(x).clamp_(0.0, 1.0).numpy().astype(np.float64)


def as_predictor(model) -> Predictor:
    if isinstance(model, (Checkpoint, torch.nn.Module)):
        return GeneratorPredictor(model)
    if callable(model):
        return model
    raise TypeError(f"cannot predict with {type(model).__name__}")


def infer_patch(model, x: np.ndarray) -> np.ndarray:
    """Virtual stain of one (3, P, P) input patch, returned as (P, P, 3) in [0, 1]."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != 3 or x.shape[1] != x.shape[2]:
        raise ValueError(f"expected a (3, P, P) patch, got {x.shape}")
    predictor = as_predictor(model)
    out = predictor(x[None])[0]
    return np.clip(out.transpose(1, 2, 0), 0.0, 1.0)


def infer_wholeslide(model, image: MultiChannelImage, stride: int = 128, patch: int | None = None,
                     batch_size: int = 8, workers: int = 1,
                     batch_order: Sequence[int] | None = None) -> RGBImage:
    """Tile, predict and Hann-blend a whole image back to its original shape.

    Batches always hold the same consecutive grid origins; ``batch_order``
    (a permutation of batch indices) and ``workers`` only change the order in
    which batches are computed, never the stitched result.
    """
    predictor = as_predictor(model)
    if patch is None:
        patch = getattr(predictor, "patch_size", 256)
    grid = plan_patches(image.shape, patch, stride)
    arr = image.to_array().transpose(2, 0, 1).astype(np.float32)
    batches = [list(range(s, min(s + batch_size, len(grid)))) for s in range(0, len(grid), batch_size)]
    order = list(range(len(batches))) if batch_order is None else list(batch_order)
    if sorted(order) != list(range(len(batches))):
        raise ValueError("batch_order must be a permutation of batch indices")

    def run(b: int) -> tuple[int, np.ndarray]:
        idx = batches[b]
        x = np.stack([arr[:, r:r + patch, c:c + patch] for r, c in (grid.origins[i] for i in idx)])
        return b, predictor(x)

    results: dict[int, np.ndarray] = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for b, y in pool.map(run, order):
                for j, i in enumerate(batches[b]):
                    results[i] = y[j].transpose(1, 2, 0)
    else:
        for b in order:
            _, y = run(b)
            for j, i in enumerate(batches[b]):
                results[i] = y[j].transpose(1, 2, 0)
    out = stitch(results, grid, blend="hann")
    return RGBImage(np.clip(out, 0.0, 1.0), image.pitch_nm)
