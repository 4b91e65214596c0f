"""Adversarial training loop with best-epoch checkpointing and early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..core import (MultiChannelImage, RGBImage, TrainingDivergedError, config_digest)
from ..tiling import PatchGrid
from .losses import discriminator_loss, generator_loss, l1_term
from .networks import (DiscriminatorConfig, GeneratorConfig, UnetGenerator,
                       build_discriminator, build_generator)

log = logging.getLogger(__name__)

MAX_EPOCHS = 500


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = MAX_EPOCHS
    early_stop_patience: int = 20
    lambda_l1: float = 100.0
    batch_size: int = 1
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    flip_h: bool = True
    flip_v: bool = True
    steps_per_epoch: int = 0  # 0: one pass over the training patches

    def __post_init__(self):
        if not 1 <= self.max_epochs <= MAX_EPOCHS:
            raise ValueError(f"max_epochs must be in [1, {MAX_EPOCHS}]")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        if self.batch_size < 1 or self.steps_per_epoch < 0:
            raise ValueError("batch_size must be >= 1 and steps_per_epoch >= 0")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairedPatches:
    """Channel-first float32 arrays: inputs (N, 3, P, P), targets (N, 3, P, P)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float32)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have the same number of patches")
        if self.inputs.ndim != 4 or self.inputs.shape[1] != 3 or self.targets.shape[1] != 3:
            raise ValueError("patches must be (N, 3, P, P)")
        if self.inputs.shape[2:] != self.targets.shape[2:]:
            raise ValueError("input and target patches must be pixel-aligned")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def concat(cls, parts: Sequence["PairedPatches"]) -> "PairedPatches":
        return cls(np.concatenate([p.inputs for p in parts]), np.concatenate([p.targets for p in parts]))


def patch_pairs(inputs: MultiChannelImage, label: RGBImage, grid: PatchGrid,
                indices: Sequence[int] | None = None) -> PairedPatches:
    """Cut aligned (input, label) patches at the given grid origins."""
    if inputs.shape != label.shape or tuple(grid.image_shape) != inputs.shape:
        raise ValueError("input, label and grid shapes must agree")
    x = inputs.to_array()
    y = label.pixels
    p = grid.patch
    idx = range(len(grid)) if indices is None else indices
    xs = [x[r:r + p, c:c + p].transpose(2, 0, 1) for r, c in (grid.origins[i] for i in idx)]
    ys = [y[r:r + p, c:c + p].transpose(2, 0, 1) for r, c in (grid.origins[i] for i in idx)]
    if not xs:
        return PairedPatches(np.zeros((0, 3, p, p)), np.zeros((0, 3, p, p)))
    return PairedPatches(np.stack(xs), np.stack(ys))


@dataclass
class EpochRecord:
    epoch: int
    g_loss: float
    d_loss: float
    val_loss: float
    val_l1: float
    wall_time_s: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "g_loss", "d_loss", "val_loss", "val_l1", "wall_time_s"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.g_loss), repr(r.d_loss), repr(r.val_loss),
                                 repr(r.val_l1), f"{r.wall_time_s:.3f}"])

    @classmethod
    def read(cls, path: str | Path) -> "TrainingLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        recs = [EpochRecord(int(r["epoch"]), float(r["g_loss"]), float(r["d_loss"]),
                            float(r["val_loss"]), float(r["val_l1"]), float(r["wall_time_s"]))
                for r in rows]
        out = cls(recs)
        if recs:
            out.best_epoch = min(recs, key=lambda r: r.val_loss).epoch
        return out


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a new best value."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> tuple[bool, bool]:
        """Returns ``(improved, should_stop)``."""
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


@dataclass
class Checkpoint:
    generator_state: dict
    generator_config: GeneratorConfig
    epoch: int
    best_val_loss: float
    config_digests: dict[str, str] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def build_generator(self) -> UnetGenerator:
        net = UnetGenerator(self.generator_config)
        net.load_state_dict(self.generator_state)
        net.eval()
        return net

    def save(self, path: str | Path) -> None:
        torch.save({
            "generator_state": self.generator_state,
            "generator_config": self.generator_config.to_dict(),
            "epoch": self.epoch,
            "best_val_loss": self.best_val_loss,
            "config_digests": self.config_digests,
            "metadata": self.metadata,
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        data = torch.load(path, map_location="cpu", weights_only=True)
        return cls(data["generator_state"], GeneratorConfig(**data["generator_config"]),
                   int(data["epoch"]), float(data["best_val_loss"]),
                   dict(data.get("config_digests", {})), dict(data.get("metadata", {})))


def _augment(x: torch.Tensor, y: torch.Tensor, rng: np.random.Generator, cfg: TrainConfig):
    if cfg.flip_h and rng.random() < 0.5:
        x, y = x.flip(-1), y.flip(-1)
    if cfg.flip_v and rng.random() < 0.5:
        x, y = x.flip(-2), y.flip(-2)
    return x, y


def _check_finite(epoch: int, step: int, **losses: torch.Tensor) -> None:
    for name, value in losses.items():
        if not torch.isfinite(value):
            raise TrainingDivergedError(
                f"{name} became non-finite ({value.item()}) at epoch {epoch}, step {step}")


@torch.no_grad()
def validation_loss(gen, disc, data: PairedPatches, lambda_l1: float,
                    batch_size: int = 4) -> tuple[float, float]:
    """Mean generator objective and mean L1 over a validation set (inference mode)."""
    was_training = (gen.training, disc.training)
    gen.eval()
    disc.eval()
    total = l1_total = 0.0
    for start in range(0, len(data), batch_size):
        x = torch.from_numpy(data.inputs[start:start + batch_size])
        y = torch.from_numpy(data.targets[start:start + batch_size])
        fake = gen(x)
        n = x.shape[0]
        total += float(generator_loss(fake, y, disc(x, fake), lambda_l1)) * n
        l1_total += float(l1_term(fake, y)) * n
    gen.train(was_training[0])
    disc.train(was_training[1])
    return total / len(data), l1_total / len(data)


def train(train_set: PairedPatches, val_set: PairedPatches, cfg: TrainConfig = TrainConfig(),
          gen_cfg: GeneratorConfig | None = None, disc_cfg: DiscriminatorConfig = DiscriminatorConfig(),
          metadata: dict | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[Checkpoint, TrainingLog]:
    """Alternate discriminator and generator updates; keep the best validation epoch.

    Training ends at ``cfg.max_epochs`` or after ``cfg.early_stop_patience``
    epochs without improvement of the validation generator loss.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    patch = train_set.inputs.shape[-1]
    gen_cfg = gen_cfg or GeneratorConfig(input_size=patch)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = build_generator(gen_cfg, seed=cfg.seed)
    disc = build_discriminator(disc_cfg, seed=cfg.seed)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(cfg.beta1, cfg.beta2))
    gen.train()
    disc.train()

    stopper = EarlyStopping(cfg.early_stop_patience)
    history = TrainingLog()
    best_state = {k: v.detach().clone() for k, v in gen.state_dict().items()}
    n = len(train_set)
    steps = cfg.steps_per_epoch or -(-n // cfg.batch_size)
    t0 = time.perf_counter()
    order = np.empty(0, dtype=np.int64)

    for epoch in range(1, cfg.max_epochs + 1):
        g_sum = d_sum = 0.0
        for step in range(steps):
            if len(order) < cfg.batch_size:
                order = np.concatenate([order, rng.permutation(n)])
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            x = torch.from_numpy(train_set.inputs[idx])
            y = torch.from_numpy(train_set.targets[idx])
            x, y = _augment(x, y, rng, cfg)

            fake = gen(x)
            opt_d.zero_grad(set_to_none=True)
            d_loss = discriminator_loss(disc(x, y), disc(x, fake.detach()))
            _check_finite(epoch, step, d_loss=d_loss)
            d_loss.backward()
            opt_d.step()

            opt_g.zero_grad(set_to_none=True)
            g_loss = generator_loss(fake, y, disc(x, fake), cfg.lambda_l1)
            _check_finite(epoch, step, g_loss=g_loss)
            g_loss.backward()
            opt_g.step()
            g_sum += g_loss.item()
            d_sum += d_loss.item()

        val, val_l1 = validation_loss(gen, disc, val_set, cfg.lambda_l1, cfg.batch_size)
        if not math.isfinite(val):
            raise TrainingDivergedError(f"validation loss became non-finite at epoch {epoch}")
        rec = EpochRecord(epoch, g_sum / steps, d_sum / steps, val, val_l1, time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d g=%.4f d=%.4f val=%.4f val_l1=%.4f", epoch, rec.g_loss, rec.d_loss, val, val_l1)
        if on_epoch is not None:
            on_epoch(rec)
        improved, stop = stopper.step(val)
        if improved:
            history.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in gen.state_dict().items()}
        if stop:
            history.stopped_early = True
            break

    digests = {"train": config_digest(cfg.to_dict()),
               "generator": config_digest(gen_cfg.to_dict()),
               "discriminator": config_digest(disc_cfg.to_dict())}
    ckpt = Checkpoint(best_state, gen_cfg, history.best_epoch, stopper.best, digests, dict(metadata or {}))
    return ckpt, history
