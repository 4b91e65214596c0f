"""Pipeline configuration: one section per stage, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .core import DEFAULT_PITCH_NM, config_digest
from .model.networks import DiscriminatorConfig, GeneratorConfig
from .model.training import TrainConfig
from .phantom import PhantomSpec
from .preprocess import PreprocessConfig
from .registration import DEFAULT_GATE_PX, DEFAULT_NEIGHBORS, MIN_CONTROL_POINTS


@dataclass(frozen=True)
class AcquisitionConfig:
    """How the phantom command simulates scanning and the brightfield H&E capture."""

    jitter_nm: float = 0.0
    he_pitch_nm: float = DEFAULT_PITCH_NM
    warp_amplitude_px: float = 10.0
    n_control_points: int = 30

    def __post_init__(self):
        if self.jitter_nm < 0 or self.warp_amplitude_px < 0:
            raise ValueError("jitter_nm and warp_amplitude_px must be non-negative")
        if self.he_pitch_nm <= 0:
            raise ValueError("he_pitch_nm must be positive")
        if self.n_control_points < MIN_CONTROL_POINTS:
            raise ValueError(f"n_control_points must be >= {MIN_CONTROL_POINTS}")


@dataclass(frozen=True)
class RegistrationConfig:
    neighbors: int = DEFAULT_NEIGHBORS
    gate_px: float = DEFAULT_GATE_PX

    def __post_init__(self):
        if self.neighbors < 6 or self.gate_px <= 0:
            raise ValueError("neighbors must be >= 6 and gate_px positive")


@dataclass(frozen=True)
class TilingConfig:
    patch: int = 256
    stride: int = 128
    block_px: int = 512
    train_ratio: float = 0.7
    val_ratio: float = 0.3

    def __post_init__(self):
        if not 1 <= self.stride <= self.patch:
            raise ValueError("stride must satisfy 1 <= stride <= patch")
        if self.block_px < self.patch:
            raise ValueError("block_px must be at least the patch size")


@dataclass(frozen=True)
class EvalConfig:
    n_patches: int = 1000
    patch_px: int = 256
    infer_stride: int = 128
    infer_batch_size: int = 8

    def __post_init__(self):
        if self.n_patches < 1 or self.patch_px < 11 or self.infer_stride < 1 or self.infer_batch_size < 1:
            raise ValueError("invalid evaluation settings")


SECTIONS: dict[str, type] = {
    "phantom": PhantomSpec,
    "acquisition": AcquisitionConfig,
    "registration": RegistrationConfig,
    "preprocess": PreprocessConfig,
    "tiling": TilingConfig,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        # one global seed drives every randomized stage
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))
        if self.generator.input_size != self.tiling.patch:
            object.__setattr__(self, "generator",
                               dataclasses.replace(self.generator, input_size=self.tiling.patch))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    def digest(self) -> str:
        return config_digest(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "PipelineConfig":
        data = dict(data or {})
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        for name, section_cls in SECTIONS.items():
            values = data.get(name) or {}
            if not isinstance(values, dict):
                raise ValueError(f"section {name!r} must be a mapping")
            known = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(values) - known
            if bad:
                raise ValueError(f"unknown keys in section {name!r}: {sorted(bad)}")
            values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
            kwargs[name] = section_cls(**values)
        return cls(**kwargs)

    def with_overrides(self, overrides: dict[str, dict[str, Any]], seed: int | None = None) -> "PipelineConfig":
        data = self.to_dict()
        for section, values in overrides.items():
            data[section].update(values)
        if seed is not None:
            data["seed"] = seed
        return PipelineConfig.from_dict(data)


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a YAML (or JSON) config file; None gives the defaults."""
    if path is None:
        return PipelineConfig()
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValueError(f"malformed config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ValueError(f"config {path} must be a mapping")
    return PipelineConfig.from_dict(data)


def dump_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
