"""Conditional adversarial colorizer: networks, objective, training, inference."""

from .inference import GeneratorPredictor, infer_patch, infer_wholeslide
from .losses import loss_terms
from .networks import (DiscriminatorConfig, GeneratorConfig, PatchDiscriminator, UnetGenerator,
                       build_discriminator, build_generator, score_map_size)
from .training import (Checkpoint, EarlyStopping, EpochRecord, PairedPatches, TrainConfig,
                       TrainingLog, patch_pairs, train, validation_loss)

__all__ = [
    "Checkpoint",
    "DiscriminatorConfig",
    "EarlyStopping",
    "EpochRecord",
    "GeneratorConfig",
    "GeneratorPredictor",
    "PairedPatches",
    "PatchDiscriminator",
    "TrainConfig",
    "TrainingLog",
    "UnetGenerator",
    "build_discriminator",
    "build_generator",
    "infer_patch",
    "infer_wholeslide",
    "loss_terms",
    "patch_pairs",
    "score_map_size",
    "train",
    "validation_loss",
]
