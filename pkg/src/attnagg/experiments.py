"""Canonical experiment configurations.

Two profiles:

* the desk profile: 32x32 images, 6 attributes with priors spanning
  balanced (0.5) to strongly imbalanced (0.035, a 1:28 ratio), a 32/64
  channel backbone, 5000 samples. A single full training run at this size
  finishes in minutes on one core.
* the matrix profile: a slimmed copy (fewer samples, narrower model, fewer
  epochs) sized so the whole 5-row component matrix times several seeds
  completes well under the harness time budget. The dataset structure
  (image size, attribute count, priors, cues, noise) is unchanged.
"""

from __future__ import annotations

from attnagg.data import DatasetSpec, default_cues
from attnagg.model import BackboneConfig, ConvSpec, ModelConfig
from attnagg.train import TrainConfig

DESK_PRIORS = (0.5, 0.3, 0.25, 0.1, 0.06, 0.035)


def default_dataset_spec(num_samples: int = 5000, seed: int = 7,
                         noise_std: float = 0.25,
                         cue_strength: float = 0.5) -> DatasetSpec:
    return DatasetSpec(
        num_samples=num_samples,
        image_size=(32, 32),
        num_attributes=len(DESK_PRIORS),
        priors=DESK_PRIORS,
        cues=default_cues((32, 32), len(DESK_PRIORS)),
        noise_std=noise_std,
        cue_strength=cue_strength,
        seed=seed,
    ).validate()


def desk_model_config() -> ModelConfig:
    return ModelConfig().validate()


def desk_train_config() -> TrainConfig:
    return TrainConfig().validate()


def matrix_model_config() -> ModelConfig:
    """Narrow model for the component matrix: same topology, kept fast."""
    return ModelConfig(
        backbone=BackboneConfig(
            input_size=32,
            stage1=(ConvSpec(16, 3, 2, 1), ConvSpec(16, 3, 2, 1)),
            stage2=(ConvSpec(32, 3, 1, 1), ConvSpec(32, 3, 2, 1)),
        ),
        num_attributes=len(DESK_PRIORS),
        attention_channels=32,
        classifier_channels=(32, 64, 64),
    ).validate()


def matrix_train_config() -> TrainConfig:
    return TrainConfig(
        batch_size=32,
        freeze_epochs=1,
        burn_in_epochs=2,
        max_epochs=8,
        plateau_patience=3,
    ).validate()


def matrix_dataset_spec(seed: int = 7) -> DatasetSpec:
    return default_dataset_spec(num_samples=2500, seed=seed)
