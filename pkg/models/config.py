"""
Configuration models. Every default lives here; JSON config files and
command-line flags override them in that order (see cli.py).
"""

import hashlib
import json
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from models.world import (
    OBJECT_CLASSES,
    RECEPTACLE_CLASSES,
    ChannelManifest,
    interaction_classes,
)


class WorldConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int = Field(10, ge=4)
    height: int = Field(10, ge=4)
    view_size: int = Field(7, ge=3)
    cell_px: int = Field(4, ge=3)
    object_classes: Tuple[str, ...] = OBJECT_CLASSES
    receptacle_classes: Tuple[str, ...] = RECEPTACLE_CLASSES
    confidence_noise: float = Field(0.05, ge=0.0)
    mask_noise: bool = False

    @property
    def pixels(self) -> int:
        return self.view_size * self.cell_px

    @property
    def class_names(self) -> Tuple[str, ...]:
        return tuple(self.object_classes) + tuple(self.receptacle_classes)

    @property
    def channels(self) -> ChannelManifest:
        return ChannelManifest(class_names=self.class_names)

    @property
    def observation_shape(self) -> Tuple[int, int, int]:
        return (self.channels.n_channels, self.pixels, self.pixels)

    @property
    def interaction_classes(self) -> Tuple[str, ...]:
        return interaction_classes(self.object_classes, self.receptacle_classes)


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    world: WorldConfig = WorldConfig()
    n_objects: int = Field(9, ge=1)
    n_extra_receptacles: int = Field(2, ge=0)
    interior_walls: int = Field(2, ge=0)
    floor_object_prob: float = Field(0.15, ge=0.0, le=1.0)
    train_arrangements: int = Field(40, ge=1)
    unseen_arrangements: int = Field(10, ge=1)
    generator_version: int = 1


class DatasetConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    master_seed: int = Field(0, ge=0)
    train_episodes: int = Field(200, ge=0)
    valid_seen_episodes: int = Field(50, ge=0)
    valid_unseen_episodes: int = Field(50, ge=0)
    max_trajectory_len: int = Field(60, ge=2)
    max_retries: int = Field(50, ge=1)
    generator: GeneratorConfig = GeneratorConfig()

    def episode_counts(self) -> Dict[str, int]:
        return {
            "train": self.train_episodes,
            "valid_seen": self.valid_seen_episodes,
            "valid_unseen": self.valid_unseen_episodes,
        }


class StreamInput(str, Enum):
    GOAL = "G"
    INSTRUCTIONS = "I"
    BOTH = "G+I"


class StreamInputs(BaseModel):
    model_config = ConfigDict(frozen=True)

    ipm: StreamInput = StreamInput.GOAL
    apm: StreamInput = StreamInput.INSTRUCTIONS


InputAblation = Literal["none", "no_language", "no_vision", "goal_only", "instructions_only"]


class ModelDims(BaseModel):
    model_config = ConfigDict(frozen=True)

    token_emb: int = Field(32, ge=1)
    enc_hidden: int = Field(32, ge=1)
    action_emb: int = Field(16, ge=1)
    visual_channels: int = Field(32, ge=1)
    n_filters: int = Field(8, ge=1)
    filter_kernel: int = Field(1, ge=1)
    dec_hidden: int = Field(64, ge=1)
    dropout: float = Field(0.2, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _odd_kernel(self) -> "ModelDims":
        if self.filter_kernel % 2 != 1:
            raise ValueError("filter_kernel must be odd")
        return self


class EvasionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(1e-6, ge=0.0)
    enabled: bool = True
    navigation_only: bool = True


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    factorized: bool = True
    ocl: bool = True
    dynamic_filters: bool = True
    augmentation: bool = True
    evasion: bool = True
    instance_association: bool = True
    stream_inputs: StreamInputs = StreamInputs()
    input_ablation: InputAblation = "none"
    dims: ModelDims = ModelDims()
    evasion_epsilon: float = Field(1e-6, ge=0.0)
    evasion_navigation_only: bool = True
    seed: int = Field(0, ge=0)

    def evasion_config(self) -> EvasionConfig:
        return EvasionConfig(
            epsilon=self.evasion_epsilon,
            enabled=self.evasion,
            navigation_only=self.evasion_navigation_only,
        )

    def training_key(self) -> str:
        """Hash of the fields that change trained weights.

        Inference-only switches (evasion, instance association, input
        ablations) are excluded so variants that differ only in those share
        one checkpoint.
        """
        payload = self.model_dump(
            mode="json",
            exclude={"evasion", "instance_association", "input_ablation",
                     "evasion_epsilon", "evasion_navigation_only"},
        )
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    action_loss_weight: float = Field(1.0, ge=0.0)
    class_loss_weight: float = Field(1.0, ge=0.0)
    mask_loss_weight: float = Field(1.0, ge=0.0)
    perturbation_bound: float = Field(0.1, ge=0.0, le=1.0)


class RolloutLimits(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_steps: int = Field(100, ge=1)
    max_api_fails: int = Field(10, ge=1)
    subgoal_max_steps: int = Field(30, ge=1)


class RunConfig(BaseModel):
    """Fully resolved configuration of one CLI invocation; dumped as config.json."""

    command: str
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    master_seed: int = 0
    splits: List[str] = ["valid_seen", "valid_unseen"]
    rows: List[str] = []
    seeds: List[int] = [0, 1, 2]
    jobs: int = Field(1, ge=1)
    limit: Optional[int] = Field(None, ge=1)
    table: bool = False
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    limits: RolloutLimits = RolloutLimits()
    extra: Dict[str, Any] = {}
