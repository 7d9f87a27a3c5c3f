from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from models.world import ActionTag, AgentPose, Cell, GoalSpec, Layout


class SubgoalKind(str, Enum):
    GOTO = "Goto"
    PICKUP = "Pickup"
    PUT = "Put"
    OPEN = "Open"
    CLOSE = "Close"
    TOGGLE = "Toggle"
    SLICE = "Slice"


SUBGOAL_KINDS: Tuple[SubgoalKind, ...] = tuple(SubgoalKind)


class Subgoal(BaseModel):
    """One expert subgoal; steps [start, end) of the trajectory carry it out."""

    model_config = ConfigDict(frozen=True)

    kind: SubgoalKind
    target_class: str
    target_cell: Cell
    start: int = 0
    end: int = 0

    @property
    def length(self) -> int:
        return self.end - self.start


class InstructionPair(BaseModel):
    model_config = ConfigDict(frozen=True)

    goal: Tuple[str, ...]
    instructions: Tuple[Tuple[str, ...], ...]

    @property
    def goal_text(self) -> str:
        return " ".join(self.goal)

    @property
    def instruction_texts(self) -> List[str]:
        return [" ".join(sentence) for sentence in self.instructions]


@dataclass
class Trajectory:
    """An expert demonstration: the unit of imitation learning.

    ``observations[t]`` is what the agent saw before taking ``actions[t]``.
    ``classes[t]`` and ``masks[t]`` are set exactly on interaction steps.
    """

    observations: np.ndarray
    actions: List[ActionTag]
    classes: List[Optional[str]]
    masks: List[Optional[np.ndarray]]
    subgoals: List[Subgoal]
    layout: Layout
    goal: GoalSpec
    start: AgentPose
    language: Optional[InstructionPair] = None
    episode_id: str = ""
    split: str = "train"
    variant: str = "original"
    instance_ids: List[Optional[int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def layout_seed(self) -> int:
        return self.layout.seed

    @property
    def subgoal_boundaries(self) -> List[int]:
        return [sg.start for sg in self.subgoals]

    def with_observations(self, observations: np.ndarray, variant: str) -> "Trajectory":
        return replace(self, observations=observations, variant=variant)


class EpisodeRecord(BaseModel):
    """Manifest entry of one stored episode."""

    episode_id: str
    split: str
    index: int
    layout_seed: int
    arrangement_id: int
    task_type: str
    n_steps: int
    metadata_file: str
    observations_file: str
    sha256: str


class DatasetManifest(BaseModel):
    version: int = 1
    master_seed: int
    config: Dict
    channels: List[str]
    vocab_hash: str
    splits: Dict[str, List[EpisodeRecord]]

    def arrangement_ids(self, split: str) -> set:
        return {rec.arrangement_id for rec in self.splits.get(split, [])}
