from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator

from models.errors import UnknownClassError

Cell = Tuple[int, int]

OBJECT_CLASSES: Tuple[str, ...] = (
    "apple", "bread", "tomato", "potato", "lettuce", "egg",
    "mug", "cup", "book", "pen", "knife", "keychain",
)
RECEPTACLE_CLASSES: Tuple[str, ...] = ("table", "counter", "shelf", "drawer", "cabinet", "lamp")

SLICEABLE_CLASSES: FrozenSet[str] = frozenset({"apple", "bread", "tomato", "potato", "lettuce"})
SLICING_TOOLS: FrozenSet[str] = frozenset({"knife"})
OPENABLE_CLASSES: FrozenSet[str] = frozenset({"drawer", "cabinet"})
TOGGLEABLE_CLASSES: FrozenSet[str] = frozenset({"lamp"})

# Label used by the class head on steps that do not interact.
NO_OBJECT = "none"


def interaction_classes(
    object_classes: Tuple[str, ...] = OBJECT_CLASSES,
    receptacle_classes: Tuple[str, ...] = RECEPTACLE_CLASSES,
) -> Tuple[str, ...]:
    """Class-head label set: objects, then receptacles, then the no-object label."""
    return tuple(object_classes) + tuple(receptacle_classes) + (NO_OBJECT,)


class ActionTag(str, Enum):
    MOVE_AHEAD = "MoveAhead"
    ROTATE_RIGHT = "RotateRight"
    ROTATE_LEFT = "RotateLeft"
    LOOK_UP = "LookUp"
    LOOK_DOWN = "LookDown"
    PICKUP = "Pickup"
    PUT = "Put"
    OPEN = "Open"
    CLOSE = "Close"
    TOGGLE_ON = "ToggleOn"
    TOGGLE_OFF = "ToggleOff"
    SLICE = "Slice"
    STOP = "Stop"

    @property
    def index(self) -> int:
        return ACTION_INDEX[self]

    @property
    def is_navigation(self) -> bool:
        return self in NAVIGATION_ACTIONS

    @property
    def is_interaction(self) -> bool:
        return self in INTERACTION_ACTIONS


ACTIONS: Tuple[ActionTag, ...] = tuple(ActionTag)
ACTION_INDEX: Dict[ActionTag, int] = {tag: i for i, tag in enumerate(ACTIONS)}
N_ACTION = len(ACTIONS)
NAVIGATION_ACTIONS: FrozenSet[ActionTag] = frozenset({
    ActionTag.MOVE_AHEAD, ActionTag.ROTATE_RIGHT, ActionTag.ROTATE_LEFT,
    ActionTag.LOOK_UP, ActionTag.LOOK_DOWN,
})
INTERACTION_ACTIONS: FrozenSet[ActionTag] = frozenset({
    ActionTag.PICKUP, ActionTag.PUT, ActionTag.OPEN, ActionTag.CLOSE,
    ActionTag.TOGGLE_ON, ActionTag.TOGGLE_OFF, ActionTag.SLICE,
})


class Heading(str, Enum):
    NORTH = "N"
    EAST = "E"
    SOUTH = "S"
    WEST = "W"

    @property
    def delta(self) -> Cell:
        return _HEADING_DELTAS[self]

    def turned(self, clockwise: bool) -> "Heading":
        order = list(Heading)
        step = 1 if clockwise else -1
        return order[(order.index(self) + step) % 4]


# y grows southward, x grows eastward.
_HEADING_DELTAS: Dict[Heading, Cell] = {
    Heading.NORTH: (0, -1),
    Heading.EAST: (1, 0),
    Heading.SOUTH: (0, 1),
    Heading.WEST: (-1, 0),
}


class StepEvent(str, Enum):
    OK = "ok"
    BLOCKED = "blocked"
    API_FAIL = "api_fail"
    DONE = "done"


class AgentPose(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: int
    y: int
    heading: Heading = Heading.NORTH
    pitch: int = Field(0, ge=-1, le=1)

    @property
    def cell(self) -> Cell:
        return (self.x, self.y)

    @property
    def ahead(self) -> Cell:
        dx, dy = self.heading.delta
        return (self.x + dx, self.y + dy)


class ReceptacleSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    cls: str
    cell: Cell
    openable: bool = False
    toggleable: bool = False
    capacity: int = Field(1, ge=1)
    color: Tuple[float, float, float] = (0.5, 0.5, 0.5)


class ObjectSpec(BaseModel):
    """An object instance; it starts either on a floor cell or inside a receptacle."""

    model_config = ConfigDict(frozen=True)

    cls: str
    cell: Optional[Cell] = None
    receptacle: Optional[int] = None
    sliceable: bool = False
    color: Tuple[float, float, float] = (0.5, 0.5, 0.5)

    @model_validator(mode="after")
    def _one_location(self) -> "ObjectSpec":
        if (self.cell is None) == (self.receptacle is None):
            raise ValueError("object must be placed on exactly one of: a floor cell, a receptacle")
        for value in self.color:
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"appearance value {value} outside [0, 1]")
        return self


class Layout(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int = Field(ge=3)
    height: int = Field(ge=3)
    walls: Tuple[Cell, ...]
    receptacles: Tuple[ReceptacleSpec, ...]
    objects: Tuple[ObjectSpec, ...]
    seed: int = Field(ge=0)
    split: str = "train"
    arrangement_id: int = 0
    generator_version: int = 1

    _wall_set: FrozenSet[Cell] = PrivateAttr(default=frozenset())
    _receptacle_at: Dict[Cell, int] = PrivateAttr(default_factory=dict)

    @model_validator(mode="after")
    def _check_invariants(self) -> "Layout":
        walls = set(self.walls)
        for cell in walls:
            if not self.in_bounds(cell):
                raise ValueError(f"wall cell {cell} out of bounds")
        seen = set()
        for idx, rec in enumerate(self.receptacles):
            if not self.in_bounds(rec.cell) or rec.cell in walls:
                raise ValueError(f"receptacle {idx} ({rec.cls}) on invalid cell {rec.cell}")
            if rec.cell in seen:
                raise ValueError(f"two receptacles share cell {rec.cell}")
            seen.add(rec.cell)
        load = [0] * len(self.receptacles)
        floor = set()
        for idx, obj in enumerate(self.objects):
            if obj.receptacle is not None:
                if not 0 <= obj.receptacle < len(self.receptacles):
                    raise ValueError(f"object {idx} references missing receptacle {obj.receptacle}")
                load[obj.receptacle] += 1
            else:
                cell = obj.cell
                if not self.in_bounds(cell) or cell in walls or cell in seen or cell in floor:
                    raise ValueError(f"object {idx} ({obj.cls}) on invalid cell {cell}")
                floor.add(cell)
        for idx, rec in enumerate(self.receptacles):
            if load[idx] > rec.capacity:
                raise ValueError(f"receptacle {idx} ({rec.cls}) holds {load[idx]} > capacity {rec.capacity}")
        return self

    def model_post_init(self, __context) -> None:
        self._wall_set = frozenset(self.walls)
        self._receptacle_at = {rec.cell: i for i, rec in enumerate(self.receptacles)}

    def in_bounds(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def is_wall(self, cell: Cell) -> bool:
        return not self.in_bounds(cell) or cell in self._wall_set

    def receptacle_at(self, cell: Cell) -> Optional[int]:
        return self._receptacle_at.get(cell)

    @property
    def n_instances(self) -> int:
        return len(self.receptacles) + len(self.objects)

    def instance_class(self, instance_id: int) -> str:
        """Instance ids number receptacles first, then objects."""
        if instance_id < len(self.receptacles):
            return self.receptacles[instance_id].cls
        return self.objects[instance_id - len(self.receptacles)].cls

    def object_instance_id(self, object_index: int) -> int:
        return len(self.receptacles) + object_index


class ConditionKind(str, Enum):
    IN = "in"
    SLICED = "sliced"
    TOGGLED_HOLDING = "toggled_holding"
    COUNT_IN = "count_in"


class GoalCondition(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ConditionKind
    object_class: str
    receptacle_class: Optional[str] = None
    count: int = Field(1, ge=1)

    @property
    def weight(self) -> int:
        """Number of goal conditions this predicate contributes."""
        return self.count if self.kind == ConditionKind.COUNT_IN else 1


class TaskType(str, Enum):
    PICK_AND_PLACE = "PickAndPlace"
    PICK_TWO_AND_PLACE = "PickTwoAndPlace"
    OPEN_AND_PLACE = "OpenAndPlace"
    SLICE_AND_PLACE = "SliceAndPlace"
    EXAMINE = "Examine"


class GoalSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_type: TaskType
    object_class: str
    receptacle_class: str
    conditions: Tuple[GoalCondition, ...] = Field(min_length=1)

    @property
    def total_conditions(self) -> int:
        return sum(c.weight for c in self.conditions)

    def class_names(self) -> List[str]:
        names = []
        for cond in self.conditions:
            names.append(cond.object_class)
            if cond.receptacle_class is not None:
                names.append(cond.receptacle_class)
        return names

    def check_against(self, layout: Layout) -> None:
        present = {o.cls for o in layout.objects} | {r.cls for r in layout.receptacles}
        for name in self.class_names():
            if name not in present:
                raise UnknownClassError(f"goal names class '{name}' which is absent from the layout")


def make_goal(task_type: TaskType, object_class: str, receptacle_class: str) -> GoalSpec:
    """Build the canonical condition list for a task type."""
    if task_type == TaskType.PICK_TWO_AND_PLACE:
        conditions = (GoalCondition(kind=ConditionKind.COUNT_IN, object_class=object_class,
                                    receptacle_class=receptacle_class, count=2),)
    elif task_type == TaskType.SLICE_AND_PLACE:
        conditions = (
            GoalCondition(kind=ConditionKind.SLICED, object_class=object_class),
            GoalCondition(kind=ConditionKind.IN, object_class=object_class, receptacle_class=receptacle_class),
        )
    elif task_type == TaskType.EXAMINE:
        conditions = (GoalCondition(kind=ConditionKind.TOGGLED_HOLDING, object_class=object_class,
                                    receptacle_class=receptacle_class),)
    else:
        conditions = (GoalCondition(kind=ConditionKind.IN, object_class=object_class,
                                    receptacle_class=receptacle_class),)
    return GoalSpec(task_type=task_type, object_class=object_class,
                    receptacle_class=receptacle_class, conditions=conditions)


class ObjectPlacement(BaseModel):
    """Where an object currently is: a floor cell, a receptacle, or the agent's hand."""

    model_config = ConfigDict(frozen=True)

    cell: Optional[Cell] = None
    receptacle: Optional[int] = None

    @property
    def held(self) -> bool:
        return self.cell is None and self.receptacle is None


class EpisodeState(BaseModel):
    model_config = ConfigDict(frozen=True)

    layout: Layout
    goal: GoalSpec
    pose: AgentPose
    step: int = 0
    holding: Optional[int] = None
    placements: Tuple[ObjectPlacement, ...]
    sliced: Tuple[bool, ...]
    opened: Tuple[bool, ...]
    toggled: Tuple[bool, ...]
    terminated: bool = False
    episode_seed: int = 0

    def contents(self, receptacle: int) -> List[int]:
        return [i for i, p in enumerate(self.placements) if p.receptacle == receptacle]

    def floor_object_at(self, cell: Cell) -> Optional[int]:
        for i, p in enumerate(self.placements):
            if p.cell == cell:
                return i
        return None

    def is_walkable(self, cell: Cell) -> bool:
        layout = self.layout
        return (
            not layout.is_wall(cell)
            and layout.receptacle_at(cell) is None
            and self.floor_object_at(cell) is None
        )

    def symbolic_key(self) -> tuple:
        """Everything except the pose and step counter; used by subgoal checks and tests."""
        return (self.holding, self.placements, self.sliced, self.opened, self.toggled)


@dataclass(frozen=True)
class Action:
    tag: ActionTag
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.tag.is_interaction and self.mask is None:
            raise ValueError(f"{self.tag.value} requires an interaction mask")
        if not self.tag.is_interaction and self.mask is not None:
            raise ValueError(f"{self.tag.value} does not take a mask")


@dataclass(frozen=True)
class MaskInstance:
    instance_id: int
    cls: str
    mask: np.ndarray
    confidence: float
    center: Tuple[float, float]


@dataclass(frozen=True)
class ChannelManifest:
    """Channel order of an observation raster."""

    class_names: Tuple[str, ...]
    flag_names: Tuple[str, ...] = ("open", "toggled_on", "sliced", "held")
    appearance_names: Tuple[str, ...] = ("appearance_r", "appearance_g", "appearance_b")
    names: Tuple[str, ...] = field(init=False)

    def __post_init__(self):
        names = (
            tuple(f"class:{c}" for c in self.class_names)
            + tuple(f"flag:{f}" for f in self.flag_names)
            + ("occupancy",)
            + self.appearance_names
        )
        object.__setattr__(self, "names", names)

    @property
    def n_channels(self) -> int:
        return len(self.names)

    def class_channel(self, cls: str) -> int:
        try:
            return self.class_names.index(cls)
        except ValueError:
            raise UnknownClassError(f"unknown class '{cls}'") from None

    def flag_channel(self, flag: str) -> int:
        return len(self.class_names) + self.flag_names.index(flag)

    @property
    def occupancy_channel(self) -> int:
        return len(self.class_names) + len(self.flag_names)

    @property
    def appearance_channels(self) -> Tuple[int, int, int]:
        start = self.occupancy_channel + 1
        return (start, start + 1, start + 2)

    def to_dict(self) -> dict:
        return {"channels": list(self.names), "appearance": list(self.appearance_channels)}
