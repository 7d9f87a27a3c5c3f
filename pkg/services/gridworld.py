"""
Deterministic household gridworld: layout generation, stepping, egocentric
rendering, ground-truth instance segmentation and goal checking.

Every function here is a pure function of its arguments (layouts and seeds);
no module-level random state is used.
"""

import logging
from collections import deque
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from models.config import GeneratorConfig, WorldConfig
from models.errors import (
    EpisodeTerminatedError,
    InvalidPoseError,
    ShapeMismatchError,
    UnknownClassError,
    UnsatisfiableLayoutError,
)
from models.world import (
    OPENABLE_CLASSES,
    SLICEABLE_CLASSES,
    SLICING_TOOLS,
    TOGGLEABLE_CLASSES,
    Action,
    ActionTag,
    AgentPose,
    Cell,
    ConditionKind,
    EpisodeState,
    GoalSpec,
    Heading,
    Layout,
    MaskInstance,
    ObjectPlacement,
    ObjectSpec,
    ReceptacleSpec,
    StepEvent,
)

logger = logging.getLogger("factored_agent.gridworld")

SPLITS = ("train", "seen_eval", "unseen_eval")
_SPLIT_ALIASES = {"valid_seen": "seen_eval", "valid_unseen": "unseen_eval"}
_SPLIT_CODES = {"train": 0, "seen_eval": 1, "unseen_eval": 2}

WALL_COLOR = (0.4, 0.4, 0.4)

_BASE_CAPACITY = {"table": 4, "counter": 4, "shelf": 3, "drawer": 2, "cabinet": 2, "lamp": 1}
_EXTRA_RECEPTACLES = ("drawer", "cabinet", "table", "counter")


def canonical_split(split: str) -> str:
    split = _SPLIT_ALIASES.get(split, split)
    if split not in _SPLIT_CODES:
        raise ValueError(f"unknown split '{split}', expected one of {SPLITS}")
    return split


def _quantized_color(rng: np.random.Generator, base: Sequence[float], jitter: float) -> Tuple[float, float, float]:
    # Colors are multiples of 1/255 so observations survive uint8 storage exactly.
    values = np.clip(np.asarray(base) + rng.uniform(-jitter, jitter, size=3), 0.0, 1.0)
    return tuple(float(np.round(v * 255.0) / 255.0) for v in values)


def _class_base_color(index: int) -> Tuple[float, float, float]:
    return ((index * 37 % 200 + 40) / 255.0, (index * 91 % 200 + 40) / 255.0, (index * 53 % 200 + 40) / 255.0)


def _neighbors(cell: Cell) -> List[Cell]:
    x, y = cell
    return [(x, y - 1), (x + 1, y), (x, y + 1), (x - 1, y)]


def _flood(start: Cell, passable: Set[Cell]) -> Set[Cell]:
    seen = {start}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        for nxt in _neighbors(cell):
            if nxt in passable and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def _reachable_layout(free: Set[Cell], targets: Iterable[Cell]) -> bool:
    """Free cells form one component and every target touches it."""
    if not free:
        return False
    component = _flood(min(free), free)
    if component != free:
        return False
    return all(any(n in free for n in _neighbors(t)) for t in targets)


def _build_arrangement(arrangement_id: int, config: GeneratorConfig) -> Tuple[Tuple[Cell, ...], Tuple[ReceptacleSpec, ...]]:
    """Walls and receptacles of one arrangement; a pure function of its id."""
    world = config.world
    rng = np.random.default_rng([config.generator_version, 7919, arrangement_id])
    border = {(x, y) for x in range(world.width) for y in range(world.height)
              if x in (0, world.width - 1) or y in (0, world.height - 1)}
    inner_px = (world.cell_px - 2) ** 2
    rec_classes = list(world.receptacle_classes) + [
        str(c) for c in rng.choice(
            [c for c in _EXTRA_RECEPTACLES if c in world.receptacle_classes] or list(world.receptacle_classes),
            size=config.n_extra_receptacles,
        )
    ]

    for _ in range(200):
        walls = set(border)
        for _ in range(config.interior_walls):
            if rng.random() < 0.5:
                x = int(rng.integers(2, world.width - 2))
                span = range(1, world.height - 1)
                door = int(rng.integers(1, world.height - 1))
                walls |= {(x, y) for y in span if abs(y - door) > 0 and rng.random() < 0.7}
            else:
                y = int(rng.integers(2, world.height - 2))
                span = range(1, world.width - 1)
                door = int(rng.integers(1, world.width - 1))
                walls |= {(x, y) for x in span if abs(x - door) > 0 and rng.random() < 0.7}
        floor = {(x, y) for x in range(world.width) for y in range(world.height)} - walls
        candidates = sorted(c for c in floor if any(n in walls for n in _neighbors(c)))
        if len(candidates) < len(rec_classes):
            continue
        picks = rng.choice(len(candidates), size=len(rec_classes), replace=False)
        cells = [candidates[int(i)] for i in picks]
        if not _reachable_layout(floor - set(cells), cells):
            continue
        receptacles = []
        for cls, cell in zip(rec_classes, cells):
            cls_index = world.receptacle_classes.index(cls)
            receptacles.append(ReceptacleSpec(
                cls=cls,
                cell=cell,
                openable=cls in OPENABLE_CLASSES,
                toggleable=cls in TOGGLEABLE_CLASSES,
                capacity=max(1, min(_BASE_CAPACITY.get(cls, 2), inner_px)),
                color=_quantized_color(rng, _class_base_color(len(world.object_classes) + cls_index), 0.05),
            ))
        return tuple(sorted(walls)), tuple(receptacles)
    raise UnsatisfiableLayoutError(f"no connected arrangement found for arrangement id {arrangement_id}")


def arrangement_id_for(seed: int, split: str, config: GeneratorConfig) -> int:
    split = canonical_split(split)
    rng = np.random.default_rng([config.generator_version, seed, _SPLIT_CODES[split]])
    if split == "unseen_eval":
        return config.train_arrangements + int(rng.integers(0, config.unseen_arrangements))
    return int(rng.integers(0, config.train_arrangements))


def generate_layout(seed: int, split: str, config: GeneratorConfig) -> Layout:
    """
    Generate a layout for one episode.

    Seen layouts reuse the train arrangement pool (walls and receptacles) with
    fresh object placements; unseen layouts draw from a disjoint pool.

    Args:
        seed: Non-negative episode seed
        split: "train", "seen_eval" or "unseen_eval"
        config: Generator settings (grid size and class vocabulary)

    Returns:
        A valid Layout, identical for identical (seed, split, config)
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    split = canonical_split(split)
    world = config.world
    arrangement_id = arrangement_id_for(seed, split, config)
    walls, receptacles = _build_arrangement(arrangement_id, config)

    wall_set = set(walls)
    rec_cells = {r.cell for r in receptacles}
    free = {(x, y) for x in range(world.width) for y in range(world.height)} - wall_set - rec_cells
    if config.n_objects > len(free):
        raise UnsatisfiableLayoutError(
            f"{config.n_objects} objects requested but only {len(free)} free cells are available"
        )

    rng = np.random.default_rng([config.generator_version, seed, _SPLIT_CODES[split], 1])
    classes = [str(c) for c in rng.choice(world.object_classes, size=config.n_objects)]
    if "knife" in world.object_classes and "knife" not in classes and rng.random() < 0.6:
        classes[0] = "knife"
    if len(set(classes)) == len(classes) and len(classes) >= 3 and rng.random() < 0.5:
        classes[-1] = classes[-2]

    load = [0] * len(receptacles)
    floor_cells: Set[Cell] = set()
    objects = []
    for cls in classes:
        cls_index = world.object_classes.index(cls)
        color = _quantized_color(rng, _class_base_color(cls_index), 0.1)
        open_slots = [i for i, r in enumerate(receptacles) if load[i] < r.capacity]
        place_on_floor = not open_slots or rng.random() < config.floor_object_prob
        spec = None
        if place_on_floor:
            options = sorted(free - floor_cells)
            for idx in rng.permutation(len(options)):
                cell = options[int(idx)]
                walkable = free - floor_cells - {cell}
                if _reachable_layout(walkable, list(rec_cells) + sorted(floor_cells | {cell})):
                    floor_cells.add(cell)
                    spec = ObjectSpec(cls=cls, cell=cell, sliceable=cls in SLICEABLE_CLASSES, color=color)
                    break
        if spec is None:
            if not open_slots:
                raise UnsatisfiableLayoutError(f"no room left for object '{cls}' in layout seed {seed}")
            rec = open_slots[int(rng.integers(0, len(open_slots)))]
            load[rec] += 1
            spec = ObjectSpec(cls=cls, receptacle=rec, sliceable=cls in SLICEABLE_CLASSES, color=color)
        objects.append(spec)

    return Layout(
        width=world.width,
        height=world.height,
        walls=walls,
        receptacles=receptacles,
        objects=tuple(objects),
        seed=seed,
        split=split,
        arrangement_id=arrangement_id,
        generator_version=config.generator_version,
    )


class GridWorld:
    """Simulator bound to one world configuration (view window, raster size, noise)."""

    def __init__(self, config: Optional[WorldConfig] = None):
        self.config = config or WorldConfig()
        self.channels = self.config.channels
        self.view = self.config.view_size
        self.px = self.config.cell_px
        self.size = self.config.pixels
        inner = [(r, c) for r in range(1, self.px - 1) for c in range(1, self.px - 1)]
        self._inner = inner
        self._ring = [(r, c) for r in range(self.px) for c in range(self.px) if (r, c) not in set(inner)]

    # ------------------------------------------------------------------ episode
    def reset(self, layout: Layout, goal: GoalSpec, start: AgentPose, episode_seed: Optional[int] = None) -> EpisodeState:
        """Initial state: step 0, empty hand, openables closed, toggleables off."""
        goal.check_against(layout)
        for idx, rec in enumerate(layout.receptacles):
            # Each visible content needs at least one inner pixel of the cell.
            if rec.capacity > len(self._inner):
                raise UnsatisfiableLayoutError(
                    f"receptacle {idx} ({rec.cls}) has capacity {rec.capacity} but only {len(self._inner)} inner pixels"
                )
        state = EpisodeState(
            layout=layout,
            goal=goal,
            pose=start,
            placements=tuple(ObjectPlacement(cell=o.cell, receptacle=o.receptacle) for o in layout.objects),
            sliced=tuple(False for _ in layout.objects),
            opened=tuple(False for _ in layout.receptacles),
            toggled=tuple(False for _ in layout.receptacles),
            episode_seed=layout.seed if episode_seed is None else episode_seed,
        )
        if not state.is_walkable(start.cell):
            raise InvalidPoseError(f"start pose {start.cell} is not a walkable cell")
        return state

    def step(self, state: EpisodeState, action: Action) -> Tuple[EpisodeState, StepEvent]:
        if state.terminated:
            raise EpisodeTerminatedError("episode already terminated")
        tag = action.tag
        pose = state.pose
        advanced = state.model_copy(update={"step": state.step + 1})

        if tag == ActionTag.STOP:
            return advanced.model_copy(update={"terminated": True}), StepEvent.DONE
        if tag == ActionTag.MOVE_AHEAD:
            ahead = pose.ahead
            if not state.is_walkable(ahead):
                return advanced, StepEvent.BLOCKED
            new_pose = pose.model_copy(update={"x": ahead[0], "y": ahead[1]})
            return advanced.model_copy(update={"pose": new_pose}), StepEvent.OK
        if tag in (ActionTag.ROTATE_LEFT, ActionTag.ROTATE_RIGHT):
            new_pose = pose.model_copy(update={"heading": pose.heading.turned(tag == ActionTag.ROTATE_RIGHT)})
            return advanced.model_copy(update={"pose": new_pose}), StepEvent.OK
        if tag in (ActionTag.LOOK_UP, ActionTag.LOOK_DOWN):
            delta = 1 if tag == ActionTag.LOOK_UP else -1
            new_pose = pose.model_copy(update={"pitch": max(-1, min(1, pose.pitch + delta))})
            return advanced.model_copy(update={"pose": new_pose}), StepEvent.OK

        target = self.resolve_mask(state, action.mask)
        if target is None or not self._in_reach(state, target):
            return advanced, StepEvent.API_FAIL
        update = self._interact(state, tag, target)
        if update is None:
            return advanced, StepEvent.API_FAIL
        return advanced.model_copy(update=update), StepEvent.OK

    def _in_reach(self, state: EpisodeState, instance_id: int) -> bool:
        layout = state.layout
        ahead = state.pose.ahead
        n_rec = len(layout.receptacles)
        if instance_id < n_rec:
            return layout.receptacles[instance_id].cell == ahead
        placement = state.placements[instance_id - n_rec]
        if placement.cell is not None:
            return placement.cell == ahead
        if placement.receptacle is not None:
            return layout.receptacles[placement.receptacle].cell == ahead
        return False

    def _interact(self, state: EpisodeState, tag: ActionTag, instance_id: int) -> Optional[dict]:
        """State update for a reachable target, or None when the precondition fails."""
        layout = state.layout
        n_rec = len(layout.receptacles)
        is_receptacle = instance_id < n_rec

        if tag == ActionTag.PICKUP:
            if is_receptacle or state.holding is not None:
                return None
            obj = instance_id - n_rec
            placements = list(state.placements)
            placements[obj] = ObjectPlacement()
            return {"holding": obj, "placements": tuple(placements)}

        if tag == ActionTag.SLICE:
            if is_receptacle or state.holding is None:
                return None
            if layout.objects[state.holding].cls not in SLICING_TOOLS:
                return None
            obj = instance_id - n_rec
            if not layout.objects[obj].sliceable or state.sliced[obj]:
                return None
            sliced = list(state.sliced)
            sliced[obj] = True
            return {"sliced": tuple(sliced)}

        if not is_receptacle:
            return None
        rec = layout.receptacles[instance_id]

        if tag == ActionTag.PUT:
            if state.holding is None:
                return None
            if rec.openable and not state.opened[instance_id]:
                return None
            if len(state.contents(instance_id)) >= rec.capacity:
                return None
            placements = list(state.placements)
            placements[state.holding] = ObjectPlacement(receptacle=instance_id)
            return {"holding": None, "placements": tuple(placements)}

        if tag in (ActionTag.OPEN, ActionTag.CLOSE):
            want_open = tag == ActionTag.OPEN
            if not rec.openable or state.opened[instance_id] == want_open:
                return None
            opened = list(state.opened)
            opened[instance_id] = want_open
            return {"opened": tuple(opened)}

        if tag in (ActionTag.TOGGLE_ON, ActionTag.TOGGLE_OFF):
            want_on = tag == ActionTag.TOGGLE_ON
            if not rec.toggleable or state.toggled[instance_id] == want_on:
                return None
            toggled = list(state.toggled)
            toggled[instance_id] = want_on
            return {"toggled": tuple(toggled)}
        return None

    def resolve_mask(self, state: EpisodeState, mask: Optional[np.ndarray]) -> Optional[int]:
        """Instance with the largest pixel overlap; ties go to the smallest id."""
        if mask is None:
            return None
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.size, self.size):
            raise ShapeMismatchError(f"mask shape {mask.shape} != {(self.size, self.size)}")
        _, instance_map = self._rasterize(state)
        hits = instance_map[mask & (instance_map >= 0)]
        if hits.size == 0:
            return None
        counts = np.bincount(hits, minlength=state.layout.n_instances)
        return int(np.argmax(counts))

    # ---------------------------------------------------------------- rendering
    def window_cells(self, pose: AgentPose) -> List[List[Cell]]:
        """World cell shown at each (row, col) of the view window."""
        forward = pose.heading.delta
        right = pose.heading.turned(True).delta
        band_start = pose.pitch + 1
        half = self.view // 2
        rows = []
        for i in range(self.view):
            depth = band_start + (self.view - 1 - i)
            row = []
            for j in range(self.view):
                lateral = j - half
                row.append((pose.x + depth * forward[0] + lateral * right[0],
                            pose.y + depth * forward[1] + lateral * right[1]))
            rows.append(row)
        return rows

    def render(self, state: EpisodeState) -> np.ndarray:
        """Egocentric observation raster, channels x H x W float32."""
        observation, _ = self._rasterize(state)
        return observation

    def _rasterize(self, state: EpisodeState) -> Tuple[np.ndarray, np.ndarray]:
        layout = state.layout
        ch = self.channels
        obs = np.zeros((ch.n_channels, self.size, self.size), dtype=np.float32)
        instance_map = np.full((self.size, self.size), -1, dtype=np.int64)
        n_rec = len(layout.receptacles)
        app = ch.appearance_channels

        contents: Dict[int, List[int]] = {}
        floor: Dict[Cell, int] = {}
        for idx, placement in enumerate(state.placements):
            if placement.receptacle is not None:
                contents.setdefault(placement.receptacle, []).append(idx)
            elif placement.cell is not None:
                floor[placement.cell] = idx

        def paint(pixels, top, left, instance_id, cls, color, flags):
            for r, c in pixels:
                y, x = top + r, left + c
                obs[ch.class_channel(cls), y, x] = 1.0
                for flag in flags:
                    obs[ch.flag_channel(flag), y, x] = 1.0
                obs[app[0], y, x], obs[app[1], y, x], obs[app[2], y, x] = color
                instance_map[y, x] = instance_id

        def paint_objects(objs, top, left):
            parts = np.array_split(np.arange(len(self._inner)), len(objs))
            for obj, part in zip(objs, parts):
                spec = layout.objects[obj]
                flags = ("sliced",) if state.sliced[obj] else ()
                paint([self._inner[k] for k in part], top, left, n_rec + obj, spec.cls, spec.color, flags)

        for i, row in enumerate(self.window_cells(state.pose)):
            for j, cell in enumerate(row):
                top, left = i * self.px, j * self.px
                if layout.is_wall(cell):
                    obs[ch.occupancy_channel, top:top + self.px, left:left + self.px] = 1.0
                    for k in range(3):
                        obs[app[k], top:top + self.px, left:left + self.px] = WALL_COLOR[k]
                    continue
                rec_id = layout.receptacle_at(cell)
                if rec_id is not None:
                    rec = layout.receptacles[rec_id]
                    flags = []
                    if state.opened[rec_id]:
                        flags.append("open")
                    if state.toggled[rec_id]:
                        flags.append("toggled_on")
                    visible = contents.get(rec_id, []) if (not rec.openable or state.opened[rec_id]) else []
                    if visible:
                        paint(self._ring, top, left, rec_id, rec.cls, rec.color, flags)
                        paint_objects(visible, top, left)
                    else:
                        paint(self._ring + self._inner, top, left, rec_id, rec.cls, rec.color, flags)
                elif cell in floor:
                    paint_objects([floor[cell]], top, left)

        if state.holding is not None:
            obs[ch.flag_channel("held")] = 1.0
        return obs, instance_map

    # ------------------------------------------------------------ segmentation
    def instance_mask(self, state: EpisodeState, instance_id: int) -> np.ndarray:
        """Exact noise-free mask of one instance in the current view."""
        _, instance_map = self._rasterize(state)
        return instance_map == instance_id

    def ground_truth_instances(self, state: EpisodeState, cls: str) -> List[MaskInstance]:
        """
        Mask-generator stand-in: one MaskInstance per visible instance of a class.

        Confidence is the visible-pixel fraction plus seeded noise drawn once per
        (episode seed, instance id, step). With mask noise enabled each mask is
        eroded or dilated by one pixel.
        """
        if cls not in self.config.class_names:
            raise UnknownClassError(f"unknown class '{cls}'")
        layout = state.layout
        _, instance_map = self._rasterize(state)
        n_rec = len(layout.receptacles)
        ids = sorted(int(i) for i in np.unique(instance_map) if i >= 0 and layout.instance_class(int(i)) == cls)
        amplitude = self.config.confidence_noise
        instances = []
        for instance_id in ids:
            mask = instance_map == instance_id
            full = self.px * self.px if instance_id < n_rec else len(self._inner)
            confidence = mask.sum() / full
            if amplitude > 0:
                noise_rng = np.random.default_rng([state.episode_seed, instance_id, state.step])
                confidence += noise_rng.uniform(-amplitude, amplitude)
            if self.config.mask_noise:
                mask = self._perturb_mask(mask, [state.episode_seed, instance_id, state.step, 1])
            rows, cols = np.nonzero(mask)
            instances.append(MaskInstance(
                instance_id=instance_id,
                cls=cls,
                mask=mask,
                confidence=float(np.clip(confidence, 0.0, 1.0)),
                center=(float(rows.mean()), float(cols.mean())),
            ))
        return instances

    @staticmethod
    def _perturb_mask(mask: np.ndarray, seed: List[int]) -> np.ndarray:
        choice = np.random.default_rng(seed).integers(0, 3)
        if choice == 0:
            return mask
        padded = np.pad(mask, 1, constant_values=choice == 1)
        shifted = [padded[1:-1, 1:-1], padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]]
        if choice == 1:
            eroded = np.logical_and.reduce(shifted)
            return eroded if eroded.any() else mask
        return np.logical_or.reduce(shifted)

    # -------------------------------------------------------------------- goals
    def check_goal(self, state: EpisodeState, goal: GoalSpec) -> Tuple[bool, int, int]:
        layout = state.layout
        satisfied = 0
        for cond in goal.conditions:
            if cond.kind == ConditionKind.SLICED:
                satisfied += int(any(
                    state.sliced[i] for i, o in enumerate(layout.objects) if o.cls == cond.object_class
                ))
            elif cond.kind == ConditionKind.TOGGLED_HOLDING:
                holding_ok = state.holding is not None and layout.objects[state.holding].cls == cond.object_class
                toggled_ok = any(
                    state.toggled[i] for i, r in enumerate(layout.receptacles) if r.cls == cond.receptacle_class
                )
                satisfied += int(holding_ok and toggled_ok)
            else:
                placed = sum(
                    1 for i, p in enumerate(state.placements)
                    if p.receptacle is not None
                    and layout.objects[i].cls == cond.object_class
                    and layout.receptacles[p.receptacle].cls == cond.receptacle_class
                )
                satisfied += min(placed, cond.weight)
        total = goal.total_conditions
        return satisfied == total, satisfied, total

    # ------------------------------------------------------------------ replay
    def replay(self, layout: Layout, goal: GoalSpec, start: AgentPose,
               actions: Sequence[Action], episode_seed: Optional[int] = None) -> Tuple[EpisodeState, List[StepEvent]]:
        state = self.reset(layout, goal, start, episode_seed)
        events = []
        for action in actions:
            state, event = self.step(state, action)
            events.append(event)
            if state.terminated:
                break
        return state, events


def walkable_cells(state: EpisodeState) -> List[Cell]:
    layout = state.layout
    return [(x, y) for y in range(layout.height) for x in range(layout.width) if state.is_walkable((x, y))]


HEADINGS: Tuple[Heading, ...] = tuple(Heading)
