"""
Expert demonstrations: task sampling, breadth-first planning, templated
language and the dataset builder.
"""

import hashlib
import json
import logging
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.config import DatasetConfig
from models.dataset import DatasetManifest, InstructionPair, Subgoal, SubgoalKind, Trajectory
from models.errors import DatasetBuildError, UnsatisfiableLayoutError, VocabularyError
from models.world import (
    OPENABLE_CLASSES,
    SLICEABLE_CLASSES,
    SLICING_TOOLS,
    TOGGLEABLE_CLASSES,
    Action,
    ActionTag,
    AgentPose,
    Cell,
    EpisodeState,
    GoalSpec,
    Heading,
    Layout,
    ObjectPlacement,
    StepEvent,
    TaskType,
    make_goal,
)
from services.gridworld import GridWorld, generate_layout, walkable_cells
from storage.dataset_store import DatasetStore

logger = logging.getLogger("factored_agent.expert")

PAD, SEP, STOP = "<pad>", "<sep>", "<stop>"
SPECIAL_TOKENS = (PAD, SEP, STOP)

DATASET_SPLITS: Tuple[Tuple[str, str], ...] = (
    ("train", "train"),
    ("valid_seen", "seen_eval"),
    ("valid_unseen", "unseen_eval"),
)

_NAV_ORDER = (ActionTag.MOVE_AHEAD, ActionTag.ROTATE_RIGHT, ActionTag.ROTATE_LEFT)

# --------------------------------------------------------------------- language
# Slot name -> synonyms. "{cls}" inside a noun synonym is replaced by the class token.
SYNONYMS: Dict[str, Tuple[str, ...]] = {
    "goto": ("go to", "walk to", "head to"),
    "pick": ("pick up", "grab", "take"),
    "put": ("put", "place", "set"),
    "prep": ("in", "on", "into"),
    "open": ("open", "pull open"),
    "close": ("close", "shut"),
    "toggle": ("turn on", "switch on"),
    "slice": ("slice", "cut"),
    "examine": ("examine", "inspect", "look at"),
    "under": ("under", "by"),
    "two": ("two", "both"),
    "sliced": ("sliced", "cut"),
    "obj": ("the {cls}", "a {cls}"),
    "rec": ("the {cls}", "that {cls}"),
    "bare": ("{cls}",),
}

GOAL_TEMPLATES: Dict[TaskType, str] = {
    TaskType.PICK_AND_PLACE: "{put} {obj} {prep} {rec}",
    TaskType.PICK_TWO_AND_PLACE: "{put} {two} {bare} {prep} {rec}",
    TaskType.OPEN_AND_PLACE: "{put} {obj} inside {rec}",
    TaskType.SLICE_AND_PLACE: "{put} a {sliced} {bare} {prep} {rec}",
    TaskType.EXAMINE: "{examine} {obj} {under} {rec}",
}

INSTRUCTION_TEMPLATES: Dict[SubgoalKind, str] = {
    SubgoalKind.GOTO: "{goto} {obj}",
    SubgoalKind.PICKUP: "{pick} {obj}",
    SubgoalKind.PUT: "{put} it {prep} {obj}",
    SubgoalKind.OPEN: "{open} {obj}",
    SubgoalKind.CLOSE: "{close} {obj}",
    SubgoalKind.TOGGLE: "{toggle} {obj}",
    SubgoalKind.SLICE: "{slice} {obj}",
}


def tokenize(text: str) -> List[str]:
    return text.lower().split()


def _fill(template: str, rng: np.random.Generator, obj: str, rec: Optional[str]) -> List[str]:
    tokens: List[str] = []
    for part in template.split():
        if part.startswith("{") and part.endswith("}"):
            slot = part[1:-1]
            choice = SYNONYMS[slot][int(rng.integers(0, len(SYNONYMS[slot])))]
            cls = rec if slot == "rec" else obj
            tokens.extend(tokenize(choice.replace("{cls}", cls or "")))
        else:
            tokens.extend(tokenize(part))
    return tokens


def templatize(trajectory: Trajectory, rng_seed: int) -> InstructionPair:
    """One goal statement and one instruction sentence per subgoal, with seeded synonyms."""
    rng = np.random.default_rng(rng_seed)
    goal = trajectory.goal
    goal_tokens = _fill(GOAL_TEMPLATES[goal.task_type], rng, goal.object_class, goal.receptacle_class)
    instructions = tuple(
        tuple(_fill(INSTRUCTION_TEMPLATES[sg.kind], rng, sg.target_class, None)) for sg in trajectory.subgoals
    )
    return InstructionPair(goal=tuple(goal_tokens), instructions=instructions)


class Vocabulary:
    """Frozen token <-> id map. Id 0 is padding."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise VocabularyError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def sep_id(self) -> int:
        return self.ids[SEP]

    @property
    def stop_id(self) -> int:
        return self.ids[STOP]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        try:
            return [self.ids[t] for t in tokens]
        except KeyError as e:
            raise VocabularyError(f"token {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> List[str]:
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise VocabularyError(f"token id {i} out of range [0, {len(self.tokens)})")
        return [self.tokens[int(i)] for i in ids]

    def encode_goal(self, pair: InstructionPair) -> List[int]:
        return self.encode(pair.goal)

    def encode_instructions(self, pair: InstructionPair) -> List[int]:
        """Instruction sentences joined by <sep>, terminated by <stop>."""
        tokens: List[str] = []
        for i, sentence in enumerate(pair.instructions):
            if i:
                tokens.append(SEP)
            tokens.extend(sentence)
        tokens.append(STOP)
        return self.encode(tokens)

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.tokens).encode()).hexdigest()[:16]


def build_vocabulary(object_classes: Sequence[str], receptacle_classes: Sequence[str]) -> Vocabulary:
    """Enumerate every token any template rendering can produce."""
    words = set()
    templates = list(GOAL_TEMPLATES.values()) + list(INSTRUCTION_TEMPLATES.values())
    for template in templates:
        words.update(p for p in tokenize(template) if not p.startswith("{"))
    for synonyms in SYNONYMS.values():
        for phrase in synonyms:
            words.update(t for t in tokenize(phrase) if t != "{cls}")
    words.update(object_classes)
    words.update(receptacle_classes)
    return Vocabulary(list(SPECIAL_TOKENS) + sorted(words))


# --------------------------------------------------------------------- planning
def shortest_path(state: EpisodeState, pose: AgentPose, target: Cell) -> Optional[List[ActionTag]]:
    """Breadth-first search over (x, y, heading) for a pose facing ``target``."""
    start = (pose.x, pose.y, pose.heading)
    parents: Dict[tuple, Optional[Tuple[tuple, ActionTag]]] = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        x, y, heading = node
        dx, dy = heading.delta
        if (x + dx, y + dy) == target:
            actions: List[ActionTag] = []
            while parents[node] is not None:
                node, tag = parents[node]
                actions.append(tag)
            return actions[::-1]
        for tag in _NAV_ORDER:
            if tag == ActionTag.MOVE_AHEAD:
                if not state.is_walkable((x + dx, y + dy)):
                    continue
                nxt = (x + dx, y + dy, heading)
            else:
                nxt = (x, y, heading.turned(tag == ActionTag.ROTATE_RIGHT))
            if nxt not in parents:
                parents[nxt] = (node, tag)
                queue.append(nxt)
    return None


class _ExpertRun:
    """Executes scripted subgoals in the simulator while recording the demonstration."""

    def __init__(self, world: GridWorld, state: EpisodeState, max_len: int):
        self.world = world
        self.state = state
        self.max_len = max_len
        self.observations: List[np.ndarray] = []
        self.actions: List[ActionTag] = []
        self.classes: List[Optional[str]] = []
        self.masks: List[Optional[np.ndarray]] = []
        self.instance_ids: List[Optional[int]] = []
        self.subgoals: List[Subgoal] = []
        self._facing: Optional[Cell] = None
        self._opened_by_expert: set = set()

    @property
    def layout(self) -> Layout:
        return self.state.layout

    def _record(self, tag: ActionTag, instance_id: Optional[int] = None) -> bool:
        if len(self.actions) >= self.max_len:
            return False
        self.observations.append(self.world.render(self.state))
        mask = None if instance_id is None else self.world.instance_mask(self.state, instance_id)
        self.state, event = self.world.step(self.state, Action(tag, mask))
        self.actions.append(tag)
        self.classes.append(None if instance_id is None else self.layout.instance_class(instance_id))
        self.masks.append(mask)
        self.instance_ids.append(instance_id)
        return event in (StepEvent.OK, StepEvent.DONE)

    def location_of(self, instance_id: int) -> Optional[Cell]:
        n_rec = len(self.layout.receptacles)
        if instance_id < n_rec:
            return self.layout.receptacles[instance_id].cell
        placement = self.state.placements[instance_id - n_rec]
        if placement.cell is not None:
            return placement.cell
        if placement.receptacle is not None:
            return self.layout.receptacles[placement.receptacle].cell
        return None

    def distance(self, instance_id: int) -> Optional[int]:
        cell = self.location_of(instance_id)
        if cell is None:
            return None
        path = shortest_path(self.state, self.state.pose, cell)
        return None if path is None else len(path)

    def nearest(self, candidates: Sequence[int]) -> Optional[int]:
        best = None
        for instance_id in candidates:
            d = self.distance(instance_id)
            if d is not None and (best is None or d < best[0]):
                best = (d, instance_id)
        return None if best is None else best[1]

    def goto(self, instance_id: int) -> bool:
        cell = self.location_of(instance_id)
        if cell is None:
            return False
        if self._facing == cell and self.state.pose.ahead == cell:
            return True
        path = shortest_path(self.state, self.state.pose, cell)
        if path is None:
            return False
        self._facing = cell
        if not path:
            return True
        start = len(self.actions)
        for tag in path:
            if not self._record(tag):
                return False
        self.subgoals.append(Subgoal(kind=SubgoalKind.GOTO, target_class=self.layout.instance_class(instance_id),
                                     target_cell=cell, start=start, end=len(self.actions)))
        return True

    def interact(self, kind: SubgoalKind, tag: ActionTag, instance_id: int) -> bool:
        if not self.goto(instance_id):
            return False
        cell = self.location_of(instance_id)
        start = len(self.actions)
        if not self._record(tag, instance_id):
            return False
        self.subgoals.append(Subgoal(kind=kind, target_class=self.layout.instance_class(instance_id),
                                     target_cell=cell, start=start, end=len(self.actions)))
        return True

    def _container(self, object_index: int) -> Optional[int]:
        return self.state.placements[object_index].receptacle

    def open_if_needed(self, rec: Optional[int]) -> bool:
        if rec is None or not self.layout.receptacles[rec].openable or self.state.opened[rec]:
            return True
        self._opened_by_expert.add(rec)
        return self.interact(SubgoalKind.OPEN, ActionTag.OPEN, rec)

    def close_if_opened(self, rec: Optional[int]) -> bool:
        if rec is None or rec not in self._opened_by_expert or not self.state.opened[rec]:
            return True
        self._opened_by_expert.discard(rec)
        return self.interact(SubgoalKind.CLOSE, ActionTag.CLOSE, rec)

    def fetch(self, object_index: int) -> bool:
        rec = self._container(object_index)
        instance_id = self.layout.object_instance_id(object_index)
        return (self.open_if_needed(rec)
                and self.interact(SubgoalKind.PICKUP, ActionTag.PICKUP, instance_id)
                and self.close_if_opened(rec))

    def deliver(self, rec: int) -> bool:
        return (self.open_if_needed(rec)
                and self.interact(SubgoalKind.PUT, ActionTag.PUT, rec)
                and self.close_if_opened(rec))

    def free_receptacles(self, classes: Optional[Sequence[str]] = None, openable: Optional[bool] = None) -> List[int]:
        found = []
        for i, rec in enumerate(self.layout.receptacles):
            if classes is not None and rec.cls not in classes:
                continue
            if openable is not None and rec.openable != openable:
                continue
            if len(self.state.contents(i)) < rec.capacity:
                found.append(i)
        return found

    def objects_of(self, cls: str, exclude_in: Optional[str] = None) -> List[int]:
        """Instance ids of un-held objects of ``cls``, optionally skipping those already inside ``exclude_in``."""
        ids = []
        for i, obj in enumerate(self.layout.objects):
            if obj.cls != cls or self.state.holding == i:
                continue
            rec = self._container(i)
            if exclude_in is not None and rec is not None and self.layout.receptacles[rec].cls == exclude_in:
                continue
            ids.append(self.layout.object_instance_id(i))
        return ids

    def pick_and_place(self, obj_cls: str, rec_cls: str) -> bool:
        obj = self.nearest(self.objects_of(obj_cls, exclude_in=rec_cls))
        if obj is None or not self.fetch(obj - len(self.layout.receptacles)):
            return False
        target = self.nearest(self.free_receptacles([rec_cls]))
        return target is not None and self.deliver(target)

    def stop(self) -> bool:
        return self._record(ActionTag.STOP)


def _execute(run: _ExpertRun, goal: GoalSpec) -> bool:
    task = goal.task_type
    if task in (TaskType.PICK_AND_PLACE, TaskType.OPEN_AND_PLACE):
        return run.pick_and_place(goal.object_class, goal.receptacle_class)
    if task == TaskType.PICK_TWO_AND_PLACE:
        return (run.pick_and_place(goal.object_class, goal.receptacle_class)
                and run.pick_and_place(goal.object_class, goal.receptacle_class))
    n_rec = len(run.layout.receptacles)
    if task == TaskType.EXAMINE:
        obj = run.nearest(run.objects_of(goal.object_class))
        lamp = None
        if obj is not None and run.fetch(obj - n_rec):
            lamp = run.nearest([i for i, r in enumerate(run.layout.receptacles)
                                if r.cls == goal.receptacle_class and r.toggleable])
        return lamp is not None and run.interact(SubgoalKind.TOGGLE, ActionTag.TOGGLE_ON, lamp)
    if task == TaskType.SLICE_AND_PLACE:
        knife = run.nearest([i for tool in sorted(SLICING_TOOLS) for i in run.objects_of(tool)])
        if knife is None or not run.fetch(knife - n_rec):
            return False
        target = run.nearest(run.objects_of(goal.object_class, exclude_in=goal.receptacle_class))
        if target is None:
            return False
        container = run._container(target - n_rec)
        if not (run.open_if_needed(container) and run.interact(SubgoalKind.SLICE, ActionTag.SLICE, target)):
            return False
        # The knife goes into the nearest receptacle that still has room.
        shelves = [c for c in {r.cls for r in run.layout.receptacles} if c not in TOGGLEABLE_CLASSES]
        drop = run.nearest(run.free_receptacles(shelves, openable=False))
        if drop is None:
            drop = run.nearest(run.free_receptacles(shelves))
        if drop is None or not run.deliver(drop):
            return False
        if not run.fetch(target - n_rec):
            return False
        dest = run.nearest(run.free_receptacles([goal.receptacle_class]))
        return dest is not None and run.deliver(dest)
    return False


def plan(layout: Layout, goal: GoalSpec, start: AgentPose, world: Optional[GridWorld] = None,
         max_len: int = 60, episode_seed: Optional[int] = None) -> Optional[Trajectory]:
    """
    Scripted expert demonstration, or None when the task cannot be solved.

    Navigation segments are breadth-first shortest paths; interactions use the
    exact instance masks. The demonstration is replayed in the simulator as it
    is built, so a returned trajectory always reaches the goal.
    """
    world = world or GridWorld()
    try:
        state = world.reset(layout, goal, start, episode_seed)
    except ValueError as e:
        logger.debug(f"Cannot plan from start pose: {e}")
        return None
    run = _ExpertRun(world, state, max_len)
    if not _execute(run, goal) or not run.stop():
        return None
    success, _, _ = world.check_goal(run.state, goal)
    if not success:
        return None
    return Trajectory(
        observations=np.stack(run.observations).astype(np.float32),
        actions=run.actions,
        classes=run.classes,
        masks=run.masks,
        subgoals=run.subgoals,
        layout=layout,
        goal=goal,
        start=start,
        instance_ids=run.instance_ids,
    )


# --------------------------------------------------------------------- sampling
def sample_task(layout: Layout, rng: np.random.Generator) -> Optional[Tuple[GoalSpec, AgentPose]]:
    """A goal satisfiable in ``layout`` and a start pose, or None if no task type fits."""
    object_classes = sorted({o.cls for o in layout.objects})
    receptacle_classes = sorted({r.cls for r in layout.receptacles})
    put_targets = [c for c in receptacle_classes if c not in TOGGLEABLE_CLASSES]
    counts = {c: sum(o.cls == c for o in layout.objects) for c in object_classes}

    options: List[Tuple[TaskType, List[str], List[str]]] = []
    if object_classes and put_targets:
        options.append((TaskType.PICK_AND_PLACE, object_classes, put_targets))
    twos = [c for c in object_classes if counts[c] >= 2]
    if twos and put_targets:
        options.append((TaskType.PICK_TWO_AND_PLACE, twos, put_targets))
    openables = [c for c in put_targets if c in OPENABLE_CLASSES]
    if object_classes and openables:
        options.append((TaskType.OPEN_AND_PLACE, object_classes, openables))
    sliceables = [c for c in object_classes if c in SLICEABLE_CLASSES]
    if sliceables and any(c in SLICING_TOOLS for c in object_classes) and put_targets:
        options.append((TaskType.SLICE_AND_PLACE, sliceables, put_targets))
    lamps = [c for c in receptacle_classes if c in TOGGLEABLE_CLASSES]
    if lamps and object_classes:
        options.append((TaskType.EXAMINE, object_classes, lamps))
    if not options:
        return None

    task_type, objs, recs = options[int(rng.integers(0, len(options)))]
    goal = make_goal(task_type, objs[int(rng.integers(0, len(objs)))], recs[int(rng.integers(0, len(recs)))])

    scratch = EpisodeState(
        layout=layout, goal=goal, pose=AgentPose(x=0, y=0),
        placements=tuple(ObjectPlacement(cell=o.cell, receptacle=o.receptacle) for o in layout.objects),
        sliced=tuple(False for _ in layout.objects),
        opened=tuple(False for _ in layout.receptacles),
        toggled=tuple(False for _ in layout.receptacles),
    )
    cells = walkable_cells(scratch)
    if not cells:
        return None
    x, y = cells[int(rng.integers(0, len(cells)))]
    heading = list(Heading)[int(rng.integers(0, 4))]
    return goal, AgentPose(x=x, y=y, heading=heading, pitch=0)


# --------------------------------------------------------------------- datasets
def generate_episode(config: DatasetConfig, split_index: int, episode_index: int) -> Trajectory:
    """One demonstration; attempt seeds are derived from the master seed so reruns agree."""
    split, layout_split = DATASET_SPLITS[split_index]
    world = GridWorld(config.generator.world)
    for attempt in range(config.max_retries):
        rng = np.random.default_rng([config.master_seed, split_index, episode_index, attempt])
        layout_seed = int(rng.integers(0, 2**31 - 1))
        try:
            layout = generate_layout(layout_seed, layout_split, config.generator)
        except UnsatisfiableLayoutError as e:
            logger.warning(f"Layout seed {layout_seed} unsatisfiable, resampling: {e}")
            continue
        task = sample_task(layout, rng)
        if task is None:
            continue
        goal, start = task
        if world.check_goal(world.reset(layout, goal, start), goal)[0]:
            continue
        trajectory = plan(layout, goal, start, world, config.max_trajectory_len, episode_seed=layout_seed)
        if trajectory is None:
            logger.debug(f"{split}/{episode_index} attempt {attempt}: no expert plan, resampling")
            continue
        trajectory.language = templatize(trajectory, int(rng.integers(0, 2**31 - 1)))
        trajectory.episode_id = f"{split}-{episode_index:04d}"
        trajectory.split = split
        return trajectory
    raise DatasetBuildError(
        f"episode {split}/{episode_index} unsolvable after {config.max_retries} attempts"
    )


def _generate_job(args: Tuple[DatasetConfig, int, int]) -> Trajectory:
    return generate_episode(*args)


def _write_checked(store: DatasetStore, vocab: Vocabulary, trajectory: Trajectory, index: int):
    # Every rendered token must already be in the frozen vocabulary.
    vocab.encode_goal(trajectory.language)
    vocab.encode_instructions(trajectory.language)
    return store.write_episode(trajectory, index)


def build_dataset(config: DatasetConfig, out_dir: Union[str, Path], jobs: int = 1) -> DatasetManifest:
    """
    Generate every split and write it under ``out_dir``.

    Episodes may be generated in a process pool; all files are written by this
    process in index order, so the manifest is identical for any ``jobs``.
    """
    store = DatasetStore(out_dir)
    world = config.generator.world
    vocab = build_vocabulary(world.object_classes, world.receptacle_classes)
    counts = config.episode_counts()
    splits: Dict[str, list] = {}

    for split_index, (split, _) in enumerate(DATASET_SPLITS):
        jobs_args = [(config, split_index, i) for i in range(counts[split])]
        logger.info(f"Generating {len(jobs_args)} {split} episodes with {jobs} worker(s)")
        records = []
        if jobs > 1 and len(jobs_args) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for index, trajectory in enumerate(pool.map(_generate_job, jobs_args, chunksize=4)):
                    records.append(_write_checked(store, vocab, trajectory, index))
        else:
            for args in jobs_args:
                records.append(_write_checked(store, vocab, _generate_job(args), args[2]))
        splits[split] = records

    store.write_vocab(vocab.tokens)
    store.write_channels(world.channels)
    manifest = DatasetManifest(
        master_seed=config.master_seed,
        config=config.model_dump(mode="json"),
        channels=list(world.channels.names),
        vocab_hash=vocab.hash,
        splits=splits,
    )
    store.write_manifest(manifest)
    return manifest


def load_vocabulary(store: DatasetStore) -> Vocabulary:
    return Vocabulary(store.load_vocab())
