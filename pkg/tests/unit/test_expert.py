"""
Tests for the scripted expert, templated language and episode generation.
"""

import unittest

import numpy as np
import pytest

from models.config import DatasetConfig
from models.dataset import SubgoalKind
from models.errors import VocabularyError
from models.world import Action, ActionTag, AgentPose, Heading, StepEvent, TaskType, make_goal
from services.expert import (
    STOP,
    build_vocabulary,
    generate_episode,
    plan,
    sample_task,
    shortest_path,
    templatize,
)
from services.gridworld import GridWorld, generate_layout
from tests.layouts import APPLE_IN_DRAWER, KNIFE, START, room_layout


def replay_actions(world, trajectory):
    """Replay a demonstration with masks recomputed on the live state."""
    state = world.reset(trajectory.layout, trajectory.goal, trajectory.start)
    events = []
    for tag, instance in zip(trajectory.actions, trajectory.instance_ids):
        mask = None if instance is None else world.instance_mask(state, instance)
        state, event = world.step(state, Action(tag, mask))
        events.append(event)
    return state, events


class TestPlanner(unittest.TestCase):
    def setUp(self):
        self.world = GridWorld()
        self.layout = room_layout()

    def test_shortest_path_to_facing_pose(self):
        state = self.world.reset(self.layout, APPLE_IN_DRAWER, START)
        self.assertEqual(shortest_path(state, START, (3, 1)), [ActionTag.MOVE_AHEAD])
        self.assertEqual(shortest_path(state, START, (3, 2)), [])

    def test_pick_and_place_opens_and_closes(self):
        trajectory = plan(self.layout, APPLE_IN_DRAWER, START, self.world)
        self.assertIsNotNone(trajectory)
        kinds = [sg.kind for sg in trajectory.subgoals]
        self.assertEqual(kinds, [SubgoalKind.GOTO, SubgoalKind.PICKUP, SubgoalKind.GOTO,
                                 SubgoalKind.OPEN, SubgoalKind.PUT, SubgoalKind.CLOSE])
        self.assertEqual(trajectory.actions[-1], ActionTag.STOP)

        state, events = replay_actions(self.world, trajectory)
        self.assertTrue(all(e in (StepEvent.OK, StepEvent.DONE) for e in events))
        self.assertEqual(self.world.check_goal(state, APPLE_IN_DRAWER), (True, 1, 1))

    def test_demonstration_invariants(self):
        trajectory = plan(self.layout, APPLE_IN_DRAWER, START, self.world)
        self.assertEqual(len(trajectory.observations), len(trajectory.actions))
        for tag, cls, mask in zip(trajectory.actions, trajectory.classes, trajectory.masks):
            self.assertEqual(tag.is_interaction, cls is not None)
            self.assertEqual(tag.is_interaction, mask is not None)
            self.assertNotIn(tag, (ActionTag.LOOK_UP, ActionTag.LOOK_DOWN))
        bounds = [(sg.start, sg.end) for sg in trajectory.subgoals]
        for (_, end), (start, _) in zip(bounds, bounds[1:]):
            self.assertEqual(end, start)
        self.assertEqual(bounds[-1][1], len(trajectory.actions) - 1)

    def test_slice_and_place_fetches_knife_first(self):
        goal = make_goal(TaskType.SLICE_AND_PLACE, "apple", "drawer")
        trajectory = plan(self.layout, goal, START, self.world)
        self.assertIsNotNone(trajectory)
        first_pickup = trajectory.actions.index(ActionTag.PICKUP)
        self.assertEqual(trajectory.instance_ids[first_pickup], self.layout.object_instance_id(KNIFE))
        self.assertIn(SubgoalKind.SLICE, [sg.kind for sg in trajectory.subgoals])
        state, _ = replay_actions(self.world, trajectory)
        self.assertEqual(self.world.check_goal(state, goal), (True, 2, 2))

    def test_examine_toggles_lamp_while_holding(self):
        goal = make_goal(TaskType.EXAMINE, "mug", "lamp")
        trajectory = plan(self.layout, goal, START, self.world)
        self.assertIsNotNone(trajectory)
        kinds = [sg.kind for sg in trajectory.subgoals]
        self.assertEqual(kinds[-1], SubgoalKind.TOGGLE)
        self.assertIn(SubgoalKind.OPEN, kinds)
        state, _ = replay_actions(self.world, trajectory)
        self.assertTrue(self.world.check_goal(state, goal)[0])

    def test_no_goto_when_already_facing_target(self):
        # From (3, 2) the agent already faces the table holding the apple.
        start = AgentPose(x=3, y=2, heading=Heading.NORTH)
        trajectory = plan(self.layout, APPLE_IN_DRAWER, start, self.world)
        self.assertIsNotNone(trajectory)
        self.assertEqual(trajectory.subgoals[0].kind, SubgoalKind.PICKUP)
        self.assertEqual(trajectory.subgoals[0].start, 0)
        self.assertTrue(all(sg.length > 0 for sg in trajectory.subgoals))

    def test_unsolvable_task_returns_none(self):
        goal = make_goal(TaskType.PICK_TWO_AND_PLACE, "apple", "table")
        self.assertIsNone(plan(self.layout, goal, START, self.world))

    def test_length_cap(self):
        self.assertIsNone(plan(self.layout, APPLE_IN_DRAWER, START, self.world, max_len=3))


class TestLanguage(unittest.TestCase):
    def setUp(self):
        self.world = GridWorld()
        self.trajectory = plan(room_layout(), APPLE_IN_DRAWER, START, self.world)
        config = self.world.config
        self.vocab = build_vocabulary(config.object_classes, config.receptacle_classes)

    def test_templatize_is_seeded(self):
        self.assertEqual(templatize(self.trajectory, 4), templatize(self.trajectory, 4))

    def test_one_sentence_per_subgoal(self):
        pair = templatize(self.trajectory, 4)
        self.assertEqual(len(pair.instructions), len(self.trajectory.subgoals))
        self.assertIn("apple", pair.goal)
        self.assertIn("drawer", pair.goal)

    def test_every_rendering_is_in_vocabulary(self):
        for seed in range(50):
            pair = templatize(self.trajectory, seed)
            self.vocab.encode_goal(pair)
            self.vocab.encode_instructions(pair)

    def test_instruction_encoding(self):
        pair = templatize(self.trajectory, 1)
        ids = self.vocab.encode_instructions(pair)
        self.assertEqual(ids[-1], self.vocab.stop_id)
        self.assertEqual(ids.count(self.vocab.sep_id), len(pair.instructions) - 1)
        self.assertEqual(self.vocab.decode(ids)[-1], STOP)

    def test_vocabulary_errors(self):
        with self.assertRaises(VocabularyError):
            self.vocab.encode(["spaceship"])
        with self.assertRaises(VocabularyError):
            self.vocab.decode([len(self.vocab)])

    def test_vocabulary_hash_is_stable(self):
        config = self.world.config
        other = build_vocabulary(config.object_classes, config.receptacle_classes)
        self.assertEqual(other.hash, self.vocab.hash)
        self.assertEqual(self.vocab.pad_id, 0)


def test_sample_task_is_satisfiable():
    config = DatasetConfig().generator
    world = GridWorld(config.world)
    rng = np.random.default_rng(0)
    for seed in range(5):
        layout = generate_layout(seed, "train", config)
        task = sample_task(layout, rng)
        if task is None:
            continue
        goal, start = task
        goal.check_against(layout)
        assert world.reset(layout, goal, start).pose.pitch == 0


@pytest.mark.parametrize("split_index", [0, 1, 2])
def test_generate_episode_is_deterministic(split_index):
    config = DatasetConfig(master_seed=5)
    a = generate_episode(config, split_index, 0)
    b = generate_episode(config, split_index, 0)
    assert a.layout == b.layout
    assert a.actions == b.actions
    assert a.language == b.language
    np.testing.assert_array_equal(a.observations, b.observations)


def test_generated_episode_reaches_goal():
    config = DatasetConfig(master_seed=2)
    world = GridWorld(config.generator.world)
    trajectory = generate_episode(config, 0, 1)
    assert trajectory.episode_id == "train-0001"
    assert len(trajectory) <= config.max_trajectory_len
    state, events = replay_actions(world, trajectory)
    assert events[-1] == StepEvent.DONE
    assert world.check_goal(state, trajectory.goal)[0]


def facing_distance(state, target):
    """Fewest rotations and moves until the agent faces ``target``, searched level by level."""
    pose = state.pose
    frontier = {(pose.x, pose.y, pose.heading)}
    visited = set(frontier)
    depth = 0
    while frontier:
        for x, y, heading in frontier:
            dx, dy = heading.delta
            if (x + dx, y + dy) == target:
                return depth
        successors = set()
        for x, y, heading in frontier:
            dx, dy = heading.delta
            candidates = [(x, y, heading.turned(True)), (x, y, heading.turned(False))]
            if state.is_walkable((x + dx, y + dy)):
                candidates.append((x + dx, y + dy, heading))
            successors.update(c for c in candidates if c not in visited)
        visited |= successors
        frontier = successors
        depth += 1
    return None


@pytest.fixture(scope="module")
def demonstrations():
    config = DatasetConfig(master_seed=13)
    return config, [generate_episode(config, 0, i) for i in range(50)]


def test_goto_segments_are_shortest_paths(demonstrations):
    config, trajectories = demonstrations
    world = GridWorld(config.generator.world)
    checked = 0
    for trajectory in trajectories:
        gotos = {sg.start: sg for sg in trajectory.subgoals if sg.kind == SubgoalKind.GOTO}
        state = world.reset(trajectory.layout, trajectory.goal, trajectory.start)
        for t, (tag, instance) in enumerate(zip(trajectory.actions, trajectory.instance_ids)):
            if t in gotos:
                segment = gotos[t]
                assert segment.length == facing_distance(state, segment.target_cell), trajectory.episode_id
                checked += 1
            mask = None if instance is None else world.instance_mask(state, instance)
            state, _ = world.step(state, Action(tag, mask))
    assert checked >= 50
