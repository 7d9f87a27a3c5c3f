"""
Tests for the gridworld simulator.
"""

import unittest

import numpy as np
import pytest

from models.config import GeneratorConfig, WorldConfig
from models.errors import (
    EpisodeTerminatedError,
    InvalidPoseError,
    ShapeMismatchError,
    UnknownClassError,
    UnsatisfiableLayoutError,
)
from models.world import Action, ActionTag, AgentPose, Heading, StepEvent, TaskType, make_goal
from services.gridworld import GridWorld, arrangement_id_for, canonical_split, generate_layout, walkable_cells
from tests.layouts import (
    APPLE,
    APPLE_IN_DRAWER,
    DRAWER,
    KNIFE,
    LAMP,
    MUG,
    START,
    TABLE,
    room_layout,
    two_drawer_layout,
)


def act(world, state, tag, instance=None):
    mask = None if instance is None else world.instance_mask(state, instance)
    return world.step(state, Action(tag, mask))


class TestStepping(unittest.TestCase):
    """Movement, interaction preconditions and termination."""

    def setUp(self):
        self.world = GridWorld(WorldConfig())
        self.layout = room_layout()
        self.state = self.world.reset(self.layout, APPLE_IN_DRAWER, START)

    def test_reset_initial_state(self):
        self.assertEqual(self.state.step, 0)
        self.assertIsNone(self.state.holding)
        self.assertEqual(self.state.opened, (False, False, False))
        self.assertEqual(self.state.toggled, (False, False, False))

    def test_reset_rejects_start_on_wall(self):
        with self.assertRaises(InvalidPoseError):
            self.world.reset(self.layout, APPLE_IN_DRAWER, AgentPose(x=0, y=0))

    def test_reset_rejects_start_on_floor_object(self):
        with self.assertRaises(InvalidPoseError):
            self.world.reset(self.layout, APPLE_IN_DRAWER, AgentPose(x=3, y=4))

    def test_goal_with_absent_class_is_rejected(self):
        goal = make_goal(TaskType.PICK_AND_PLACE, "book", "drawer")
        with self.assertRaises(UnknownClassError):
            self.world.reset(self.layout, goal, START)

    def test_move_ahead_and_blocked(self):
        state, event = act(self.world, self.state, ActionTag.MOVE_AHEAD)
        self.assertEqual(event, StepEvent.OK)
        self.assertEqual(state.pose.cell, (3, 2))
        # The table occupies (3, 1).
        blocked, event = act(self.world, state, ActionTag.MOVE_AHEAD)
        self.assertEqual(event, StepEvent.BLOCKED)
        self.assertEqual(blocked.pose, state.pose)
        self.assertEqual(blocked.step, state.step + 1)
        np.testing.assert_array_equal(self.world.render(blocked), self.world.render(state))

    def test_wall_bump_keeps_observation(self):
        state = self.state.model_copy(update={"pose": AgentPose(x=1, y=1, heading=Heading.NORTH)})
        after, event = act(self.world, state, ActionTag.MOVE_AHEAD)
        self.assertEqual(event, StepEvent.BLOCKED)
        self.assertEqual(after.pose, state.pose)
        np.testing.assert_array_equal(self.world.render(after), self.world.render(state))

    def test_floor_object_blocks_until_picked_up(self):
        state = self.state
        for _ in range(2):
            state, _ = act(self.world, state, ActionTag.ROTATE_RIGHT)
        self.assertEqual(state.pose.heading, Heading.SOUTH)
        _, event = act(self.world, state, ActionTag.MOVE_AHEAD)
        self.assertEqual(event, StepEvent.BLOCKED)
        state, event = act(self.world, state, ActionTag.PICKUP, self.layout.object_instance_id(KNIFE))
        self.assertEqual(event, StepEvent.OK)
        self.assertEqual(state.holding, KNIFE)
        state, event = act(self.world, state, ActionTag.MOVE_AHEAD)
        self.assertEqual(event, StepEvent.OK)
        self.assertEqual(state.pose.cell, (3, 4))

    def test_four_rotations_restore_heading(self):
        state = self.state
        for _ in range(4):
            state, event = act(self.world, state, ActionTag.ROTATE_LEFT)
            self.assertEqual(event, StepEvent.OK)
        self.assertEqual(state.pose, self.state.pose)

    def test_pitch_is_clamped(self):
        state = self.state
        for _ in range(3):
            state, _ = act(self.world, state, ActionTag.LOOK_UP)
        self.assertEqual(state.pose.pitch, 1)
        for _ in range(3):
            state, _ = act(self.world, state, ActionTag.LOOK_DOWN)
        self.assertEqual(state.pose.pitch, -1)

    def test_pick_and_put_into_drawer(self):
        world, layout = self.world, self.layout
        state, _ = act(world, self.state, ActionTag.MOVE_AHEAD)
        state, event = act(world, state, ActionTag.PICKUP, layout.object_instance_id(APPLE))
        self.assertEqual(event, StepEvent.OK)
        self.assertEqual(state.holding, APPLE)

        state, _ = act(world, state, ActionTag.ROTATE_LEFT)
        state, _ = act(world, state, ActionTag.ROTATE_LEFT)
        state, _ = act(world, state, ActionTag.MOVE_AHEAD)
        state, _ = act(world, state, ActionTag.ROTATE_RIGHT)
        state, _ = act(world, state, ActionTag.MOVE_AHEAD)
        self.assertEqual(state.pose.ahead, (1, 3))

        # A closed drawer rejects Put.
        state, event = act(world, state, ActionTag.PUT, DRAWER)
        self.assertEqual(event, StepEvent.API_FAIL)
        state, event = act(world, state, ActionTag.OPEN, DRAWER)
        self.assertEqual(event, StepEvent.OK)
        state, event = act(world, state, ActionTag.PUT, DRAWER)
        self.assertEqual(event, StepEvent.OK)
        self.assertIsNone(state.holding)
        self.assertEqual(sorted(state.contents(DRAWER)), [APPLE, MUG])
        self.assertEqual(world.check_goal(state, APPLE_IN_DRAWER), (True, 1, 1))

    def test_empty_mask_fails(self):
        empty = np.zeros((self.world.size, self.world.size), dtype=bool)
        state, event = self.world.step(self.state, Action(ActionTag.PICKUP, empty))
        self.assertEqual(event, StepEvent.API_FAIL)
        self.assertEqual(state.symbolic_key(), self.state.symbolic_key())

    def test_out_of_reach_interaction_fails(self):
        # The table is visible from the start but two cells away.
        _, event = act(self.world, self.state, ActionTag.PICKUP, self.layout.object_instance_id(APPLE))
        self.assertEqual(event, StepEvent.API_FAIL)

    def test_wrong_mask_shape(self):
        with self.assertRaises(ShapeMismatchError):
            self.world.step(self.state, Action(ActionTag.PICKUP, np.ones((3, 3), dtype=bool)))

    def test_slice_requires_knife(self):
        world, layout = self.world, self.layout
        state, _ = act(world, self.state, ActionTag.MOVE_AHEAD)
        _, event = act(world, state, ActionTag.SLICE, layout.object_instance_id(APPLE))
        self.assertEqual(event, StepEvent.API_FAIL)

        state = self.state
        for _ in range(2):
            state, _ = act(world, state, ActionTag.ROTATE_RIGHT)
        state, _ = act(world, state, ActionTag.PICKUP, layout.object_instance_id(KNIFE))
        for _ in range(2):
            state, _ = act(world, state, ActionTag.ROTATE_RIGHT)
        state, _ = act(world, state, ActionTag.MOVE_AHEAD)
        state, event = act(world, state, ActionTag.SLICE, layout.object_instance_id(APPLE))
        self.assertEqual(event, StepEvent.OK)
        self.assertTrue(state.sliced[APPLE])
        # Slicing twice fails.
        _, event = act(world, state, ActionTag.SLICE, layout.object_instance_id(APPLE))
        self.assertEqual(event, StepEvent.API_FAIL)

    def test_toggle_lamp(self):
        state, _ = act(self.world, self.state, ActionTag.ROTATE_RIGHT)
        state, _ = act(self.world, state, ActionTag.MOVE_AHEAD)
        self.assertEqual(state.pose.ahead, (5, 3))
        state, event = act(self.world, state, ActionTag.TOGGLE_ON, LAMP)
        self.assertEqual(event, StepEvent.OK)
        self.assertTrue(state.toggled[LAMP])
        _, event = act(self.world, state, ActionTag.TOGGLE_ON, LAMP)
        self.assertEqual(event, StepEvent.API_FAIL)
        # Lamps cannot be opened.
        _, event = act(self.world, state, ActionTag.OPEN, LAMP)
        self.assertEqual(event, StepEvent.API_FAIL)

    def test_stop_terminates(self):
        state, event = self.world.step(self.state, Action(ActionTag.STOP))
        self.assertEqual(event, StepEvent.DONE)
        self.assertTrue(state.terminated)
        with self.assertRaises(EpisodeTerminatedError):
            self.world.step(state, Action(ActionTag.MOVE_AHEAD))

    def test_partial_goal_credit(self):
        sliced = self.state.model_copy(update={"sliced": (True, False, False)})
        slice_goal = make_goal(TaskType.SLICE_AND_PLACE, "apple", "drawer")
        self.assertEqual(self.world.check_goal(sliced, slice_goal), (False, 1, 2))
        # The mug already sits in the drawer: one of the two required.
        pick_two = make_goal(TaskType.PICK_TWO_AND_PLACE, "mug", "drawer")
        self.assertEqual(self.world.check_goal(self.state, pick_two), (False, 1, 2))

    def test_reset_rejects_capacity_beyond_inner_pixels(self):
        # With 3-pixel cells only one inner pixel is left for contents.
        world = GridWorld(WorldConfig(cell_px=3))
        with self.assertRaises(UnsatisfiableLayoutError):
            world.reset(self.layout, APPLE_IN_DRAWER, START)

    def test_replay_stops_at_stop(self):
        actions = [Action(ActionTag.MOVE_AHEAD), Action(ActionTag.STOP), Action(ActionTag.MOVE_AHEAD)]
        state, events = self.world.replay(self.layout, APPLE_IN_DRAWER, START, actions)
        self.assertEqual(events, [StepEvent.OK, StepEvent.DONE])
        self.assertTrue(state.terminated)


class TestRendering(unittest.TestCase):
    def setUp(self):
        self.world = GridWorld(WorldConfig())
        self.layout = room_layout()
        self.state = self.world.reset(self.layout, APPLE_IN_DRAWER, START)

    def test_observation_shape_and_range(self):
        obs = self.world.render(self.state)
        self.assertEqual(obs.shape, self.world.config.observation_shape)
        self.assertEqual(obs.dtype, np.float32)
        self.assertGreaterEqual(obs.min(), 0.0)
        self.assertLessEqual(obs.max(), 1.0)

    def test_render_is_deterministic(self):
        np.testing.assert_array_equal(self.world.render(self.state), self.world.render(self.state))

    def test_held_plane(self):
        channels = self.world.channels
        self.assertFalse(self.world.render(self.state)[channels.flag_channel("held")].any())
        state, _ = act(self.world, self.state, ActionTag.MOVE_AHEAD)
        state, _ = act(self.world, state, ActionTag.PICKUP, self.layout.object_instance_id(APPLE))
        self.assertTrue(self.world.render(state)[channels.flag_channel("held")].all())
        # A held object is not drawn anywhere.
        self.assertFalse(self.world.render(state)[channels.class_channel("apple")].any())

    def test_closed_drawer_hides_contents(self):
        state = self.state
        state, _ = act(self.world, state, ActionTag.ROTATE_LEFT)
        state, _ = act(self.world, state, ActionTag.MOVE_AHEAD)
        mug = self.world.channels.class_channel("mug")
        self.assertFalse(self.world.render(state)[mug].any())
        state, _ = act(self.world, state, ActionTag.OPEN, DRAWER)
        obs = self.world.render(state)
        self.assertTrue(obs[mug].any())
        self.assertTrue(obs[self.world.channels.flag_channel("open")].any())

    def test_ahead_cell_is_bottom_center(self):
        rows = self.world.window_cells(self.state.pose)
        self.assertEqual(rows[-1][self.world.view // 2], self.state.pose.ahead)

    def test_look_up_shows_far_band(self):
        up = self.state.pose.model_copy(update={"pitch": 1})
        level = self.world.window_cells(self.state.pose)
        raised = self.world.window_cells(up)
        self.assertEqual(raised[-1], level[-2])


class TestSegmentation(unittest.TestCase):
    def setUp(self):
        self.world = GridWorld(WorldConfig())
        self.layout = room_layout()
        state = self.world.reset(self.layout, APPLE_IN_DRAWER, START)
        self.state, _ = act(self.world, state, ActionTag.MOVE_AHEAD)

    def test_instances_of_visible_class(self):
        instances = self.world.ground_truth_instances(self.state, "apple")
        self.assertEqual([m.instance_id for m in instances], [self.layout.object_instance_id(APPLE)])
        self.assertTrue(0.0 <= instances[0].confidence <= 1.0)
        np.testing.assert_array_equal(instances[0].mask,
                                      self.world.instance_mask(self.state, instances[0].instance_id))

    def test_hidden_class_has_no_instances(self):
        self.assertEqual(self.world.ground_truth_instances(self.state, "mug"), [])

    def test_unknown_class(self):
        with self.assertRaises(UnknownClassError):
            self.world.ground_truth_instances(self.state, "spaceship")

    def test_confidence_noise_is_seeded(self):
        a = self.world.ground_truth_instances(self.state, "table")
        b = self.world.ground_truth_instances(self.state, "table")
        self.assertEqual([m.confidence for m in a], [m.confidence for m in b])

    def test_noise_free_confidence_is_visible_fraction(self):
        world = GridWorld(WorldConfig(confidence_noise=0.0))
        (table,) = world.ground_truth_instances(self.state, "table")
        # The apple covers the table's inner pixels, leaving the outer ring.
        px = world.px
        self.assertAlmostEqual(table.confidence, (px * px - (px - 2) ** 2) / (px * px))

    def test_partly_covered_drawer_is_less_confident(self):
        world = GridWorld(WorldConfig(confidence_noise=0.0))
        layout = two_drawer_layout()
        state = world.reset(layout, make_goal(TaskType.PICK_AND_PLACE, "mug", "drawer"), START)
        state = state.model_copy(update={"opened": (True, True)})
        drawers = world.ground_truth_instances(state, "drawer")
        self.assertEqual([m.instance_id for m in drawers], [0, 1])
        for drawer in drawers:
            self.assertAlmostEqual(drawer.confidence, drawer.mask.sum() / (world.px * world.px))
        # The mug covers the inner pixels of the first drawer only.
        covered, clear = drawers
        self.assertEqual(clear.confidence, 1.0)
        self.assertLess(covered.confidence, clear.confidence)
        self.assertEqual(max(drawers, key=lambda m: m.confidence).instance_id, 1)

    def test_resolve_mask_prefers_largest_overlap(self):
        table = self.world.instance_mask(self.state, TABLE)
        apple = self.world.instance_mask(self.state, self.layout.object_instance_id(APPLE))
        self.assertEqual(self.world.resolve_mask(self.state, table | apple), TABLE)
        self.assertEqual(self.world.resolve_mask(self.state, apple), self.layout.object_instance_id(APPLE))


class TestLayoutGeneration(unittest.TestCase):
    def setUp(self):
        self.config = GeneratorConfig()

    def test_same_seed_same_layout(self):
        self.assertEqual(generate_layout(5, "train", self.config), generate_layout(5, "train", self.config))

    def test_split_aliases(self):
        self.assertEqual(canonical_split("valid_seen"), "seen_eval")
        with self.assertRaises(ValueError):
            canonical_split("test")

    def test_negative_seed(self):
        with self.assertRaises(ValueError):
            generate_layout(-1, "train", self.config)

    def test_unseen_arrangements_are_disjoint(self):
        train = {arrangement_id_for(s, "train", self.config) for s in range(100)}
        seen = {arrangement_id_for(s, "seen_eval", self.config) for s in range(100)}
        unseen = {arrangement_id_for(s, "unseen_eval", self.config) for s in range(100)}
        self.assertEqual(train & unseen, set())
        self.assertLessEqual(seen, set(range(self.config.train_arrangements)))
        self.assertTrue(all(a >= self.config.train_arrangements for a in unseen))

    def test_seen_layouts_reuse_train_walls(self):
        layout = generate_layout(9, "seen_eval", self.config)
        for seed in range(200):
            train = generate_layout(seed, "train", self.config)
            if train.arrangement_id == layout.arrangement_id:
                self.assertEqual(train.walls, layout.walls)
                self.assertEqual([r.cell for r in train.receptacles], [r.cell for r in layout.receptacles])
                break

    def test_too_many_objects(self):
        config = GeneratorConfig(n_objects=500)
        with self.assertRaises(UnsatisfiableLayoutError):
            generate_layout(1, "train", config)


@pytest.mark.parametrize("seed", range(10))
def test_generated_layouts_are_walkable(seed):
    world = GridWorld()
    layout = generate_layout(seed, "train", GeneratorConfig())
    cells = [(x, y) for x in range(layout.width) for y in range(layout.height)
             if not layout.is_wall((x, y)) and layout.receptacle_at((x, y)) is None
             and all(o.cell != (x, y) for o in layout.objects)]
    assert cells
    goal = make_goal(TaskType.PICK_AND_PLACE, layout.objects[0].cls,
                     next(r.cls for r in layout.receptacles if r.cls != "lamp"))
    state = world.reset(layout, goal, AgentPose(x=cells[0][0], y=cells[0][1]))
    assert world.render(state).shape == world.config.observation_shape


def test_ground_truth_masks_resolve_to_their_instance():
    world = GridWorld()
    config = GeneratorConfig()
    rng = np.random.default_rng(2024)
    headings = list(Heading)
    states = resolved = layouts = 0
    for seed in range(1000):
        if layouts == 100:
            break
        try:
            layout = generate_layout(seed, ("train", "seen_eval", "unseen_eval")[seed % 3], config)
        except UnsatisfiableLayoutError:
            continue
        layouts += 1
        goal = make_goal(TaskType.PICK_AND_PLACE, layout.objects[0].cls, layout.receptacles[0].cls)
        free = next((x, y) for y in range(layout.height) for x in range(layout.width)
                    if not layout.is_wall((x, y)) and layout.receptacle_at((x, y)) is None
                    and all(o.cell != (x, y) for o in layout.objects))
        base = world.reset(layout, goal, AgentPose(x=free[0], y=free[1]))
        cells = walkable_cells(base)
        for _ in range(10):
            x, y = cells[int(rng.integers(len(cells)))]
            pose = AgentPose(x=x, y=y, heading=headings[int(rng.integers(4))], pitch=int(rng.integers(-1, 2)))
            opened = tuple(bool(r.openable and rng.random() < 0.5) for r in layout.receptacles)
            state = base.model_copy(update={"pose": pose, "opened": opened})
            observation = world.render(state)
            for cls in world.config.class_names:
                if not observation[world.channels.class_channel(cls)].any():
                    continue
                for instance in world.ground_truth_instances(state, cls):
                    mask = world.instance_mask(state, instance.instance_id)
                    assert world.resolve_mask(state, mask) == instance.instance_id, (seed, pose, cls)
                    resolved += 1
            states += 1
    assert states == 1000
    assert resolved > 0
