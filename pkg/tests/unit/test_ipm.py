"""
Tests for instance association, localisation and the perception heads.
"""

import unittest

import numpy as np
import pytest
import torch

from agent.ipm import (
    ASSOCIATION_BRANCH,
    CONFIDENCE_BRANCH,
    RANDOM_BRANCH,
    AssociationState,
    ClassDecoder,
    MaskDecoder,
    associate,
    localise,
)
from models.world import MaskInstance

PIXELS = 8


def make_instance(instance_id, cls, confidence, center):
    mask = np.zeros((PIXELS, PIXELS), dtype=bool)
    mask[int(center[0]) % PIXELS, int(center[1]) % PIXELS] = True
    return MaskInstance(instance_id=instance_id, cls=cls, mask=mask, confidence=confidence, center=center)


def brute_force(cls, instances, state):
    """Selection written out step by step: filter to the best score, then break ties."""
    if not instances:
        return None
    if state.prev_class == cls and state.prev_center is not None:
        px, py = state.prev_center
        distances = {m.instance_id: (m.center[0] - px) ** 2 + (m.center[1] - py) ** 2 for m in instances}
        nearest = min(distances.values())
        pool = [m for m in instances if distances[m.instance_id] == nearest]
        best = max(m.confidence for m in pool)
        pool = [m for m in pool if m.confidence == best]
    else:
        best = max(m.confidence for m in instances)
        pool = [m for m in instances if m.confidence == best]
    return min(pool, key=lambda m: m.instance_id)


def random_configuration(rng):
    classes = ["apple", "mug"]
    cls = classes[int(rng.integers(0, 2))]
    # Coarse confidences and integer centers make ties common.
    instances = [
        make_instance(i, cls, float(rng.integers(0, 4)) / 4.0,
                      (float(rng.integers(0, 4)), float(rng.integers(0, 4))))
        for i in rng.permutation(12)[:int(rng.integers(0, 6))]
    ]
    kind = int(rng.integers(0, 3))
    if kind == 0:
        state = AssociationState()
    else:
        state = AssociationState(prev_class=cls if kind == 1 else classes[1 - classes.index(cls)],
                                 prev_center=(float(rng.integers(0, 4)), float(rng.integers(0, 4))))
    return cls, [m for m in instances], state


def test_associate_matches_brute_force_on_random_configurations():
    rng = np.random.default_rng(2024)
    ties = 0
    for _ in range(1000):
        cls, instances, state = random_configuration(rng)
        chosen, new_state, branch = associate(cls, instances, state)
        expected = brute_force(cls, instances, state)
        if expected is None:
            assert chosen is None
            assert new_state == state
            continue
        assert chosen.instance_id == expected.instance_id
        assert new_state == AssociationState(prev_class=cls, prev_center=expected.center)
        same = state.prev_class == cls and state.prev_center is not None
        assert branch == (ASSOCIATION_BRANCH if same else CONFIDENCE_BRANCH)
        ties += sum(m.confidence == expected.confidence for m in instances) > 1
    assert ties > 0


class TestAssociate(unittest.TestCase):
    def test_new_class_picks_most_confident(self):
        instances = [make_instance(5, "apple", 0.4, (0, 0)), make_instance(2, "apple", 0.9, (7, 7))]
        chosen, state, branch = associate("apple", instances, AssociationState(prev_class="mug", prev_center=(0, 0)))
        self.assertEqual(chosen.instance_id, 2)
        self.assertEqual(branch, CONFIDENCE_BRANCH)
        self.assertEqual(state.prev_center, (7, 7))

    def test_confidence_tie_goes_to_lower_id(self):
        instances = [make_instance(5, "apple", 0.5, (0, 0)), make_instance(3, "apple", 0.5, (7, 7))]
        chosen, _, _ = associate("apple", instances, AssociationState())
        self.assertEqual(chosen.instance_id, 3)

    def test_repeated_class_picks_nearest_center(self):
        instances = [make_instance(1, "mug", 0.99, (7, 7)), make_instance(2, "mug", 0.1, (1, 1))]
        chosen, _, branch = associate("mug", instances, AssociationState(prev_class="mug", prev_center=(0, 0)))
        self.assertEqual(chosen.instance_id, 2)
        self.assertEqual(branch, ASSOCIATION_BRANCH)

    def test_distance_tie_goes_to_higher_confidence(self):
        instances = [make_instance(1, "mug", 0.3, (2, 0)), make_instance(4, "mug", 0.6, (0, 2))]
        chosen, _, _ = associate("mug", instances, AssociationState(prev_class="mug", prev_center=(0, 0)))
        self.assertEqual(chosen.instance_id, 4)

    def test_no_instances_keeps_state(self):
        state = AssociationState(prev_class="mug", prev_center=(3, 3))
        chosen, new_state, _ = associate("mug", [], state)
        self.assertIsNone(chosen)
        self.assertEqual(new_state, state)


class TestLocalise(unittest.TestCase):
    def setUp(self):
        self.instances = [make_instance(i, "cup", 0.1 * i, (i, i)) for i in range(1, 5)]

    def test_empty_list_gives_empty_mask(self):
        result = localise("cup", [], AssociationState(), PIXELS)
        self.assertFalse(result.mask.any())
        self.assertIsNone(result.instance)

    def test_association_mask(self):
        result = localise("cup", self.instances, AssociationState(), PIXELS)
        self.assertEqual(result.instance.instance_id, 4)
        np.testing.assert_array_equal(result.mask, self.instances[-1].mask)

    def test_random_selection_is_seeded(self):
        picks = [localise("cup", self.instances, AssociationState(), PIXELS, np.random.default_rng(3)).instance
                 for _ in range(2)]
        self.assertEqual(picks[0].instance_id, picks[1].instance_id)
        result = localise("cup", self.instances, AssociationState(), PIXELS, np.random.default_rng(3))
        self.assertEqual(result.branch, RANDOM_BRANCH)
        self.assertEqual(result.association.prev_class, "cup")


class TestHeads(unittest.TestCase):
    def test_class_decoder_without_head(self):
        decoder = ClassDecoder(input_dim=6, hidden=4, n_classes=None, dropout=0.0)
        state = decoder.initial_state(2, torch.zeros(1))
        (h, c), logits = decoder.step_class(torch.randn(2, 2), torch.randn(2, 2), torch.randn(2, 2), state)
        self.assertIsNone(logits)
        self.assertEqual(tuple(h.shape), (2, 4))

    def test_class_decoder_logits(self):
        decoder = ClassDecoder(input_dim=6, hidden=4, n_classes=5, dropout=0.0)
        state = decoder.initial_state(3, torch.zeros(1))
        _, logits = decoder.step_class(torch.randn(3, 2), torch.randn(3, 2), torch.randn(3, 2), state)
        self.assertEqual(tuple(logits.shape), (3, 5))

    def test_mask_decoder_matches_raster(self):
        decoder = MaskDecoder(input_dim=10, channels=4, spatial=7, pixels=28)
        self.assertEqual(tuple(decoder(torch.randn(2, 10)).shape), (2, 28, 28))


@pytest.mark.parametrize("pixels,spatial", [(28, 7), (21, 6)])
def test_mask_decoder_crops_to_raster(pixels, spatial):
    decoder = MaskDecoder(input_dim=3, channels=2, spatial=spatial, pixels=pixels)
    assert tuple(decoder(torch.randn(1, 3)).shape) == (1, pixels, pixels)
