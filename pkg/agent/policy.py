"""
Rollout-time wrapper around FactoredAgent: keeps the recurrent carry, picks
actions with obstruction evasion and turns class predictions into masks.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Protocol, Tuple

import numpy as np
import torch

from agent.apm import detect_obstruction, select_action
from agent.encoders import START_ACTION, TokenFeatures
from agent.ipm import AssociationState, localise
from agent.model import FactoredAgent, LSTMState
from models.dataset import Trajectory
from models.world import NO_OBJECT, Action, ActionTag, EpisodeState
from services.gridworld import GridWorld

logger = logging.getLogger("factored_agent.agent")


class Policy(Protocol):
    def begin(self, trajectory: Trajectory) -> None: ...

    def act(self, state: EpisodeState) -> Tuple[Action, Dict[str, Any]]: ...

    def force(self, state: EpisodeState, action: Action, cls: Optional[str]) -> None: ...


@dataclass
class AgentState:
    """Recurrent carry of one rollout."""

    hidden: Dict[str, LSTMState]
    language: Dict[str, TokenFeatures]
    prev_action: int = START_ACTION
    prev_tag: Optional[ActionTag] = None
    prev_visual: Optional[torch.Tensor] = None
    association: AssociationState = field(default_factory=AssociationState)


class AgentPolicy:
    """Drives a trained FactoredAgent through the simulator."""

    def __init__(self, model: FactoredAgent, world: GridWorld, vocab):
        self.model = model.eval()
        self.world = world
        self.vocab = vocab
        self.config = model.config
        self.evasion = model.config.evasion_config()
        self.classes = list(world.config.interaction_classes)
        self._real_classes = [i for i, c in enumerate(self.classes) if c != NO_OBJECT]
        self.state: Optional[AgentState] = None
        self._rng: Optional[np.random.Generator] = None

    def begin(self, trajectory: Trajectory) -> None:
        language = trajectory.language
        goal = self.vocab.encode_goal(language)
        instructions = self.vocab.encode_instructions(language)
        with torch.no_grad():
            encoded = self.model.encode_language([goal], [instructions])
        self.state = AgentState(hidden=self.model.initial_hidden(1), language=encoded)
        self._rng = None
        if not self.config.instance_association:
            self._rng = np.random.default_rng([trajectory.layout.seed, self.config.seed])

    def _forward(self, state: EpisodeState):
        observation = torch.as_tensor(self.world.render(state), dtype=next(self.model.parameters()).dtype)
        prev = torch.as_tensor([self.state.prev_action], dtype=torch.long)
        with torch.no_grad():
            return self.model.step(observation.unsqueeze(0), self.state.language, self.state.hidden, prev)

    def act(self, state: EpisodeState) -> Tuple[Action, Dict[str, Any]]:
        out = self._forward(state)
        carry = self.state
        obstruction = (
            carry.prev_visual is not None
            and detect_obstruction(carry.prev_visual, out.raw_visual, self.evasion.epsilon)
        )
        logits = out.action_logits[0]
        tag, excluded = select_action(logits, obstruction, carry.prev_tag, self.evasion)
        top = torch.topk(logits, 3)
        record: Dict[str, Any] = {
            "apm": {
                "top3": [[int(i), float(v)] for v, i in zip(top.values, top.indices)],
                "obstruction": bool(obstruction),
                "excluded": excluded,
            },
        }

        mask = None
        if tag.is_interaction:
            mask, record["ipm"] = self._interaction_mask(state, out)

        carry.hidden = out.hidden
        carry.prev_visual = out.raw_visual
        carry.prev_action = tag.index
        carry.prev_tag = tag
        return Action(tag, mask), record

    def _interaction_mask(self, state: EpisodeState, out) -> Tuple[np.ndarray, Dict[str, Any]]:
        if out.class_logits is None:
            mask = (torch.sigmoid(out.mask_logits[0]) > 0.5).cpu().numpy()
            return mask, {"mask_pixels": int(mask.sum())}
        scores = out.class_logits[0]
        class_index = max(self._real_classes, key=lambda i: float(scores[i]))
        cls = self.classes[class_index]
        instances = self.world.ground_truth_instances(state, cls)
        result = localise(cls, instances, self.state.association, self.world.size, self._rng)
        self.state.association = result.association
        return result.mask, {
            "class": cls,
            "class_id": class_index,
            "branch": result.branch,
            "instance_id": None if result.instance is None else result.instance.instance_id,
            "confidence": None if result.instance is None else result.instance.confidence,
        }

    def force(self, state: EpisodeState, action: Action, cls: Optional[str]) -> None:
        """Advance the carry along a demonstrated step instead of the model's own choice."""
        out = self._forward(state)
        carry = self.state
        carry.hidden = out.hidden
        carry.prev_visual = out.raw_visual
        carry.prev_action = action.tag.index
        carry.prev_tag = action.tag
        if action.mask is not None and cls is not None and action.mask.any():
            rows, cols = np.nonzero(action.mask)
            carry.association = AssociationState(prev_class=cls,
                                                 prev_center=(float(rows.mean()), float(cols.mean())))
