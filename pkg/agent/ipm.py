"""
Interactive perception: the class decoder, the deconvolution mask head used
when object-centric localisation is switched off, and instance association.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from models.world import MaskInstance

logger = logging.getLogger("factored_agent.agent")

CONFIDENCE_BRANCH = "confidence"
ASSOCIATION_BRANCH = "association"
RANDOM_BRANCH = "random"

LSTMState = Tuple[torch.Tensor, torch.Tensor]


class ClassDecoder(nn.Module):
    """h_m = LSTM_m([v_m; x_m; a_prev]); class logits = FC_m(h_m)."""

    def __init__(self, input_dim: int, hidden: int, n_classes: Optional[int], dropout: float):
        super().__init__()
        self.hidden = hidden
        self.cell = nn.LSTMCell(input_dim, hidden)
        # No class head when a mask decoder reads the hidden state instead.
        self.head = nn.Linear(hidden, n_classes) if n_classes else None
        self.dropout = nn.Dropout(dropout)

    def initial_state(self, batch: int, like: torch.Tensor) -> LSTMState:
        zeros = like.new_zeros((batch, self.hidden))
        return zeros, zeros.clone()

    def step_class(self, visual: torch.Tensor, language: torch.Tensor, action: torch.Tensor,
                   state: LSTMState) -> Tuple[LSTMState, Optional[torch.Tensor]]:
        h, c = self.cell(torch.cat([visual, language, action], dim=1), state)
        if self.head is None:
            return (h, c), None
        return (h, c), self.head(self.dropout(h))


class MaskDecoder(nn.Module):
    """Upsamples [u; h] through two transposed convolutions to per-pixel mask logits."""

    def __init__(self, input_dim: int, channels: int, spatial: int, pixels: int):
        super().__init__()
        self.channels = channels
        self.spatial = spatial
        self.pixels = pixels
        self.fc = nn.Linear(input_dim, channels * spatial * spatial)
        self.deconv = nn.Sequential(
            nn.ReLU(),
            nn.ConvTranspose2d(channels, channels // 2 or 1, kernel_size=4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(channels // 2 or 1, 1, kernel_size=4, stride=2, padding=1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        grid = self.fc(features).view(-1, self.channels, self.spatial, self.spatial)
        logits = self.deconv(grid)[:, 0]
        return logits[:, :self.pixels, :self.pixels]


@dataclass(frozen=True)
class AssociationState:
    """Class and center of the previous interaction; both None until the first one."""

    prev_class: Optional[str] = None
    prev_center: Optional[Tuple[float, float]] = None


@dataclass(frozen=True)
class Localisation:
    mask: np.ndarray
    instance: Optional[MaskInstance]
    branch: str
    association: AssociationState


def associate(cls: str, instances: Sequence[MaskInstance],
              state: AssociationState) -> Tuple[Optional[MaskInstance], AssociationState, str]:
    """
    Two-way instance selection.

    A class that differs from the previous one picks the most confident
    instance (ties: lower instance id). A repeated class picks the instance
    whose center is nearest the previous center (ties: higher confidence,
    then lower instance id). With no instances nothing is chosen and the state
    is returned unchanged.
    """
    same_class = state.prev_class is not None and state.prev_class == cls and state.prev_center is not None
    branch = ASSOCIATION_BRANCH if same_class else CONFIDENCE_BRANCH
    if not instances:
        return None, state, branch
    if same_class:
        px, py = state.prev_center
        chosen = min(instances, key=lambda m: (
            (m.center[0] - px) ** 2 + (m.center[1] - py) ** 2, -m.confidence, m.instance_id,
        ))
    else:
        chosen = min(instances, key=lambda m: (-m.confidence, m.instance_id))
    return chosen, AssociationState(prev_class=cls, prev_center=chosen.center), branch


def localise(cls: str, instances: List[MaskInstance], state: AssociationState, pixels: int,
             rng: Optional[np.random.Generator] = None) -> Localisation:
    """
    Mask for the predicted class.

    ``instances`` come from the segmenter stand-in. When ``rng`` is given
    association is replaced by a uniformly random visible instance. An empty
    instance list yields an all-false mask, which the environment rejects.
    """
    empty = np.zeros((pixels, pixels), dtype=bool)
    if rng is not None:
        if not instances:
            return Localisation(empty, None, RANDOM_BRANCH, state)
        chosen = instances[int(rng.integers(0, len(instances)))]
        return Localisation(chosen.mask, chosen, RANDOM_BRANCH,
                            AssociationState(prev_class=cls, prev_center=chosen.center))
    chosen, new_state, branch = associate(cls, instances, state)
    if chosen is None:
        logger.debug(f"No visible instance of '{cls}' to localise")
        return Localisation(empty, None, branch, new_state)
    return Localisation(chosen.mask, chosen, branch, new_state)
