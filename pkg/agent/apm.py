"""
Action policy: the action decoder and inference-time obstruction evasion.
"""

from typing import Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from models.config import EvasionConfig
from models.errors import ShapeMismatchError
from models.world import ACTIONS, N_ACTION, ActionTag

LSTMState = Tuple[torch.Tensor, torch.Tensor]
ArrayLike = Union[np.ndarray, torch.Tensor]


class ActionDecoder(nn.Module):
    """h_a = LSTM_a(u_a) with u_a = [v_a; x_a; a_prev]; logits = FC_a([u_a; h_a])."""

    def __init__(self, input_dim: int, hidden: int, dropout: float):
        super().__init__()
        self.hidden = hidden
        self.cell = nn.LSTMCell(input_dim, hidden)
        self.head = nn.Linear(input_dim + hidden, N_ACTION)
        self.dropout = nn.Dropout(dropout)

    def initial_state(self, batch: int, like: torch.Tensor) -> LSTMState:
        zeros = like.new_zeros((batch, self.hidden))
        return zeros, zeros.clone()

    def step_action(self, visual: torch.Tensor, language: torch.Tensor, action: torch.Tensor,
                    state: LSTMState) -> Tuple[LSTMState, torch.Tensor, torch.Tensor]:
        """Returns the new state, the action logits and u_a."""
        u_a = torch.cat([visual, language, action], dim=1)
        h, c = self.cell(u_a, state)
        logits = self.head(torch.cat([u_a, self.dropout(h)], dim=1))
        return (h, c), logits, u_a


def feature_distance(v_prev: ArrayLike, v_t: ArrayLike) -> float:
    """Squared Euclidean distance over all elements."""
    if tuple(v_prev.shape) != tuple(v_t.shape):
        raise ShapeMismatchError(f"feature shapes differ: {tuple(v_prev.shape)} vs {tuple(v_t.shape)}")
    if isinstance(v_prev, torch.Tensor):
        return float(((v_prev.detach().double() - torch.as_tensor(v_t).detach().double()) ** 2).sum())
    diff = np.asarray(v_prev, dtype=np.float64) - np.asarray(v_t, dtype=np.float64)
    return float(np.sum(diff * diff))


def detect_obstruction(v_prev: ArrayLike, v_t: ArrayLike, epsilon: float) -> bool:
    return feature_distance(v_prev, v_t) < epsilon


def select_action(logits: ArrayLike, obstruction: bool, prev_action: Optional[ActionTag],
                  config: EvasionConfig) -> Tuple[ActionTag, Optional[int]]:
    """
    Argmax action, excluding the previous action for this step only when an
    obstruction is detected. Returns the action and the excluded index.
    """
    scores = np.asarray(logits.detach().cpu() if isinstance(logits, torch.Tensor) else logits,
                        dtype=np.float64).reshape(-1)
    if scores.shape[0] != N_ACTION:
        raise ShapeMismatchError(f"expected {N_ACTION} action logits, got {scores.shape[0]}")
    gate = (
        obstruction
        and config.enabled
        and prev_action is not None
        and (not config.navigation_only or prev_action.is_navigation)
    )
    if not gate:
        return ACTIONS[int(np.argmax(scores))], None
    excluded = prev_action.index
    scores = scores.copy()
    scores[excluded] = -np.inf
    return ACTIONS[int(np.argmax(scores))], excluded
