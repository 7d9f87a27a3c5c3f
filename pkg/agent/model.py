"""
Composition of the two streams (or the single-stream ablation) into one
module that can be unrolled with teacher forcing or stepped during rollouts.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from agent.apm import ActionDecoder
from agent.dynamic_filters import FilterGenerator, filtered_vector
from agent.encoders import (
    START_ACTION,
    ActionEmbedding,
    DotAttention,
    LanguageEncoder,
    TokenFeatures,
    VisualEncoder,
    pad_token_batch,
)
from agent.ipm import ClassDecoder, MaskDecoder
from models.config import ModelConfig, StreamInput, WorldConfig

logger = logging.getLogger("factored_agent.agent")

IPM, APM, JOINT = "ipm", "apm", "joint"

LSTMState = Tuple[torch.Tensor, torch.Tensor]


@dataclass
class StepOutput:
    action_logits: torch.Tensor
    class_logits: Optional[torch.Tensor]
    mask_logits: Optional[torch.Tensor]
    hidden: Dict[str, LSTMState]
    raw_visual: torch.Tensor
    attention: Dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass
class UnrollOutput:
    action_logits: torch.Tensor
    class_logits: Optional[torch.Tensor]
    mask_logits: Optional[torch.Tensor]


class FactoredAgent(nn.Module):
    """
    Two streams by default: the perception stream predicts the interaction
    class (or a mask when object-centric localisation is off) and the policy
    stream predicts the action. Each stream has its own language encoder,
    attention and filter generator; the visual encoder and the previous-action
    embedding are shared.
    """

    def __init__(self, config: ModelConfig, vocab_size: int, world: WorldConfig, pad_id: int = 0, sep_id: int = 1):
        super().__init__()
        self.config = config
        self.world = world
        self.pad_id = pad_id
        self.sep_id = sep_id
        dims = config.dims
        language_dim = 2 * dims.enc_hidden

        self.visual = VisualEncoder(world.channels.n_channels, dims.visual_channels, world.pixels)
        self.visual_dropout = nn.Dropout(dims.dropout)
        self.action_embedding = ActionEmbedding(dims.action_emb)
        self.streams: Tuple[str, ...] = (IPM, APM) if config.factorized else (JOINT,)

        self.language = nn.ModuleDict({
            s: LanguageEncoder(vocab_size, dims.token_emb, dims.enc_hidden, pad_id) for s in self.streams
        })
        self.attention = nn.ModuleDict({s: DotAttention(dims.dec_hidden, language_dim) for s in self.streams})
        spatial = self.visual.spatial
        if config.dynamic_filters:
            self.filters = nn.ModuleDict({
                s: FilterGenerator(language_dim, dims.n_filters, dims.visual_channels, dims.filter_kernel, s)
                for s in self.streams
            })
            visual_dim = dims.n_filters * spatial * spatial
        else:
            self.filters = None
            visual_dim = dims.visual_channels
        u_dim = visual_dim + language_dim + dims.action_emb
        n_classes = len(world.interaction_classes)

        self.action_decoder = ActionDecoder(u_dim, dims.dec_hidden, dims.dropout)
        self.class_decoder = None
        self.class_head = None
        self.mask_decoder = None
        if config.factorized:
            self.class_decoder = ClassDecoder(u_dim, dims.dec_hidden, n_classes if config.ocl else None, dims.dropout)
        elif config.ocl:
            self.class_head = nn.Linear(dims.dec_hidden, n_classes)
        if not config.ocl:
            self.mask_decoder = MaskDecoder(u_dim + dims.dec_hidden, dims.visual_channels, spatial, world.pixels)
        self.head_dropout = nn.Dropout(dims.dropout)

    # ---------------------------------------------------------------- language
    def _select(self, source: StreamInput, goal: Sequence[int], instructions: Sequence[int]) -> List[int]:
        if source == StreamInput.GOAL:
            return list(goal)
        if source == StreamInput.INSTRUCTIONS:
            return list(instructions)
        if goal and instructions:
            return list(goal) + [self.sep_id] + list(instructions)
        return list(goal) + list(instructions)

    def stream_tokens(self, goal: Sequence[int], instructions: Sequence[int]) -> Dict[str, List[int]]:
        """Token ids each stream reads, after withholding any ablated language source."""
        ablation = self.config.input_ablation
        if ablation == "goal_only":
            instructions = []
        elif ablation == "instructions_only":
            goal = []
        if not self.config.factorized:
            return {JOINT: self._select(StreamInput.BOTH, goal, instructions)}
        inputs = self.config.stream_inputs
        return {
            IPM: self._select(inputs.ipm, goal, instructions),
            APM: self._select(inputs.apm, goal, instructions),
        }

    def encode_language(self, goals: Sequence[Sequence[int]],
                        instructions: Sequence[Sequence[int]]) -> Dict[str, TokenFeatures]:
        per_sample = [self.stream_tokens(g, i) for g, i in zip(goals, instructions)]
        encoded = {}
        for s in self.streams:
            ids, lengths = pad_token_batch([tokens[s] for tokens in per_sample], self.pad_id)
            encoded[s] = self.language[s](ids.to(self.device), lengths)
        return encoded

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    # -------------------------------------------------------------------- step
    def initial_hidden(self, batch: int) -> Dict[str, LSTMState]:
        like = next(self.parameters())
        hidden = {s: self.action_decoder.initial_state(batch, like) for s in self.streams if s != IPM}
        if self.class_decoder is not None:
            hidden[IPM] = self.class_decoder.initial_state(batch, like)
        return hidden

    def step(self, observations: torch.Tensor, language: Dict[str, TokenFeatures],
             hidden: Dict[str, LSTMState], prev_action: torch.Tensor) -> StepOutput:
        raw = self.visual(observations)
        visual = self.visual_dropout(raw)
        if self.config.input_ablation == "no_vision":
            visual = torch.zeros_like(visual)
        action = self.action_embedding(prev_action)

        new_hidden: Dict[str, LSTMState] = {}
        weights: Dict[str, torch.Tensor] = {}
        class_logits = mask_logits = action_logits = None
        for s in self.streams:
            attended, weights[s] = self.attention[s](language[s], hidden[s][0])
            if self.config.input_ablation == "no_language":
                attended = torch.zeros_like(attended)
            if self.filters is not None:
                v_hat = filtered_vector(visual, self.filters[s](attended))
            else:
                v_hat = visual.mean(dim=(2, 3))

            if s == IPM:
                new_hidden[s], class_logits = self.class_decoder.step_class(v_hat, attended, action, hidden[s])
                if self.mask_decoder is not None:
                    u_m = torch.cat([v_hat, attended, action], dim=1)
                    mask_logits = self.mask_decoder(torch.cat([u_m, self.head_dropout(new_hidden[s][0])], dim=1))
                continue

            new_hidden[s], action_logits, u_a = self.action_decoder.step_action(v_hat, attended, action, hidden[s])
            if s == JOINT:
                h = self.head_dropout(new_hidden[s][0])
                if self.class_head is not None:
                    class_logits = self.class_head(h)
                else:
                    mask_logits = self.mask_decoder(torch.cat([u_a, h], dim=1))

        return StepOutput(
            action_logits=action_logits,
            class_logits=class_logits,
            mask_logits=mask_logits,
            hidden=new_hidden,
            raw_visual=raw,
            attention=weights,
        )

    # ------------------------------------------------------------------ unroll
    def unroll(self, observations: torch.Tensor, prev_actions: torch.Tensor,
               language: Dict[str, TokenFeatures]) -> UnrollOutput:
        """Teacher-forced pass over B x T steps; ``prev_actions[:, 0]`` is the start sentinel."""
        batch, steps = prev_actions.shape
        hidden = self.initial_hidden(batch)
        actions, classes, masks = [], [], []
        for t in range(steps):
            out = self.step(observations[:, t], language, hidden, prev_actions[:, t])
            hidden = out.hidden
            actions.append(out.action_logits)
            if out.class_logits is not None:
                classes.append(out.class_logits)
            if out.mask_logits is not None:
                masks.append(out.mask_logits)
        return UnrollOutput(
            action_logits=torch.stack(actions, dim=1),
            class_logits=torch.stack(classes, dim=1) if classes else None,
            mask_logits=torch.stack(masks, dim=1) if masks else None,
        )


def teacher_forced_actions(action_indices: Sequence[int]) -> List[int]:
    """Previous-action inputs for a demonstration: the start sentinel, then a_0 .. a_{T-2}."""
    return [START_ACTION] + list(action_indices[:-1])


def parameter_groups(model: FactoredAgent) -> Dict[str, List[nn.Parameter]]:
    """Named parameter groups used by gradient checks and logging."""
    groups: Dict[str, List[nn.Parameter]] = {
        "visual_encoder": list(model.visual.parameters()),
        "language_encoders": list(model.language.parameters()) + list(model.attention.parameters()),
        "action_embedding": list(model.action_embedding.parameters()),
        "action_decoder": list(model.action_decoder.cell.parameters()),
        "action_head": list(model.action_decoder.head.parameters()),
    }
    if model.filters is not None:
        groups["filter_generators"] = list(model.filters.parameters())
    if model.class_decoder is not None:
        groups["class_decoder"] = list(model.class_decoder.cell.parameters())
        if model.class_decoder.head is not None:
            groups["class_head"] = list(model.class_decoder.head.parameters())
    if model.class_head is not None:
        groups["class_head"] = list(model.class_head.parameters())
    if model.mask_decoder is not None:
        groups["mask_head"] = list(model.mask_decoder.parameters())
    return groups
