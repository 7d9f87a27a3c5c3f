"""
Language encoders with per-stream dot-product attention, the shared visual
encoder and the previous-action embedding.
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from models.errors import ShapeMismatchError, VocabularyError
from models.world import N_ACTION

START_ACTION = N_ACTION


@dataclass
class TokenFeatures:
    """Per-token features (B x T x 2L) and the non-padding mask (B x T)."""

    features: torch.Tensor
    mask: torch.Tensor

    @property
    def n_tokens(self) -> int:
        return self.features.shape[1]


def pad_token_batch(sequences: Sequence[Sequence[int]], pad_id: int = 0) -> Tuple[torch.Tensor, torch.Tensor]:
    """Right-pad id sequences; returns (ids B x T, lengths B). Empty sequences are allowed."""
    width = max([len(s) for s in sequences] + [1])
    ids = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    for i, seq in enumerate(sequences):
        if len(seq):
            ids[i, :len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
    lengths = torch.as_tensor([len(s) for s in sequences], dtype=torch.long)
    return ids, lengths


class LanguageEncoder(nn.Module):
    """Token embedding followed by a bidirectional LSTM."""

    def __init__(self, vocab_size: int, token_emb: int, hidden: int, pad_id: int = 0):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, token_emb, padding_idx=pad_id)
        self.lstm = nn.LSTM(token_emb, hidden, batch_first=True, bidirectional=True)
        self.out_dim = 2 * hidden

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> TokenFeatures:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise VocabularyError(f"token id outside [0, {self.vocab_size})")
        batch, width = ids.shape
        mask = torch.arange(width).unsqueeze(0) < lengths.unsqueeze(1)
        embedded = self.embedding(ids)
        packed = pack_padded_sequence(embedded, lengths.clamp(min=1).cpu(), batch_first=True, enforce_sorted=False)
        output, _ = self.lstm(packed)
        features, _ = pad_packed_sequence(output, batch_first=True, total_length=width)
        features = features * mask.unsqueeze(-1).to(features.dtype)
        return TokenFeatures(features=features, mask=mask)

    def encode(self, tokens: Sequence[int]) -> TokenFeatures:
        ids, lengths = pad_token_batch([tokens])
        return self(ids, lengths)


class DotAttention(nn.Module):
    """Softmax over (W q) . x_j on non-padding tokens; rows without tokens attend to nothing."""

    def __init__(self, query_dim: int, feature_dim: int):
        super().__init__()
        self.query = nn.Linear(query_dim, feature_dim, bias=False)

    def forward(self, tokens: TokenFeatures, query: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        projected = self.query(query)
        scores = torch.bmm(tokens.features, projected.unsqueeze(-1)).squeeze(-1)
        mask = tokens.mask
        has_tokens = mask.any(dim=1, keepdim=True)
        scores = scores.masked_fill(~mask, float("-inf"))
        scores = torch.where(has_tokens, scores, torch.zeros_like(scores))
        weights = F.softmax(scores, dim=1) * mask.to(scores.dtype)
        attended = torch.bmm(weights.unsqueeze(1), tokens.features).squeeze(1)
        return attended, weights


class VisualEncoder(nn.Module):
    """Three convolutions with stride schedule (2, 2, 1): 28x28 in, 7x7 out by default."""

    def __init__(self, in_channels: int, channels: int, pixels: int):
        super().__init__()
        self.in_channels = in_channels
        self.pixels = pixels
        self.layers = nn.Sequential(
            nn.Conv2d(in_channels, channels, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, kernel_size=3, stride=1, padding=1),
            nn.ReLU(),
        )
        self.out_channels = channels
        self.spatial = math.ceil(math.ceil(pixels / 2) / 2)

    def forward(self, observations: torch.Tensor) -> torch.Tensor:
        expected = (self.in_channels, self.pixels, self.pixels)
        if tuple(observations.shape[1:]) != expected:
            raise ShapeMismatchError(f"observation shape {tuple(observations.shape[1:])} != {expected}")
        return self.layers(observations)


class ActionEmbedding(nn.Module):
    """13 action rows plus one start-of-episode row."""

    def __init__(self, dim: int):
        super().__init__()
        self.table = nn.Embedding(N_ACTION + 1, dim)

    def forward(self, previous: torch.Tensor) -> torch.Tensor:
        return self.table(previous)
