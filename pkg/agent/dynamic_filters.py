"""
Language-guided dynamic filters.

A generator maps an attended language vector to N_DF kernels of shape
F x k x k; the kernels are convolved with the visual features (no bias) and the
N_DF response maps are flattened into the decoder input.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from models.errors import ShapeMismatchError


@dataclass
class FilterBank:
    """Kernels B x N_DF x F x k x k and the stream that generated them."""

    kernels: torch.Tensor
    stream: str

    @property
    def n_filters(self) -> int:
        return self.kernels.shape[1]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[2]


class FilterGenerator(nn.Module):
    # One linear map whose output rows split into N_DF disjoint kernels, i.e.
    # N_DF independent fully-connected generators. No bias, so the kernels are
    # linear in the language vector.
    def __init__(self, language_dim: int, n_filters: int, channels: int, kernel: int, stream: str):
        super().__init__()
        self.n_filters = n_filters
        self.channels = channels
        self.kernel = kernel
        self.stream = stream
        self.fc = nn.Linear(language_dim, n_filters * channels * kernel * kernel, bias=False)

    def forward(self, attended: torch.Tensor) -> FilterBank:
        kernels = self.fc(attended).view(-1, self.n_filters, self.channels, self.kernel, self.kernel)
        return FilterBank(kernels=kernels, stream=self.stream)


def apply_filters(visual: torch.Tensor, bank: FilterBank) -> torch.Tensor:
    """Convolve each sample's features with its own bank; returns B x N_DF x h x w."""
    batch, channels, height, width = visual.shape
    kernels = bank.kernels
    if kernels.shape[0] != batch or kernels.shape[2] != channels:
        raise ShapeMismatchError(
            f"filter bank {tuple(kernels.shape)} does not match visual features {tuple(visual.shape)}"
        )
    n_filters, k = kernels.shape[1], kernels.shape[-1]
    responses = F.conv2d(
        visual.reshape(1, batch * channels, height, width),
        kernels.reshape(batch * n_filters, channels, k, k),
        padding=k // 2,
        groups=batch,
    )
    return responses.view(batch, n_filters, height, width)


def filtered_vector(visual: torch.Tensor, bank: FilterBank) -> torch.Tensor:
    """Concatenated response maps flattened to B x (N_DF * h * w)."""
    return apply_filters(visual, bank).flatten(start_dim=1)
