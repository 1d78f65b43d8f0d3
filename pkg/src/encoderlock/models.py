"""Encoder and downstream-head architectures."""

from __future__ import annotations

from collections.abc import Sequence

import torch
from torch import nn


class ToyEncoder(nn.Module):
    """Small VGG-style trunk for 32x32x3 inputs (~89k weights).

    Activations are ReLU6 by default, as in MobileNet-style encoders.
    """

    def __init__(self, feature_dim: int = 64, activation: str = "relu6"):
        super().__init__()
        act = {"relu6": nn.ReLU6, "relu": nn.ReLU}[activation]
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), act(), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), act(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), act(), nn.MaxPool2d(2),
        )
        self.fc = nn.Linear(64 * 4 * 4, feature_dim)
        self.out_act = act()
        self.feature_dim = feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x).flatten(1)
        return self.out_act(self.fc(h))


def build_head(in_dim: int, num_classes: int, depth: int = 1, hidden_dim: int | None = None) -> nn.Sequential:
    """Fully connected stack: ``depth`` linear layers, ReLU between them."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if depth == 1:
        if hidden_dim is not None:
            raise ValueError("a depth-1 head has no hidden layer")
        return nn.Sequential(nn.Linear(in_dim, num_classes))
    if hidden_dim is None:
        raise ValueError("hidden_dim is required for depth > 1")
    layers: list[nn.Module] = []
    width = in_dim
    for _ in range(depth - 1):
        layers += [nn.Linear(width, hidden_dim), nn.ReLU()]
        width = hidden_dim
    layers.append(nn.Linear(width, num_classes))
    return nn.Sequential(*layers)


class ConstantEncoder(nn.Module):
    """Emits the same feature vector for every input. Used as an information-free control."""

    def __init__(self, feature_dim: int = 64, value: float = 1.0):
        super().__init__()
        self.register_buffer("value", torch.full((feature_dim,), float(value)))
        self.feature_dim = feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.value.expand(x.shape[0], -1)


@torch.no_grad()
def extract_features(encoder: nn.Module, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    was_training = encoder.training
    encoder.eval()
    chunks: Sequence[torch.Tensor] = [encoder(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    encoder.train(was_training)
    return torch.cat(list(chunks)) if chunks else torch.empty(0)
