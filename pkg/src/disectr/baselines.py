"""Entangled reference models: second-order FM and an embedding MLP."""

from __future__ import annotations

import math

import torch
from torch import nn

from .encoder import EmbeddingTable
from .model import CTRModel, ModelConfig


def fm_interaction(v: torch.Tensor) -> torch.Tensor:
    """Sum over field pairs i < j of <v_i, v_j> via the square-of-sum identity. v: (B, N, d)."""
    return 0.5 * (v.sum(dim=1).pow(2) - v.pow(2).sum(dim=1)).sum(dim=-1)


def fm_forward(codes: torch.Tensor, bias: torch.Tensor, linear: EmbeddingTable, latent: EmbeddingTable) -> torch.Tensor:
    return bias + linear(codes).sum(dim=(1, 2)) + fm_interaction(latent(codes))


class FM(CTRModel):
    def __init__(self, cardinalities, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.cardinalities = list(cardinalities)
        self.bias = nn.Parameter(torch.zeros(()))
        self.linear = EmbeddingTable(cardinalities, 1, generator)
        self.embedding = EmbeddingTable(cardinalities, config.d, generator)

    def score(self, codes: torch.Tensor) -> torch.Tensor:
        return fm_forward(codes, self.bias, self.linear, self.embedding)


class MLP(CTRModel):
    """Concatenated field embeddings (width N d) through ReLU layers to one logit."""

    def __init__(self, cardinalities, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.cardinalities = list(cardinalities)
        self.embedding = EmbeddingTable(cardinalities, config.d, generator)
        sizes = [len(cardinalities) * config.d] + list(config.hidden) + [1]
        self.layers = nn.ModuleList()
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            layer = nn.Linear(fan_in, fan_out)
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                layer.weight.copy_((torch.rand(fan_out, fan_in, generator=generator) * 2 - 1) * bound)
                layer.bias.copy_((torch.rand(fan_out, generator=generator) * 2 - 1) * bound)
            self.layers.append(layer)

    def score(self, codes: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.embedding(codes).flatten(start_dim=1), self.layers)


def mlp_forward(x: torch.Tensor, layers) -> torch.Tensor:
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = torch.relu(x)
    return x.squeeze(-1)
