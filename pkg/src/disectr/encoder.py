"""Shared embedding layer and M parallel ProbSparse self-attention sub-encoders.

Internally a sample is laid out as (N, d), one row per feature; ``embed`` returns
the (d, N) column layout for single records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .data import InteractionRecord
from .errors import ConfigError


def default_active_queries(n_fields: int) -> int:
    return max(1, math.ceil(math.log(n_fields)))


class EmbeddingTable(nn.Module):
    """One (N_i, d) matrix per field, shared by every consumer of the embeddings."""

    def __init__(self, cardinalities: Sequence[int], d: int, generator: torch.Generator | None = None):
        super().__init__()
        self.d = d
        self.cardinalities = list(cardinalities)
        bound = 1.0 / math.sqrt(d)
        self.tables = nn.ParameterList(
            nn.Parameter((torch.rand(n, d, generator=generator) * 2 - 1) * bound) for n in self.cardinalities
        )

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        """(B, N) integer codes -> (B, N, d)."""
        cols = [table[codes[:, i]] for i, table in enumerate(self.tables)]
        return torch.stack(cols, dim=1)


def embed(record: InteractionRecord, table: EmbeddingTable) -> torch.Tensor:
    """Feature matrix of shape (d, N); column i is row ``feature_values[i]`` of E_i."""
    codes = torch.as_tensor([record.feature_values], dtype=torch.long)
    return table(codes)[0].T


@dataclass
class AttentionDetails:
    active_mask: torch.Tensor  # (..., H, N) bool
    active_index: torch.Tensor  # (..., H, c)
    attended: torch.Tensor  # (..., N, d') per-feature rows, heads concatenated
    sparsity: torch.Tensor  # (..., H, N)


def _select_active(sparsity: torch.Tensor, n_active: int) -> tuple[torch.Tensor, torch.Tensor]:
    # stable descending sort: ties go to the lower feature index
    order = torch.sort(sparsity.detach(), dim=-1, descending=True, stable=True).indices
    index = order[..., :n_active]
    mask = torch.zeros_like(sparsity, dtype=torch.bool).scatter_(-1, index, True)
    return torch.sort(index, dim=-1).values, mask


def probsparse_attention(
    e: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    n_heads: int,
    n_active: int,
    return_details: bool = False,
    pool: str = "all",
):
    """ProbSparse self-attention over the N feature rows, mean-pooled to one d'-vector.

    e: (B, N, d). Weights are (d', d) for a single sub-encoder or (M, d', d) for a
    stack; the output is (B, d') or (B, M, d') accordingly. Queries are ranked by
    max-minus-mean scaled score; the top ``n_active`` per head attend with softmax,
    the rest take the mean of the values. The selection carries no gradient.
    ``pool="all"`` averages all N attended rows, ``pool="active"`` only the c
    softmax rows (the lazy rows still appear in the returned details).
    """
    single = w_q.dim() == 2
    if single:
        w_q, w_k, w_v = w_q[None], w_k[None], w_v[None]
    B, N, d = e.shape
    M, d_out, d_in = w_q.shape
    if d_in != d:
        raise ConfigError(f"projection expects width {d_in}, embeddings have {d}")
    if d_out % n_heads:
        raise ConfigError(f"d'={d_out} not divisible by H={n_heads}")
    if not 1 <= n_active <= N:
        raise ConfigError(f"active query count c={n_active} must lie in [1, N={N}]")
    dh = d_out // n_heads

    def heads(w):
        x = torch.einsum("bnd,med->bmne", e, w)
        return x.reshape(B, M, N, n_heads, dh).permute(0, 1, 3, 2, 4)  # (B, M, H, N, dh)

    q, k, v = heads(w_q), heads(w_k), heads(w_v)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    sparsity = scores.max(dim=-1).values - scores.mean(dim=-1)
    index, mask = _select_active(sparsity, n_active)
    full = torch.softmax(scores, dim=-1) @ v
    lazy = v.mean(dim=-2, keepdim=True).expand_as(full)
    out = torch.where(mask[..., None], full, lazy)
    attended = out.permute(0, 1, 3, 2, 4).reshape(B, M, N, d_out)
    if pool == "all":
        z = attended.mean(dim=-2)
    elif pool == "active":
        # a row is active when any head selected it; heads can pick different rows
        row_active = mask.permute(0, 1, 3, 2)[..., None]  # (B, M, N, H, 1)
        per_head = out.permute(0, 1, 3, 2, 4) * row_active
        z = (per_head.sum(dim=2) / n_active).reshape(B, M, d_out)
    else:
        raise ConfigError(f"pool must be 'all' or 'active', got {pool!r}")
    if single:
        z, attended, mask, index, sparsity = z[:, 0], attended[:, 0], mask[:, 0], index[:, 0], sparsity[:, 0]
    if return_details:
        return z, AttentionDetails(mask, index, attended, sparsity)
    return z


@dataclass
class EncoderOutput:
    Z_tilde: torch.Tensor  # (B, M, d')
    active_query_sets: torch.Tensor  # (B, M, H, c)


class SubEncoders(nn.Module):
    """M stacked (W_q, W_k, W_v) triples of shape (d', d) with d' = H d."""

    def __init__(
        self,
        M: int,
        d: int,
        n_heads: int,
        n_active: int,
        generator: torch.Generator | None = None,
        pool: str = "all",
    ):
        super().__init__()
        if M < 1:
            raise ConfigError("need at least one sub-encoder")
        self.M, self.d, self.n_heads, self.n_active, self.pool = M, d, n_heads, n_active, pool
        d_out = n_heads * d
        bound = 1.0 / math.sqrt(d)

        def init():
            return nn.Parameter((torch.rand(M, d_out, d, generator=generator) * 2 - 1) * bound)

        self.w_q, self.w_k, self.w_v = init(), init(), init()

    @property
    def d_out(self) -> int:
        return self.n_heads * self.d

    def forward(self, e: torch.Tensor) -> EncoderOutput:
        z, details = probsparse_attention(
            e, self.w_q, self.w_k, self.w_v, self.n_heads, self.n_active, return_details=True, pool=self.pool
        )
        return EncoderOutput(z, details.active_index)


def encode(record: InteractionRecord, table: EmbeddingTable, sub_encoders: SubEncoders) -> EncoderOutput:
    codes = torch.as_tensor([record.feature_values], dtype=torch.long)
    out = sub_encoders(table(codes))
    return EncoderOutput(out.Z_tilde[0], out.active_query_sets[0])
