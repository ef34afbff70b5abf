"""Attentive interest aggregation, the BPR ranking loss and the joint training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F


class AggregatorParams(nn.Module):
    def __init__(self, h: int, d_out: int, generator: torch.Generator | None = None):
        super().__init__()
        bound = 1.0 / math.sqrt(d_out)
        self.W_agg = nn.Parameter((torch.rand(h, d_out, generator=generator) * 2 - 1) * bound)
        self.W_ctr = nn.Parameter((torch.rand(h * d_out, generator=generator) * 2 - 1) / math.sqrt(h * d_out))


@dataclass
class Aggregated:
    logit: torch.Tensor  # (B,)
    probability: torch.Tensor  # (B,)
    attention: torch.Tensor  # (B, h, M)


def aggregate(Z: torch.Tensor, W_agg: torch.Tensor, W_ctr: torch.Tensor) -> Aggregated:
    """Z: (B, M, d'). Softmax over interests per head, flatten the h pooled rows, linear head."""
    attention = torch.softmax(torch.einsum("hd,bmd->bhm", W_agg, Z), dim=-1)
    z_agg = (attention @ Z).flatten(start_dim=-2)
    logit = z_agg @ W_ctr
    return Aggregated(logit, torch.sigmoid(logit), attention)


def bpr_loss(logit_pos: torch.Tensor, logit_neg: torch.Tensor) -> torch.Tensor:
    """Elementwise -log sigmoid(pos - neg) as softplus(neg - pos)."""
    return F.softplus(logit_neg - logit_pos)


@dataclass
class LossWeights:
    alpha: float = 0.1
    lam: float = 1e-5
    beta: float = 0.1

    def __post_init__(self):
        for k in ("alpha", "lam", "beta"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict[str, torch.Tensor] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def l2_penalty(params) -> torch.Tensor:
    return sum((p * p).sum() for p in params)


def joint_loss(
    logit_pos: torch.Tensor,
    logit_neg: torch.Tensor,
    weights: LossWeights,
    params,
    dis: torch.Tensor | None = None,
    weak: torch.Tensor | None = None,
    bpr_on: str = "logit",
) -> LossBreakdown:
    """mean BPR + alpha mean L_dis + lam sum theta^2 (+ beta mean L_weak).

    Each weighted term is stored in the breakdown already multiplied by its weight,
    so the terms add up to the total. Terms that are switched off are omitted.
    """
    if bpr_on == "logit":
        bpr = bpr_loss(logit_pos, logit_neg).mean()
    elif bpr_on == "probability":
        bpr = bpr_loss(torch.sigmoid(logit_pos), torch.sigmoid(logit_neg)).mean()
    else:
        raise ValueError(f"bpr_on must be 'logit' or 'probability', got {bpr_on!r}")
    terms = {"bpr": bpr}
    if dis is not None and weights.alpha > 0:
        terms["dis"] = weights.alpha * dis.mean()
    if weights.lam > 0:
        terms["l2"] = weights.lam * l2_penalty(params)
    if weak is not None and weights.beta > 0:
        terms["weak"] = weights.beta * weak.mean()
    total = sum(terms.values())
    return LossBreakdown(total, terms)


def attention_ranks(attention: torch.Tensor, head: int = 0) -> list[float]:
    """Mean rank (1 = least attended, M = most) of each interest over a probe batch."""
    scores = attention[:, head, :].detach()
    ranks = scores.argsort(dim=-1, stable=True).argsort(dim=-1, stable=True) + 1
    return ranks.to(torch.float64).mean(dim=0).tolist()
