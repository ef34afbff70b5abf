"""Prototype clustering, pairwise weak supervision and the discrepancy regulariser.

Batched tensors throughout: interest sets are (B, M, d'), shared-set masks (B, M).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

EPS = 1e-12


def l2_normalize(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


class PrototypeBank(nn.Module):
    def __init__(self, M: int, d_out: int, generator: torch.Generator | None = None):
        super().__init__()
        self.Z_p = nn.Parameter(torch.randn(M, d_out, generator=generator) / math.sqrt(d_out))

    def forward(self) -> torch.Tensor:
        return self.Z_p


@dataclass
class ClusteredInterests:
    Z_hat: torch.Tensor  # (B, M, d')
    P: torch.Tensor  # (B, M, M), P[b, i, j] = p_{j|i}
    n_degenerate: int = 0


def cluster_project(
    Z_tilde: torch.Tensor,
    prototypes: torch.Tensor,
    temperature: float = 1.0,
    mode: str = "softmax",
) -> ClusteredInterests:
    """Project encoder outputs onto prototypes by cosine similarity.

    ``mode="softmax"`` normalises cosines with a temperature softmax;
    ``mode="raw"`` divides each cosine by the row sum of cosines, which is
    undefined when that sum crosses zero.
    """
    n_degenerate = int((Z_tilde.detach().norm(dim=-1) < EPS).sum()) + int(
        (prototypes.detach().norm(dim=-1) < EPS).sum()
    )
    cos = l2_normalize(Z_tilde) @ l2_normalize(prototypes).transpose(-1, -2)
    if mode == "softmax":
        P = torch.softmax(cos / temperature, dim=-1)
    elif mode == "raw":
        P = cos / cos.sum(dim=-1, keepdim=True)
    else:
        raise ValueError(f"unknown projection mode {mode!r}")
    Z_hat = torch.einsum("...ik,...id->...kd", P, Z_tilde)
    return ClusteredInterests(Z_hat, P, n_degenerate)


@dataclass
class SharedSet:
    """Boolean membership of each interest in the shared set A; the complement is A_bar.

    For a batched (B, M) mask the index lists are per pair, except that a batch of
    one is reported as a single list.
    """

    mask: torch.Tensor  # (B, M) or (M,)

    @staticmethod
    def _indices(mask: torch.Tensor):
        if mask.dim() == 2 and mask.shape[0] == 1:
            mask = mask[0]
        if mask.dim() == 1:
            return torch.nonzero(mask).flatten().tolist()
        return [torch.nonzero(row).flatten().tolist() for row in mask]

    @property
    def A(self):
        return self._indices(self.mask)

    @property
    def A_bar(self):
        return self._indices(~self.mask)

    @classmethod
    def from_indices(cls, indices, M: int) -> "SharedSet":
        mask = torch.zeros(M, dtype=torch.bool)
        mask[list(indices)] = True
        return cls(mask)


def pair_similarity(Z_hat_pos: torch.Tensor, Z_hat_neg: torch.Tensor) -> torch.Tensor:
    return (l2_normalize(Z_hat_pos) * l2_normalize(Z_hat_neg)).sum(dim=-1)


def select_shared(Z_hat_pos: torch.Tensor, Z_hat_neg: torch.Tensor) -> SharedSet:
    """A = the single interest with the lowest pos/neg cosine; ties go to the lowest index."""
    sim = pair_similarity(Z_hat_pos.detach(), Z_hat_neg.detach())
    idx = torch.argmin(sim, dim=-1, keepdim=True)
    mask = torch.zeros_like(sim, dtype=torch.bool).scatter_(-1, idx, True)
    return SharedSet(mask)


def select_shared_ood_easy(group_pos, group_neg, M: int) -> SharedSet:
    """A = {last interest} when the pair agrees on the affected feature's group, else empty."""
    group_pos = torch.as_tensor(group_pos)
    group_neg = torch.as_tensor(group_neg)
    same = group_pos == group_neg
    mask = torch.zeros(same.shape + (M,), dtype=torch.bool)
    mask[..., M - 1] = same
    return SharedSet(mask)


def weak_supervise(Z_hat_pos: torch.Tensor, Z_hat_neg: torch.Tensor, shared: SharedSet):
    mean = (Z_hat_pos + Z_hat_neg) / 2
    m = shared.mask[..., None]
    return torch.where(m, mean, Z_hat_pos), torch.where(m, mean, Z_hat_neg)


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, strength):
        ctx.strength = strength
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.strength * grad_output, None


def gradient_reversal(x: torch.Tensor, strength: float = 1.0) -> torch.Tensor:
    return _GradientReversal.apply(x, strength)


@dataclass
class WeakLoss:
    """``value`` is CE on the last row minus CE on the others; its gradient is the adversarial one.

    Through ``value`` the classifier weights minimise every CE term while the
    interest rows i < M receive sign-flipped gradients. ``classifier_objective``
    is the plain sum of CE terms, whose gradient the classifier weights follow.
    """

    value: torch.Tensor
    classifier_objective: torch.Tensor
    per_row_ce: torch.Tensor


def weak_classifier_loss(Z: torch.Tensor, group, W_weak: torch.Tensor, strength: float = 1.0) -> WeakLoss:
    """Z: (B, M, d'); group: (B,) class of the affected feature; W_weak: (n_classes, d')."""
    M = Z.shape[-2]
    rows = torch.cat([gradient_reversal(Z[..., : M - 1, :], strength), Z[..., M - 1 :, :]], dim=-2)
    logits = rows @ W_weak.T  # (B, M, n_classes)
    target = torch.as_tensor(group, dtype=torch.long)[..., None].expand(logits.shape[:-1])
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1), reduction="none")
    ce = ce.reshape(logits.shape[:-1])
    objective = ce.sum(dim=-1)
    value_fwd = ce[..., M - 1] - ce[..., : M - 1].sum(dim=-1)
    value = objective + (value_fwd - objective).detach()
    return WeakLoss(value, objective, ce)


def discrepancy_loss(Z_pos: torch.Tensor, Z_neg: torch.Tensor) -> torch.Tensor:
    """Sum of cosines over all interest pairs i < j, in both samples. Per-pair shape (B,)."""
    total = 0
    for Z in (Z_pos, Z_neg):
        Zn = l2_normalize(Z)
        gram = Zn @ Zn.transpose(-1, -2)
        M = gram.shape[-1]
        upper = torch.triu(torch.ones(M, M, dtype=torch.bool), diagonal=1)
        total = total + gram[..., upper].sum(dim=-1)
    return total
