"""Model configuration, the assembled DiseCTR network and the model factory."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import torch
from torch import nn

from .aggregator import AggregatorParams, LossBreakdown, LossWeights, aggregate, joint_loss
from .disentangler import (
    PrototypeBank,
    cluster_project,
    discrepancy_loss,
    select_shared,
    select_shared_ood_easy,
    weak_classifier_loss,
    weak_supervise,
)
from .encoder import EmbeddingTable, SubEncoders, default_active_queries
from .errors import ConfigError

MODEL_KINDS = ("disectr", "fm", "mlp")
ABLATION_TOGGLES = ("prototypes", "weak_supervision", "discrepancy")


@dataclass
class ModelConfig:
    kind: str = "disectr"
    M: int = 4
    H: int = 2
    h: int = 8
    d: int = 8
    c: int | None = None
    pool: str = "all"
    tau: float = 1.0
    projection: str = "softmax"
    bpr_on: str = "logit"
    prototypes: bool = True
    weak_supervision: bool = True
    discrepancy: bool = True
    weak_mode: str = "adaptive"
    affected_field: int | None = None
    affected_threshold: int | None = None
    n_weak_classes: int = 2
    reversal_strength: float = 1.0
    hidden: list[int] = field(default_factory=lambda: [64, 32])

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.weak_mode not in ("adaptive", "ood_easy"):
            raise ConfigError(f"weak_mode must be 'adaptive' or 'ood_easy', got {self.weak_mode!r}")
        if self.weak_mode == "ood_easy" and (self.affected_field is None or self.affected_threshold is None):
            raise ConfigError("ood_easy weak supervision needs affected_field and affected_threshold")
        for k in ("M", "H", "h", "d"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")

    @property
    def d_out(self) -> int:
        return self.H * self.d

    def ablated(self, toggles) -> "ModelConfig":
        bad = set(toggles) - set(ABLATION_TOGGLES)
        if bad:
            raise ConfigError(f"unknown ablation toggles {sorted(bad)}; choose from {ABLATION_TOGGLES}")
        return replace(self, **{t: False for t in toggles})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class CTRModel(nn.Module):
    """Common surface: ``score`` gives logits for (B, N) codes, ``pair_loss`` the training objective."""

    config: ModelConfig

    def score(self, codes: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def predict(self, codes: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.score(codes))

    def pair_loss(self, pos_codes: torch.Tensor, neg_codes: torch.Tensor, weights: LossWeights) -> LossBreakdown:
        return joint_loss(
            self.score(pos_codes), self.score(neg_codes), weights, self.parameters(), bpr_on=self.config.bpr_on
        )


@dataclass
class PairForward:
    logit_pos: torch.Tensor
    logit_neg: torch.Tensor
    Z_hat_pos: torch.Tensor
    Z_hat_neg: torch.Tensor
    Z_pos: torch.Tensor
    Z_neg: torch.Tensor
    shared_mask: torch.Tensor | None
    attention_pos: torch.Tensor
    attention_neg: torch.Tensor


class DiseCTR(CTRModel):
    def __init__(self, cardinalities, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.cardinalities = list(cardinalities)
        N = len(self.cardinalities)
        c = config.c if config.c is not None else default_active_queries(N)
        self.embedding = EmbeddingTable(self.cardinalities, config.d, generator)
        self.encoder = SubEncoders(config.M, config.d, config.H, c, generator, config.pool)
        self.prototypes = PrototypeBank(config.M, config.d_out, generator) if config.prototypes else None
        self.aggregator = AggregatorParams(config.h, config.d_out, generator)
        if config.weak_mode == "ood_easy" and config.weak_supervision:
            self.weak = nn.ParameterDict(
                {"W_weak": nn.Parameter(torch.randn(config.n_weak_classes, config.d_out, generator=generator) * 0.01)}
            )
        else:
            self.weak = None

    def interests(self, codes: torch.Tensor):
        """Encoder outputs Z~ and clustered interests Z^ for (B, N) codes."""
        Z_tilde = self.encoder(self.embedding(codes)).Z_tilde
        if self.prototypes is None:
            return Z_tilde, Z_tilde
        clustered = cluster_project(Z_tilde, self.prototypes.Z_p, self.config.tau, self.config.projection)
        return Z_tilde, clustered.Z_hat

    def forward(self, codes: torch.Tensor):
        _, Z_hat = self.interests(codes)
        return aggregate(Z_hat, self.aggregator.W_agg, self.aggregator.W_ctr)

    def score(self, codes: torch.Tensor) -> torch.Tensor:
        return self.forward(codes).logit

    def affected_group(self, codes: torch.Tensor) -> torch.Tensor:
        return (codes[:, self.config.affected_field] > self.config.affected_threshold).long()

    def pair_forward(self, pos_codes: torch.Tensor, neg_codes: torch.Tensor) -> PairForward:
        cfg = self.config
        _, Zh_pos = self.interests(pos_codes)
        _, Zh_neg = self.interests(neg_codes)
        mask = None
        if cfg.weak_supervision:
            if cfg.weak_mode == "ood_easy":
                shared = select_shared_ood_easy(self.affected_group(pos_codes), self.affected_group(neg_codes), cfg.M)
            else:
                shared = select_shared(Zh_pos, Zh_neg)
            Z_pos, Z_neg = weak_supervise(Zh_pos, Zh_neg, shared)
            mask = shared.mask
        else:
            Z_pos, Z_neg = Zh_pos, Zh_neg
        agg_pos = aggregate(Z_pos, self.aggregator.W_agg, self.aggregator.W_ctr)
        agg_neg = aggregate(Z_neg, self.aggregator.W_agg, self.aggregator.W_ctr)
        return PairForward(
            agg_pos.logit, agg_neg.logit, Zh_pos, Zh_neg, Z_pos, Z_neg, mask, agg_pos.attention, agg_neg.attention
        )

    def pair_loss(self, pos_codes, neg_codes, weights: LossWeights, weak_objective: bool = False) -> LossBreakdown:
        """Joint objective. ``weak_objective`` swaps L_weak for the classifier-side CE sum (gradient checks only)."""
        cfg = self.config
        out = self.pair_forward(pos_codes, neg_codes)
        dis = discrepancy_loss(out.Z_hat_pos, out.Z_hat_neg) if cfg.discrepancy else None
        weak = None
        if self.weak is not None:
            W = self.weak["W_weak"]
            lp = weak_classifier_loss(out.Z_pos, self.affected_group(pos_codes), W, cfg.reversal_strength)
            ln = weak_classifier_loss(out.Z_neg, self.affected_group(neg_codes), W, cfg.reversal_strength)
            if weak_objective:
                weak = lp.classifier_objective + ln.classifier_objective
            else:
                weak = lp.value + ln.value
        return joint_loss(
            out.logit_pos, out.logit_neg, weights, self.parameters(), dis=dis, weak=weak, bpr_on=cfg.bpr_on
        )


def build_model(cardinalities, config: ModelConfig, seed: int = 0, dtype=torch.float32) -> CTRModel:
    from .baselines import FM, MLP

    gen = torch.Generator().manual_seed(int(seed))
    if config.kind == "disectr":
        model = DiseCTR(cardinalities, config, gen)
    elif config.kind == "fm":
        model = FM(cardinalities, config, gen)
    else:
        model = MLP(cardinalities, config, gen)
    return model.to(dtype)


def parameter_groups(model: nn.Module) -> dict[str, int]:
    """Parameter count per top-level component."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        group = name.split(".")[0]
        counts[group] = counts.get(group, 0) + p.numel()
    return counts
