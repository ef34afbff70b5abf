"""Desk-scale generator for P(Z) P(X|Z) P(Y|X,Z) with partial interventions on one latent interest.

Each latent interest is a small categorical variable. Its group of observed fields is
emitted from lookup tables, and the click logit is an additive per-state utility.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, FeatureSchema
from .errors import ConfigError


@dataclass(frozen=True)
class WorldConfig:
    M_true: int = 4
    N: int = 9
    cardinality: int = 16
    n_states: int = 3
    n_users: int = 100
    sharpness: float = 0.85
    weight_scale: float = 1.0
    bias: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class Intervention:
    """Replaces the mechanism of exactly one interest: its prior, utility table and/or click weight."""

    target_interest: int
    prior: tuple[float, ...] | None = None
    utility: tuple[float, ...] | None = None
    click_weight: float | None = None


@dataclass
class CausalWorld:
    M_true: int
    n_states: int
    n_users: int
    cardinalities: list[int]
    feature_groups: list[list[int]]
    interest_priors: np.ndarray  # (M_true, n_states)
    emission: list[np.ndarray]  # per non-user field, (n_states, cardinality)
    utilities: np.ndarray  # (M_true, n_states)
    click_weights: np.ndarray  # (M_true,)
    bias: float
    user_field: int = 0
    field_names: list[str] = field(default_factory=list)

    @property
    def N(self) -> int:
        return len(self.cardinalities)

    @property
    def schema(self) -> FeatureSchema:
        return FeatureSchema.from_pairs(list(zip(self.field_names, self.cardinalities)), self.user_field)

    def group_of_field(self, field_index: int) -> int:
        for g, members in enumerate(self.feature_groups):
            if field_index in members:
                return g
        raise ConfigError(f"field {field_index} belongs to no interest group")

    def flip_intervention(self, target: int) -> Intervention:
        """Sign flip of one interest's click weight: its features keep their law, their effect on Y reverses."""
        return Intervention(target, click_weight=-float(self.click_weights[target]))

    def to_dict(self) -> dict:
        return {
            "M_true": self.M_true,
            "n_states": self.n_states,
            "n_users": self.n_users,
            "cardinalities": list(self.cardinalities),
            "feature_groups": [list(g) for g in self.feature_groups],
            "interest_priors": self.interest_priors.tolist(),
            "emission": [e.tolist() for e in self.emission],
            "utilities": self.utilities.tolist(),
            "click_weights": self.click_weights.tolist(),
            "bias": self.bias,
            "user_field": self.user_field,
            "field_names": list(self.field_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CausalWorld":
        return cls(
            M_true=d["M_true"],
            n_states=d["n_states"],
            n_users=d["n_users"],
            cardinalities=list(d["cardinalities"]),
            feature_groups=[list(g) for g in d["feature_groups"]],
            interest_priors=np.asarray(d["interest_priors"], dtype=np.float64),
            emission=[np.asarray(e, dtype=np.float64) for e in d["emission"]],
            utilities=np.asarray(d["utilities"], dtype=np.float64),
            click_weights=np.asarray(d["click_weights"], dtype=np.float64),
            bias=float(d["bias"]),
            user_field=d.get("user_field", 0),
            field_names=list(d["field_names"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "CausalWorld":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _partition(n_items: int, n_groups: int) -> list[list[int]]:
    sizes = [n_items // n_groups + (1 if g < n_items % n_groups else 0) for g in range(n_groups)]
    out, start = [], 0
    for s in sizes:
        out.append(list(range(start, start + s)))
        start += s
    return out


def sample_world(config: WorldConfig, rng_seed: int) -> CausalWorld:
    if config.M_true < 2:
        raise ConfigError(f"M_true={config.M_true}: need at least 2 interests for a partial intervention")
    if config.N - 1 < config.M_true:
        raise ConfigError(f"N={config.N} leaves {config.N - 1} non-user fields for {config.M_true} interests")
    if config.cardinality - 1 < config.n_states:
        raise ConfigError("cardinality too small to give every latent state its own code block")
    rng = np.random.default_rng(rng_seed)
    K = config.n_states
    groups = [[f + 1 for f in g] for g in _partition(config.N - 1, config.M_true)]

    priors = rng.dirichlet(np.full(K, 5.0), size=config.M_true)
    emission = []
    usable = config.cardinality - 1  # code 0 stays reserved for unknown values
    blocks = np.array_split(np.arange(1, config.cardinality), K)
    for _ in range(config.N - 1):
        table = np.zeros((K, config.cardinality))
        for s, block in enumerate(blocks):
            table[s, block] = config.sharpness * rng.dirichlet(np.full(len(block), 2.0))
            table[s, 1:] += (1 - config.sharpness) / usable
        emission.append(table / table.sum(axis=1, keepdims=True))

    utilities = np.linspace(-1.0, 1.0, K)[None, :].repeat(config.M_true, axis=0)
    utilities = utilities[:, :] * rng.choice([-1.0, 1.0], size=(config.M_true, 1))
    utilities = utilities + rng.normal(0.0, 0.15, size=utilities.shape)
    weights = config.weight_scale * rng.uniform(0.8, 1.6, size=config.M_true)

    names = ["user"] + [f"g{g}_f{j}" for g, members in enumerate(groups) for j in range(len(members))]
    return CausalWorld(
        M_true=config.M_true,
        n_states=K,
        n_users=config.n_users,
        cardinalities=[config.n_users + 1] + [config.cardinality] * (config.N - 1),
        feature_groups=groups,
        interest_priors=priors,
        emission=emission,
        utilities=utilities,
        click_weights=weights,
        bias=float(config.bias),
        user_field=0,
        field_names=names,
    )


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw; ``probs`` is (..., K) broadcastable against ``u``."""
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    return (u[..., None] > cdf).sum(axis=-1)


def sample_latents(world: CausalWorld, n: int, rng: np.random.Generator, intervention: Intervention | None = None):
    priors = world.interest_priors.copy()
    if intervention is not None and intervention.prior is not None:
        priors[intervention.target_interest] = np.asarray(intervention.prior, dtype=np.float64)
    z = np.empty((n, world.M_true), dtype=np.int64)
    for i in range(world.M_true):
        z[:, i] = _categorical(priors[i], rng.random(n))
    return z


def click_logit(world: CausalWorld, z: np.ndarray, intervention: Intervention | None = None) -> np.ndarray:
    utilities = world.utilities.copy()
    weights = world.click_weights.copy()
    if intervention is not None:
        t = intervention.target_interest
        if intervention.utility is not None:
            utilities[t] = np.asarray(intervention.utility, dtype=np.float64)
        if intervention.click_weight is not None:
            weights[t] = intervention.click_weight
    contrib = weights[None, :] * utilities[np.arange(world.M_true)[None, :], z]
    return contrib.sum(axis=1) + world.bias


def sample_dataset(
    world: CausalWorld,
    n_records: int,
    intervention: Intervention | None = None,
    rng_seed: int = 0,
    split_tag: str = "train",
) -> Dataset:
    if n_records < 1:
        raise ConfigError("n_records must be >= 1")
    if intervention is not None and not 0 <= intervention.target_interest < world.M_true:
        raise ConfigError(f"intervention target {intervention.target_interest} out of range")
    rng = np.random.default_rng(rng_seed)
    z = sample_latents(world, n_records, rng, intervention)
    codes = np.zeros((n_records, world.N), dtype=np.int64)
    codes[:, world.user_field] = rng.integers(1, world.n_users + 1, size=n_records)
    for g, members in enumerate(world.feature_groups):
        for f in members:
            table = world.emission[f - 1]
            codes[:, f] = _categorical(table[z[:, g]], rng.random(n_records))
    p = 1.0 / (1.0 + np.exp(-click_logit(world, z, intervention)))
    labels = (rng.random(n_records) < p).astype(np.int64)
    return Dataset(world.schema, codes, labels, split_tag=split_tag)


def world_config_dict(config: WorldConfig) -> dict:
    return asdict(config)
