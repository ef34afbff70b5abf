"""OOD-easy (single-feature CTR retargeting) and OOD-hard (behavior transfer) dataset construction."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .data import Dataset
from .errors import ConfigError, OODConstructionError


@dataclass(frozen=True)
class GroupRule:
    """Splits a field's codes into low (code <= threshold, group 0) and high (group 1)."""

    field: str
    threshold: int

    n_groups = 2

    def groups(self, ds: Dataset) -> np.ndarray:
        col = ds.codes[:, ds.schema.index(self.field)]
        return (col > self.threshold).astype(np.int64)

    def group_of_codes(self, codes: np.ndarray, field_index: int) -> np.ndarray:
        return (np.asarray(codes)[..., field_index] > self.threshold).astype(np.int64)


def median_rule(ds: Dataset, field: str) -> GroupRule:
    """Threshold at the median code of ``field`` in ``ds`` (typically the training split)."""
    col = ds.codes[:, ds.schema.index(field)]
    return GroupRule(field, int(np.median(col)))


@dataclass(frozen=True)
class OodEasySpec:
    affected_field: str
    group_rule: GroupRule
    e: float = 0.6
    e_prime: float = 0.2

    def __post_init__(self):
        for name in ("e", "e_prime"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name}={v} must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class OodHardSpec:
    train_behavior: str = "click"
    test_behavior: str = "like"

    def __post_init__(self):
        if self.train_behavior == self.test_behavior:
            raise ConfigError("train and test behaviors must differ")


def _exact(x: float) -> Fraction:
    # decimal literal, so 0.6 means 3/5 rather than its binary approximation
    return Fraction(repr(float(x)))


def keep_ratio(source_ctr: float, target_ctr: float) -> tuple[str, float]:
    """Which class to thin, and the fraction of it to keep, to move a CTR from source to target."""
    for name, v in (("source_ctr", source_ctr), ("target_ctr", target_ctr)):
        if not 0 < v < 1:
            raise ValueError(f"{name}={v} outside the open interval (0, 1)")
    s, t = _exact(source_ctr), _exact(target_ctr)
    if t < s:
        return "positives", float(t * (1 - s) / (s * (1 - t)))
    if t > s:
        return "negatives", float(s * (1 - t) / (t * (1 - s)))
    return "positives", 1.0


def resulting_ctr(source_ctr: float, which: str, ratio: float) -> float:
    s = source_ctr
    if which == "positives":
        return s * ratio / (s * ratio + (1 - s))
    return s / (s + (1 - s) * ratio)


def _retarget(labels: np.ndarray, index: np.ndarray, target: float, rng: np.random.Generator, name: str) -> np.ndarray:
    pos = index[labels[index] == 1]
    neg = index[labels[index] == 0]
    if len(pos) == 0 or len(neg) == 0:
        missing = "positive" if len(pos) == 0 else "negative"
        raise OODConstructionError(f"group {name!r} has no {missing} records")
    which, r = keep_ratio(len(pos) / len(index), target)
    if which == "positives":
        pos = rng.choice(pos, size=int(round(r * len(pos))), replace=False)
    else:
        neg = rng.choice(neg, size=int(round(r * len(neg))), replace=False)
    return np.concatenate([pos, neg])


def build_ood_easy(ds: Dataset, spec: OodEasySpec, rng_seed: int, target: str = "test") -> Dataset:
    """Resample ``ds`` so the low group has CTR e (train) or e' (test) and the high group the mirrored value.

    Only deletes rows; every output record exists in the source.
    """
    if target not in ("train", "test"):
        raise ValueError(f"target must be 'train' or 'test', got {target!r}")
    if spec.affected_field not in ds.schema.names:
        raise ConfigError(f"affected field {spec.affected_field!r} not in schema {ds.schema.names}")
    rng = np.random.default_rng(rng_seed)
    low_ctr = spec.e if target == "train" else spec.e_prime
    groups = spec.group_rule.groups(ds)
    keep = []
    for g, name, ctr in ((0, "low", low_ctr), (1, "high", 1 - low_ctr)):
        index = np.flatnonzero(groups == g)
        if len(index) == 0:
            raise OODConstructionError(f"group {name!r} of field {spec.affected_field!r} is empty")
        keep.append(_retarget(ds.labels, index, ctr, rng, name))
    return ds.subset(np.sort(np.concatenate(keep)))


def build_ood_hard(ds: Dataset, spec: OodHardSpec) -> tuple[Dataset, Dataset]:
    """Rows tagged with the train behavior form the train set, rows tagged with the test behavior the test set."""
    if ds.behaviors is None:
        raise OODConstructionError("dataset carries no behavior column")
    out = []
    for tag, split in ((spec.train_behavior, "train"), (spec.test_behavior, "test")):
        index = np.flatnonzero(ds.behaviors == tag)
        if len(index) == 0:
            raise OODConstructionError(f"behavior {tag!r} absent from dataset")
        out.append(ds.subset(index, split))
    return out[0], out[1]
