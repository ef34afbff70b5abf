"""Categorical CTR datasets: schemas, vocabularies, CSV I/O and BPR pair sampling."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import EmptyBatchError, SchemaError, DataError

UNKNOWN_CODE = 0
SPLITS = ("train", "valid", "test")
OPTIONAL_COLUMNS = ("behavior", "timestamp")


@dataclass(frozen=True)
class Field:
    name: str
    cardinality: int


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple[Field, ...]
    user_field: int = 0

    def __post_init__(self):
        if len(self.fields) < 1:
            raise SchemaError("schema needs at least one field")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {names}")
        for f in self.fields:
            if f.cardinality < 1:
                raise SchemaError(f"field {f.name!r} has cardinality {f.cardinality} < 1")
        if not 0 <= self.user_field < len(self.fields):
            raise SchemaError(f"user field index {self.user_field} out of range")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, int]], user_field: int = 0) -> "FeatureSchema":
        return cls(tuple(Field(n, int(c)) for n, c in pairs), user_field)

    @property
    def N(self) -> int:
        return len(self.fields)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def cardinalities(self) -> list[int]:
        return [f.cardinality for f in self.fields]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown field {name!r}; schema has {self.names}") from None

    def to_dict(self) -> dict:
        return {"fields": [[f.name, f.cardinality] for f in self.fields], "user_field": self.user_field}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls.from_pairs([tuple(p) for p in d["fields"]], d.get("user_field", 0))


@dataclass(frozen=True)
class InteractionRecord:
    feature_values: tuple[int, ...]
    label: int
    behavior: str | None = None
    timestamp: int | None = None
    user_field_index: int = 0

    @property
    def user(self) -> int:
        return self.feature_values[self.user_field_index]


class Vocabulary:
    """Per-field raw value -> dense code mapping. Code 0 is reserved for unknown values."""

    def __init__(self, mappings: dict[str, dict[str, int]] | None = None):
        self.mappings: dict[str, dict[str, int]] = mappings or {}
        self.frozen = False
        self.unknown_counts: dict[str, int] = {}

    def code(self, field_name: str, raw: str) -> int:
        table = self.mappings.setdefault(field_name, {})
        c = table.get(raw)
        if c is not None:
            return c
        if self.frozen:
            self.unknown_counts[field_name] = self.unknown_counts.get(field_name, 0) + 1
            return UNKNOWN_CODE
        c = len(table) + 1
        table[raw] = c
        return c

    def cardinality(self, field_name: str) -> int:
        return len(self.mappings.get(field_name, {})) + 1

    def raw(self, field_name: str, code: int) -> str:
        if code == UNKNOWN_CODE:
            return ""
        inverse = {v: k for k, v in self.mappings[field_name].items()}
        return inverse[code]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.mappings, indent=1, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        vocab = cls(json.loads(Path(path).read_text(encoding="utf-8")))
        vocab.frozen = True
        return vocab


def _readonly(a: np.ndarray | None) -> np.ndarray | None:
    if a is not None:
        a.setflags(write=False)
    return a


class Dataset:
    """Columnar, immutable collection of interaction records conforming to one schema.

    ``ids`` identify source rows so derived datasets can be checked as subsets.
    """

    def __init__(
        self,
        schema: FeatureSchema,
        codes,
        labels,
        *,
        behaviors=None,
        timestamps=None,
        ids=None,
        split_tag: str = "train",
        vocab: Vocabulary | None = None,
    ):
        codes = np.asarray(codes, dtype=np.int64).reshape(-1, schema.N)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(codes):
            raise DataError(f"{len(codes)} feature rows but {len(labels)} labels")
        if split_tag not in SPLITS:
            raise DataError(f"split_tag must be one of {SPLITS}, got {split_tag!r}")
        bad = np.flatnonzero((labels != 0) & (labels != 1))
        if len(bad):
            raise DataError(f"row {int(bad[0])}: label {int(labels[bad[0]])} not in {{0,1}}")
        card = np.asarray(schema.cardinalities)
        if len(codes):
            out = (codes < 0) | (codes >= card)
            if out.any():
                r, c = np.argwhere(out)[0]
                raise DataError(
                    f"row {r}: code {codes[r, c]} out of range for field {schema.fields[c].name!r} "
                    f"(cardinality {card[c]})"
                )
        self.schema = schema
        self.codes = _readonly(codes)
        self.labels = _readonly(labels)
        self.behaviors = _readonly(None if behaviors is None else np.asarray(behaviors, dtype=object))
        self.timestamps = _readonly(None if timestamps is None else np.asarray(timestamps, dtype=np.int64))
        self.ids = _readonly(np.arange(len(labels), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64))
        self.split_tag = split_tag
        self.vocab = vocab

    @classmethod
    def from_records(cls, schema: FeatureSchema, records: Sequence[InteractionRecord], split_tag: str = "train"):
        codes = np.array([r.feature_values for r in records], dtype=np.int64).reshape(-1, schema.N)
        labels = [r.label for r in records]
        behaviors = [r.behavior for r in records] if any(r.behavior is not None for r in records) else None
        timestamps = [r.timestamp for r in records] if all(r.timestamp is not None for r in records) and records else None
        return cls(schema, codes, labels, behaviors=behaviors, timestamps=timestamps, split_tag=split_tag)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def records(self) -> list[InteractionRecord]:
        return [self.record(i) for i in range(len(self))]

    def record(self, i: int) -> InteractionRecord:
        return InteractionRecord(
            tuple(int(c) for c in self.codes[i]),
            int(self.labels[i]),
            None if self.behaviors is None else self.behaviors[i],
            None if self.timestamps is None else int(self.timestamps[i]),
            self.schema.user_field,
        )

    @property
    def users(self) -> np.ndarray:
        return self.codes[:, self.schema.user_field]

    @property
    def ctr(self) -> float:
        return float(self.labels.mean()) if len(self) else float("nan")

    def subset(self, index, split_tag: str | None = None, labels=None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.schema,
            self.codes[index],
            self.labels[index] if labels is None else labels,
            behaviors=None if self.behaviors is None else self.behaviors[index],
            timestamps=None if self.timestamps is None else self.timestamps[index],
            ids=self.ids[index],
            split_tag=split_tag or self.split_tag,
            vocab=self.vocab,
        )

    def with_split(self, split_tag: str) -> "Dataset":
        return self.subset(np.arange(len(self)), split_tag)


def _parse_schema_spec(schema_spec) -> tuple[list[str], int]:
    if isinstance(schema_spec, dict):
        names = list(schema_spec["fields"])
        user = schema_spec.get("user_field", "user")
    else:
        names = list(schema_spec)
        user = "user"
    user_index = names.index(user) if user in names else 0
    return names, user_index


def load_csv(
    path: str | Path,
    schema_spec,
    vocab: Vocabulary | None = None,
    split_tag: str = "train",
    save_vocab: bool = True,
) -> Dataset:
    """Read a headered CSV of categorical fields plus ``label``.

    Without ``vocab`` a fresh vocabulary is built in first-seen order and written
    next to the CSV as ``<name>.vocab.json``. With a (frozen) vocabulary, unseen
    values map to code 0 and are tallied in ``vocab.unknown_counts``.
    """
    path = Path(path)
    names, user_index = _parse_schema_spec(schema_spec)
    building = vocab is None
    vocab = vocab or Vocabulary()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in names + ["label"]:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        has_behavior = "behavior" in header
        has_ts = "timestamp" in header
        codes, labels, behaviors, timestamps = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise DataError(f"{path}: row {lineno}: label {row['label']!r} is not an integer") from None
            if label not in (0, 1):
                raise DataError(f"{path}: row {lineno}: label {label} not in {{0,1}}")
            codes.append([vocab.code(n, row[n]) for n in names])
            labels.append(label)
            if has_behavior:
                behaviors.append(row["behavior"])
            if has_ts:
                timestamps.append(int(row["timestamp"]))
    vocab.frozen = True
    schema = FeatureSchema.from_pairs([(n, vocab.cardinality(n)) for n in names], user_index)
    if building and save_vocab:
        vocab.save(path.with_suffix(".vocab.json"))
    return Dataset(
        schema,
        np.array(codes, dtype=np.int64).reshape(-1, len(names)),
        labels,
        behaviors=behaviors if has_behavior else None,
        timestamps=timestamps if has_ts else None,
        split_tag=split_tag,
        vocab=vocab,
    )


def write_csv(ds: Dataset, path: str | Path) -> None:
    """Write ``ds`` in the CSV interchange format (raw values when a vocabulary is attached)."""
    names = ds.schema.names
    header = names + ["label"]
    if ds.behaviors is not None:
        header.append("behavior")
    if ds.timestamps is not None:
        header.append("timestamp")
    inverse = None
    if ds.vocab is not None:
        inverse = {n: {v: k for k, v in ds.vocab.mappings.get(n, {}).items()} for n in names}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = ds.codes[i]
            if inverse is None:
                values = [str(int(c)) for c in row]
            else:
                values = [inverse[n].get(int(c), "") for n, c in zip(names, row)]
            values.append(str(int(ds.labels[i])))
            if ds.behaviors is not None:
                values.append(ds.behaviors[i])
            if ds.timestamps is not None:
                values.append(str(int(ds.timestamps[i])))
            w.writerow(values)


def split_dataset(ds: Dataset, ratios=(0.8, 0.1, 0.1), rng_seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Chronological split when timestamps exist, otherwise a seeded random split."""
    n = len(ds)
    if ds.timestamps is not None:
        order = np.argsort(ds.timestamps, kind="stable")
    else:
        order = np.random.default_rng(rng_seed).permutation(n)
    a = int(round(ratios[0] * n))
    b = a + int(round(ratios[1] * n))
    return (
        ds.subset(order[:a], "train"),
        ds.subset(order[a:b], "valid"),
        ds.subset(order[b:], "test"),
    )


@dataclass
class PairBatch:
    """Aligned positive/negative rows. ``fallback`` marks pairs whose negative came from another user."""

    pos_codes: np.ndarray
    neg_codes: np.ndarray
    pos_index: np.ndarray
    neg_index: np.ndarray
    fallback: np.ndarray
    user_field: int = 0
    schema: FeatureSchema | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.pos_index)

    @property
    def n_fallback(self) -> int:
        return int(self.fallback.sum())

    def _records(self, codes, label) -> list[InteractionRecord]:
        return [InteractionRecord(tuple(int(c) for c in row), label, None, None, self.user_field) for row in codes]

    @property
    def pos(self) -> list[InteractionRecord]:
        return self._records(self.pos_codes, 1)

    @property
    def neg(self) -> list[InteractionRecord]:
        return self._records(self.neg_codes, 0)


class PairSampler:
    """Draws (positive, same-user negative) pairs; precomputes per-user negative pools."""

    def __init__(self, ds: Dataset):
        self.ds = ds
        self.pos_index = np.flatnonzero(ds.labels == 1)
        neg_index = np.flatnonzero(ds.labels == 0)
        self.global_neg = neg_index
        users = ds.users
        order = np.argsort(users[neg_index], kind="stable")
        sorted_neg = neg_index[order]
        uniq, starts, counts = np.unique(users[sorted_neg], return_index=True, return_counts=True)
        self._neg_by_user = {int(u): sorted_neg[s : s + c] for u, s, c in zip(uniq, starts, counts)}

    def _pair(self, pos: np.ndarray, rng: np.random.Generator) -> PairBatch:
        users = self.ds.users
        neg = np.empty_like(pos)
        fallback = np.zeros(len(pos), dtype=bool)
        for j, p in enumerate(pos):
            pool = self._neg_by_user.get(int(users[p]))
            if pool is None:
                if len(self.global_neg) == 0:
                    raise EmptyBatchError("dataset has no negative records to pair with")
                neg[j] = self.global_neg[rng.integers(len(self.global_neg))]
                fallback[j] = True
            else:
                neg[j] = pool[rng.integers(len(pool))]
        return PairBatch(
            self.ds.codes[pos], self.ds.codes[neg], pos, neg, fallback, self.ds.schema.user_field, self.ds.schema
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> PairBatch:
        if len(self.pos_index) == 0:
            raise EmptyBatchError("dataset has no positive records")
        replace = batch_size > len(self.pos_index)
        pos = rng.choice(self.pos_index, size=batch_size, replace=replace)
        return self._pair(pos, rng)

    def epoch(self, batch_size: int, rng: np.random.Generator) -> Iterator[PairBatch]:
        """One pass over every positive in shuffled order; the last batch may be short."""
        pos = rng.permutation(self.pos_index)
        for start in range(0, len(pos), batch_size):
            yield self._pair(pos[start : start + batch_size], rng)


def sample_pairs(ds: Dataset, batch_size: int, rng_seed: int) -> PairBatch:
    return PairSampler(ds).sample(batch_size, np.random.default_rng(rng_seed))
