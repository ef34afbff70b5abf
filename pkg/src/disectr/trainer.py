"""Adam training with early stopping, fine-tune transfer, transfer distances and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .aggregator import LossWeights
from .data import Dataset, PairSampler
from .errors import (
    CheckpointIncompatibleError,
    CheckpointManifestError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    NumericalError,
)
from .metrics import metrics_report
from .model import CTRModel, ModelConfig, build_model

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"
_DTYPES = {"float32": "<f4", "float64": "<f8"}
TRANSFER_FRACTIONS = (0.01, 0.02, 0.05, 0.10)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    fraction: float = 0.1
    freeze: list[str] = field(default_factory=list)
    eval_batch: int = 8192

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(lr=1e-4, batch_size=2048)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    dtype: str = "float32"

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])


def snapshot(model: torch.nn.Module, config: dict | None = None, epoch: int = 0, history=None) -> Checkpoint:
    arrays = {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}
    dtypes = {a.dtype for a in arrays.values()}
    dtype = "float64" if np.dtype("float64") in dtypes else "float32"
    return Checkpoint(arrays, dict(config or {}), epoch, list(history or []), dtype)


def load_into(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    params = dict(model.named_parameters())
    if set(params) != set(ckpt.arrays):
        missing = sorted(set(params) - set(ckpt.arrays))
        extra = sorted(set(ckpt.arrays) - set(params))
        raise CheckpointIncompatibleError(f"parameter names differ: missing {missing}, unexpected {extra}")
    with torch.no_grad():
        for name, p in params.items():
            a = ckpt.arrays[name]
            if tuple(a.shape) != tuple(p.shape):
                raise CheckpointIncompatibleError(f"{name}: checkpoint shape {a.shape} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.array(a)).to(p.dtype))


def model_from_checkpoint(ckpt: Checkpoint) -> CTRModel:
    dtype = torch.float64 if ckpt.dtype == "float64" else torch.float32
    model = build_model(ckpt.config["cardinalities"], ckpt.model_config(), 0, dtype)
    load_into(model, ckpt)
    return model


# ---------------------------------------------------------------------------
# checkpoint files: manifest.json + params.bin (raw little-endian floats)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    fmt = _DTYPES[ckpt.dtype]
    entries, chunks, offset = [], [], 0
    for name, a in ckpt.arrays.items():
        raw = np.ascontiguousarray(a, dtype=fmt).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": ckpt.dtype,
        "byte_order": "little",
        "arrays": entries,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / BLOB).write_bytes(b"".join(chunks))
    return path


def _require(manifest: dict, key: str, kind):
    if key not in manifest:
        raise CheckpointManifestError(f"manifest field {key!r} is missing")
    if not isinstance(manifest[key], kind):
        raise CheckpointManifestError(f"manifest field {key!r} has type {type(manifest[key]).__name__}")
    return manifest[key]


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointManifestError(f"manifest is not valid JSON (line {exc.lineno}): {exc.msg}") from None
    if not isinstance(manifest, dict):
        raise CheckpointManifestError("manifest must be a JSON object")
    version = _require(manifest, "format_version", int)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    dtype = _require(manifest, "dtype", str)
    if dtype not in _DTYPES:
        raise CheckpointManifestError(f"manifest field 'dtype' has unsupported value {dtype!r}")
    entries = _require(manifest, "arrays", list)
    blob = (path / BLOB).read_bytes()
    itemsize = np.dtype(_DTYPES[dtype]).itemsize
    arrays = {}
    for i, e in enumerate(entries):
        for key in ("name", "shape", "offset", "nbytes"):
            if key not in e:
                raise CheckpointManifestError(f"manifest field 'arrays[{i}].{key}' is missing")
        expected = int(np.prod(e["shape"], dtype=np.int64)) * itemsize
        if expected != e["nbytes"]:
            raise CheckpointShapeError(f"{e['name']}: shape {e['shape']} needs {expected} bytes, manifest says {e['nbytes']}")
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointTruncatedError(f"{e['name']}: blob has {len(blob)} bytes, manifest needs {end}")
        a = np.frombuffer(blob[e["offset"] : end], dtype=_DTYPES[dtype]).reshape(e["shape"])
        arrays[e["name"]] = a.astype(dtype)
    return Checkpoint(
        arrays,
        _require(manifest, "config", dict),
        _require(manifest, "epoch", int),
        _require(manifest, "history", list),
        dtype,
    )


# ---------------------------------------------------------------------------
# training


@torch.no_grad()
def predict_scores(model: CTRModel, ds: Dataset, batch: int = 8192) -> np.ndarray:
    model.eval()
    codes = torch.from_numpy(np.array(ds.codes))
    out = [model.score(codes[i : i + batch]).double().numpy() for i in range(0, len(ds), batch)]
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: CTRModel, ds: Dataset, **tags) -> dict:
    scores = predict_scores(model, ds)
    if not np.isfinite(scores).all():
        raise NumericalError(f"{int((~np.isfinite(scores)).sum())} non-finite scores during evaluation")
    return metrics_report(ds.users, scores, ds.labels, **tags)


def _trainable(model: torch.nn.Module, freeze: list[str]):
    return [p for n, p in model.named_parameters() if not any(n.startswith(f) for f in freeze)]


def _check_finite(breakdown, epoch: int, step: int) -> None:
    if torch.isfinite(breakdown.total):
        return
    bad = [k for k, v in breakdown.terms.items() if not torch.isfinite(v)]
    raise NumericalError(f"non-finite loss at epoch {epoch} step {step}; offending terms: {bad or ['total']}")


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=config.lr, betas=config.betas, eps=config.eps)


def train_step(model, optimizer, pos_codes, neg_codes, weights: LossWeights, epoch: int = 0, step: int = 0):
    """One optimizer update on a pair batch; returns the loss breakdown before the update."""
    breakdown = model.pair_loss(pos_codes, neg_codes, weights)
    _check_finite(breakdown, epoch, step)
    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    optimizer.step()
    return breakdown


def checkpoint_config(model: CTRModel, config: TrainConfig) -> dict:
    return {
        "model": model.config.to_dict(),
        "cardinalities": list(model.cardinalities),
        "train": config.to_dict(),
    }


def train(
    model: CTRModel,
    train_ds: Dataset,
    valid_ds: Dataset,
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Adam on the pairwise objective; keeps the parameters with the best validation AUC.

    Epoch 0 is the incoming parameters, so the result never scores below them on
    validation. Fully deterministic given ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    params = _trainable(model, config.freeze)
    opt = make_optimizer(params, config)
    sampler = PairSampler(train_ds)
    meta = checkpoint_config(model, config)

    val = evaluate(model, valid_ds)
    history = [{"epoch": 0, "val_auc": val["auc"], "val_gauc": val["gauc"]}]
    best_auc, best = val["auc"], snapshot(model, meta, 0, history)
    stale = 0
    if len(sampler.pos_index) == 0:
        return best
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        sums: dict[str, float] = {}
        n_steps = 0
        for step, batch in enumerate(sampler.epoch(config.batch_size, rng)):
            breakdown = train_step(
                model, opt, torch.from_numpy(batch.pos_codes), torch.from_numpy(batch.neg_codes), config.weights, epoch, step
            )
            for k, v in breakdown.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
        val = evaluate(model, valid_ds)
        record = {"epoch": epoch, "val_auc": val["auc"], "val_gauc": val["gauc"]}
        record.update({f"loss_{k}": v / max(n_steps, 1) for k, v in sorted(sums.items())})
        history.append(record)
        if on_epoch is not None:
            on_epoch(dict(record, wall_time=time.perf_counter() - t0))
        log.debug("epoch %d val_auc %.4f", epoch, val["auc"])
        if val["auc"] > best_auc:
            best_auc, stale = val["auc"], 0
            best = snapshot(model, meta, epoch)
        else:
            stale += 1
            if stale >= config.patience:
                break
    best.history = history
    load_into(model, best)
    return best


@dataclass
class TransferReport:
    group_distances: dict[str, float]
    param_distances: dict[str, float]
    prototype_distances: list[float] | None
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def transfer_distance(before: Checkpoint, after: Checkpoint) -> TransferReport:
    if set(before.arrays) != set(after.arrays):
        raise CheckpointIncompatibleError("checkpoints hold different parameter sets")
    param, sq_groups = {}, {}
    for name in before.arrays:
        diff = after.arrays[name].astype(np.float64) - before.arrays[name].astype(np.float64)
        sq = float((diff * diff).sum())
        param[name] = math.sqrt(sq)
        g = name.split(".")[0]
        sq_groups[g] = sq_groups.get(g, 0.0) + sq
    protos = None
    key = "prototypes.Z_p"
    if key in before.arrays:
        diff = after.arrays[key].astype(np.float64) - before.arrays[key].astype(np.float64)
        protos = np.sqrt((diff * diff).sum(axis=1)).tolist()
    return TransferReport({g: math.sqrt(v) for g, v in sq_groups.items()}, param, protos, list(after.history))


def finetune_subset(ds: Dataset, fraction: float, seed: int) -> Dataset:
    if not 0 < fraction <= 1:
        raise ConfigError(f"fine-tune fraction {fraction} outside (0, 1]")
    n = int(math.floor(fraction * len(ds)))
    index = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return ds.subset(index)


def finetune(
    model: CTRModel,
    checkpoint: Checkpoint,
    ood_train: Dataset,
    ood_valid: Dataset,
    fraction: float,
    config: TrainConfig,
    on_epoch=None,
) -> tuple[Checkpoint, TransferReport]:
    """Continue training all (non-frozen) parameters on a seeded ``fraction`` of the OOD train set."""
    load_into(model, checkpoint)
    subset = finetune_subset(ood_train, fraction, config.seed)
    after = train(model, subset, ood_valid, config, on_epoch=on_epoch)
    return after, transfer_distance(checkpoint, after)
