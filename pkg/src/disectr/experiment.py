"""Protocol sweeps: train on IID data, build OOD sets, fine-tune on fractions, collect metric rows."""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import shutil
import time
import traceback
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .aggregator import LossWeights, attention_ranks
from .config import ExperimentConfig
from .data import Dataset, load_csv, split_dataset
from .errors import ConfigError
from .model import ABLATION_TOGGLES, DiseCTR, ModelConfig, build_model
from .ood import GroupRule, OodEasySpec, OodHardSpec, build_ood_easy, build_ood_hard, median_rule
from .synthetic import CausalWorld, WorldConfig, sample_dataset, sample_world
from .trainer import (
    TrainConfig,
    evaluate,
    finetune,
    load_into,
    save_checkpoint,
    train,
)

log = logging.getLogger(__name__)

REPORT = "report.json"
METADATA = "metadata.json"
FAILED = "FAILED"
OWNED = (REPORT, METADATA, FAILED, "rows.csv", "tables", "plots", "checkpoints", "logs")
REPORT_FORMAT = 1


@dataclass
class Cell:
    """One protocol grid cell before the fraction axis: its tags and OOD train/valid/test sets."""

    tags: dict
    ood_train: Dataset | None = None
    ood_valid: Dataset | None = None
    ood_test: Dataset | None = None


@dataclass
class Family:
    """Shared IID training data for protocols that start from the same checkpoint."""

    name: str
    train: Dataset
    valid: Dataset
    test: Dataset
    affected: tuple[int, int] | None  # (field index, group threshold) for OOD-easy weak supervision
    cells: list[Cell] = field(default_factory=list)


@dataclass
class RunReport:
    config: dict
    rows: list[dict]
    training: dict
    status: str = "complete"
    failure: dict | None = None
    ablation: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "status": self.status,
            "failure": self.failure,
            "ablation": list(self.ablation),
            "config": self.config,
            "rows": self.rows,
            "training": self.training,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["config"], d["rows"], d.get("training", {}), d.get("status", "complete"), d.get("failure"), d.get("ablation", []))


def load_report(path: str | Path) -> RunReport:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT
    return RunReport.from_dict(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# data preparation


def _data_seed(seed: int, k: int) -> int:
    return 1000 * seed + k


def synthetic_world(cfg: ExperimentConfig, seed: int) -> CausalWorld:
    return sample_world(WorldConfig.from_dict(cfg.data["synthetic"].get("world", {})), seed)


def target_interest(world: CausalWorld, setting) -> int:
    """``auto`` picks the interest with the largest absolute click weight."""
    if setting == "auto" or setting is None:
        return int(np.argmax(np.abs(world.click_weights)))
    if not 0 <= int(setting) < world.M_true:
        raise ConfigError(f"field 'data.synthetic.target_interest': {setting} outside [0, {world.M_true})")
    return int(setting)


def _pools(cfg: ExperimentConfig, seed: int):
    """(schema-bearing) IID and OOD source splits, each as train/valid/test, plus the world if synthetic."""
    if cfg.data.get("source", "synthetic") == "synthetic":
        syn = cfg.data["synthetic"]
        world = synthetic_world(cfg, seed)
        iid = tuple(
            sample_dataset(world, syn[f"n_{s}"], None, _data_seed(seed, k), s)
            for k, s in enumerate(("train", "valid", "test"), start=1)
        )
        ood = tuple(
            sample_dataset(world, syn[f"n_{s}"], None, _data_seed(seed, k), s)
            for k, s in enumerate(("train", "valid", "test"), start=4)
        )
        return world, iid, ood
    spec = cfg.data["csv"]
    ds = load_csv(spec["path"], {"fields": spec["fields"], "user_field": spec.get("user_field", "user")}, save_vocab=False)
    order = np.random.default_rng(_data_seed(seed, 0)).permutation(len(ds))
    half = len(ds) // 2
    iid = split_dataset(ds.subset(np.sort(order[:half])), rng_seed=_data_seed(seed, 1))
    ood = split_dataset(ds.subset(np.sort(order[half:])), rng_seed=_data_seed(seed, 2))
    return None, iid, ood


def prepare(cfg: ExperimentConfig, seed: int) -> list[Family]:
    protos = cfg.protocols
    world, iid, ood = _pools(cfg, seed)
    families = []

    if protos.get("iid") or protos.get("intervention"):
        affected = None
        base = Family("base", *iid, affected=None)
        if protos.get("iid"):
            base.cells.append(Cell({"protocol": "iid"}))
        if protos.get("intervention"):
            t = target_interest(world, cfg.data["synthetic"].get("target_interest", "auto"))
            f = world.feature_groups[t][0]
            rule = median_rule(iid[0], world.field_names[f])
            affected = (f, rule.threshold)
            shift = world.flip_intervention(t)
            syn = cfg.data["synthetic"]
            sets = [
                sample_dataset(world, syn[f"n_{s}"], shift, _data_seed(seed, k), s)
                for k, s in enumerate(("train", "valid", "test"), start=7)
            ]
            base.cells.append(Cell({"protocol": "intervention", "target_interest": t}, *sets))
        base.affected = affected
        families.append(base)

    if "ood_easy" in protos:
        spec = protos["ood_easy"]
        name = spec["affected_field"]
        schema = iid[0].schema
        if name not in schema.names:
            raise ConfigError(f"field 'protocols.ood_easy.affected_field': {name!r} not in schema {schema.names}")
        rule = GroupRule(name, spec["threshold"]) if "threshold" in spec else median_rule(iid[0], name)
        e = spec.get("e", 0.6)
        base_spec = OodEasySpec(name, rule, e=e, e_prime=e)
        fam = Family(
            "ood_easy",
            *(build_ood_easy(d, base_spec, _data_seed(seed, 20 + k), "train") for k, d in enumerate(iid)),
            affected=(schema.index(name), rule.threshold),
        )
        for e_prime in spec.get("e_prime", [0.2]):
            s = OodEasySpec(name, rule, e=e, e_prime=e_prime)
            sets = [build_ood_easy(d, s, _data_seed(seed, 30 + k), "test") for k, d in enumerate(ood)]
            fam.cells.append(Cell({"protocol": "ood_easy", "e_prime": e_prime}, *sets))
        families.append(fam)

    if "ood_hard" in protos:
        spec = OodHardSpec(**protos["ood_hard"])
        click = [build_ood_hard(d, spec) for d in iid]
        like = [build_ood_hard(d, spec) for d in ood]
        fam = Family("ood_hard", click[0][0], click[1][0].with_split("valid"), click[2][0].with_split("test"), None)
        fam.cells.append(
            Cell(
                {"protocol": "ood_hard"},
                like[0][1].with_split("train"),
                like[1][1].with_split("valid"),
                like[2][1],
            )
        )
        families.append(fam)
    return families


# ---------------------------------------------------------------------------
# models and configs


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    d = dict(cfg.train)
    if "weights" in d:
        d["weights"] = LossWeights(**d["weights"])
    return TrainConfig.from_dict(dict(d, seed=seed))


def model_config(spec: dict, family: Family, ablation=()) -> ModelConfig:
    d = {k: v for k, v in spec.items() if k != "name"}
    mode = d.pop("weak_mode", "auto")
    if mode == "auto":
        mode = "ood_easy" if family.affected is not None else "adaptive"
    if mode == "ood_easy":
        if family.affected is None:
            raise ConfigError(
                f"model {spec['name']!r}: weak_mode 'ood_easy' needs a protocol naming the affected feature "
                f"(ood_easy or intervention), family {family.name!r} has none"
            )
        d["affected_field"], d["affected_threshold"] = family.affected
    d["weak_mode"] = mode
    mc = ModelConfig.from_dict(d)
    if mc.kind == "disectr" and ablation:
        mc = mc.ablated(ablation)
    return mc


@torch.no_grad()
def mean_attention_ranks(model, ds: Dataset, probe: int = 2048) -> list[float] | None:
    if not isinstance(model, DiseCTR):
        return None
    codes = torch.from_numpy(np.array(ds.codes[:probe]))
    att = model(codes).attention
    per_head = [attention_ranks(att, h) for h in range(att.shape[1])]
    return [math.fsum(col) / len(col) for col in zip(*per_head)]


def _prefixed(prefix: str, metrics: dict) -> dict:
    return {f"{prefix}{k}": metrics[k] for k in ("auc", "gauc", "logloss")}


def _cell_id(tags: dict, fraction: float | None) -> str:
    parts = [tags["protocol"]]
    if "e_prime" in tags:
        parts.append(f"e{tags['e_prime']:g}")
    if fraction is not None:
        parts.append(f"f{fraction:g}")
    return "_".join(parts)


# ---------------------------------------------------------------------------
# running


class _Writer:
    def __init__(self, out: Path, force: bool):
        self.out = out
        if out.exists() and any((out / name).exists() for name in (REPORT, FAILED)):
            if not force:
                raise ConfigError(f"output directory {out} already holds a run; pass --force to overwrite")
            for name in OWNED:
                p = out / name
                if p.is_dir():
                    shutil.rmtree(p)
                elif p.exists():
                    p.unlink()
        out.mkdir(parents=True, exist_ok=True)

    def epoch_logger(self, key: str):
        path = self.out / "logs" / f"{key}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("")

        def emit(record: dict) -> None:
            with path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

        return emit


def write_tables(report: RunReport, out: Path) -> list[Path]:
    """All rows in ``rows.csv`` plus one CSV per grid cell under ``tables/``."""
    rows = report.rows
    if not rows:
        return []
    columns = sorted({k for r in rows for k in r})
    written = [out / "rows.csv"]
    _write_rows(written[0], columns, rows)
    cells: dict[str, list[dict]] = {}
    for r in rows:
        cells.setdefault(r["cell"], []).append(r)
    (out / "tables").mkdir(exist_ok=True)
    for cell, members in sorted(cells.items()):
        path = out / "tables" / f"{cell}.csv"
        cols = sorted({k for r in members for k in r})
        _write_rows(path, cols, members)
        written.append(path)
    return written


def _cell_value(v):
    if v is None:
        return ""
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True)
    return v


def _write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell_value(r.get(c)) for c in columns])


def _row_key(r: dict):
    return (r["seed"], r["model"], r["cell"])


def run_config(
    cfg: ExperimentConfig,
    force: bool = False,
    ablation=(),
    plots: bool = True,
) -> RunReport:
    """Execute the full grid of ``cfg`` and write report, tables, plot data and metadata to its output dir."""
    bad = set(ablation) - set(ABLATION_TOGGLES)
    if bad:
        raise ConfigError(f"unknown ablation toggles {sorted(bad)}; choose from {ABLATION_TOGGLES}")
    ablation = sorted(set(ablation))
    out = Path(cfg.output_dir)
    writer = _Writer(out, force)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    report = RunReport(cfg.to_dict(), [], {}, ablation=ablation)
    phases: dict[str, float] = {}
    current = None
    try:
        for seed in cfg.seeds:
            tc = train_config(cfg, seed)
            current = {"seed": seed, "stage": "prepare"}
            families = prepare(cfg, seed)
            for fam in families:
                for spec in cfg.models:
                    key = f"{fam.name}_{spec['name']}_seed{seed}"
                    current = {"seed": seed, "model": spec["name"], "stage": f"train {fam.name}"}
                    t1 = time.perf_counter()
                    rows, history = _run_family(cfg, fam, spec, seed, tc, ablation, writer, key)
                    phases[key] = time.perf_counter() - t1
                    report.rows.extend(rows)
                    report.training[key] = history
        report.rows.sort(key=_row_key)
    except Exception as exc:
        _fail(report, out, current, exc)
        raise
    (out / REPORT).write_text(report.dumps(), encoding="utf-8")
    write_tables(report, out)
    if plots and report.rows:
        from .plotting import emit_plots

        emit_plots(report, out / "plots")
    _write_metadata(out, started, time.perf_counter() - t0, phases, "complete")
    return report


def _fail(report: RunReport, out: Path, where, exc: BaseException) -> None:
    report.status = "failed"
    report.failure = {"where": where, "error": f"{type(exc).__name__}: {exc}"}
    report.rows.sort(key=_row_key)
    (out / REPORT).write_text(report.dumps(), encoding="utf-8")
    write_tables(report, out)
    (out / FAILED).write_text("".join(traceback.format_exception(type(exc), exc, exc.__traceback__)))
    _write_metadata(out, None, None, {}, "failed")


def _write_metadata(out: Path, started, wall, phases, status) -> None:
    meta = {
        "status": status,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "wall_time_s": wall,
        "phase_wall_time_s": phases,
        "versions": {
            "disectr": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }
    (out / METADATA).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _run_family(cfg, fam: Family, spec: dict, seed: int, tc: TrainConfig, ablation, writer: _Writer, key: str):
    mc = model_config(spec, fam, ablation)
    model = build_model(fam.train.schema.cardinalities, mc, seed)
    ckpt = train(model, fam.train, fam.valid, tc, on_epoch=writer.epoch_logger(key))
    save_checkpoint(ckpt, writer.out / "checkpoints" / key)
    iid = evaluate(model, fam.test)
    common = {"seed": seed, "model": spec["name"], "kind": mc.kind, "ablation": list(ablation), "train_epoch": ckpt.epoch}
    rows = []
    for cell in fam.cells:
        load_into(model, ckpt)
        if cell.tags["protocol"] == "iid":
            row = dict(common, cell=_cell_id(cell.tags, None), fraction=None, **cell.tags, **_prefixed("", iid))
            row["attention_ranks"] = mean_attention_ranks(model, fam.test)
            rows.append(row)
            continue
        before = evaluate(model, cell.ood_test)
        for fraction in cfg.fractions:
            ft_key = f"{key}_{_cell_id(cell.tags, fraction)}"
            after, transfer = finetune(model, ckpt, cell.ood_train, cell.ood_valid, fraction, tc, writer.epoch_logger(ft_key))
            post = evaluate(model, cell.ood_test)
            row = dict(common, cell=_cell_id(cell.tags, fraction), fraction=fraction, **cell.tags)
            row.update(_prefixed("iid_", iid))
            row.update(_prefixed("", post))
            row["ood_auc_before"] = before["auc"]
            row["drop"] = iid["auc"] - post["auc"]
            row["finetune_epoch"] = after.epoch
            row["n_finetune"] = int(math.floor(fraction * len(cell.ood_train)))
            row["group_distances"] = transfer.group_distances
            row["prototype_distances"] = transfer.prototype_distances
            row["finetune_val_auc"] = [h["val_auc"] for h in transfer.history]
            row["attention_ranks"] = mean_attention_ranks(model, cell.ood_test)
            rows.append(row)
    return rows, ckpt.history


def run_experiment(config_path, scale: str = "desk", seeds=None, force: bool = False, plots: bool = True) -> RunReport:
    from .config import load_config

    return run_config(load_config(config_path, scale, seeds), force=force, plots=plots)


def run_ablation(config_path, toggles, scale: str = "desk", seeds=None, force: bool = False, plots: bool = True) -> RunReport:
    """Same grid as ``run_experiment`` with the named DiseCTR components switched off."""
    from .config import load_config

    return run_config(load_config(config_path, scale, seeds), force=force, ablation=toggles, plots=plots)
