"""Experiment configuration: YAML files validated against a bundled JSON schema."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .errors import ConfigError

OUT_ENV = "DISECTR_OUT"
SCALES = ("desk", "paper")

DEFAULTS = {
    "output_dir": "runs/experiment",
    "seeds": [0],
    "data": {
        "source": "synthetic",
        "synthetic": {"world": {}, "n_train": 40000, "n_valid": 5000, "n_test": 10000, "target_interest": "auto"},
    },
    "train": {},
    "protocols": {"iid": True},
    "fractions": [0.1],
}

# --scale paper values; desk defaults live on the dataclasses themselves
PAPER_TRAIN = {"lr": 1e-4, "batch_size": 2048}
PAPER_MODEL = {"d": 32}


def schema() -> dict:
    text = resources.files("disectr").joinpath("config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _dotted(path) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _line_of(node, path) -> int | None:
    """Source line (1-based) of the YAML node at ``path``, or of its closest ancestor."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
        line = node.start_mark.line + 1
    return line


@dataclass
class ExperimentConfig:
    output_dir: str
    seeds: list[int]
    data: dict
    models: list[dict]
    train: dict = field(default_factory=dict)
    protocols: dict = field(default_factory=dict)
    fractions: list[float] = field(default_factory=list)
    scale: str = "desk"

    def to_dict(self) -> dict:
        return {
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "data": copy.deepcopy(self.data),
            "models": copy.deepcopy(self.models),
            "train": copy.deepcopy(self.train),
            "protocols": copy.deepcopy(self.protocols),
            "fractions": list(self.fractions),
            "scale": self.scale,
        }

    def model_names(self) -> list[str]:
        return [m["name"] for m in self.models]


def _name_models(models: list[dict]) -> list[dict]:
    out, seen = [], {}
    for m in models:
        m = dict(m)
        if "name" not in m:
            base = m["kind"] if "M" not in m or m["kind"] != "disectr" else f"disectr_M{m['M']}"
            seen[base] = seen.get(base, 0) + 1
            m["name"] = base if seen[base] == 1 else f"{base}_{seen[base]}"
        out.append(m)
    names = [m["name"] for m in out]
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise ConfigError(f"field 'models': duplicate model names {dup}")
    return out


def _semantic_checks(cfg: dict, where: str) -> None:
    data = cfg["data"]
    protos = cfg["protocols"]
    source = data.get("source", "synthetic")
    if source == "csv" and "csv" not in data:
        raise ConfigError(f"{where}: field 'data.csv' is required when data.source is 'csv'")
    if protos.get("intervention") and source != "synthetic":
        raise ConfigError(f"{where}: field 'protocols.intervention' needs data.source 'synthetic'")
    if "ood_hard" in protos and source != "csv":
        raise ConfigError(f"{where}: field 'protocols.ood_hard' needs a csv source with a behavior column")
    if not any(protos.get(k) for k in ("iid", "intervention", "ood_easy", "ood_hard")):
        raise ConfigError(f"{where}: field 'protocols' selects no protocol")
    if len(set(cfg["seeds"])) != len(cfg["seeds"]):
        raise ConfigError(f"{where}: field 'seeds' repeats a seed")


def from_dict(raw: dict, where: str = "<config>", scale: str = "desk", node=None) -> ExperimentConfig:
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: top level must be a mapping")
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        line = _line_of(node, path)
        at = f" (line {line})" if line else ""
        raise ConfigError(f"{where}: field '{_dotted(path)}'{at}: {err.message}")
    cfg = _merge(DEFAULTS, raw)
    if "protocols" in raw:
        # a protocols section replaces the default selection instead of adding to it
        cfg["protocols"] = copy.deepcopy(raw["protocols"])
    if scale == "paper":
        cfg["train"] = _merge(PAPER_TRAIN, cfg["train"])
        cfg["models"] = [_merge(PAPER_MODEL, m) for m in cfg["models"]]
    _semantic_checks(cfg, where)
    return ExperimentConfig(
        output_dir=cfg["output_dir"],
        seeds=list(cfg["seeds"]),
        data=cfg["data"],
        models=_name_models(cfg["models"]),
        train=cfg["train"],
        protocols=cfg["protocols"],
        fractions=list(cfg["fractions"]),
        scale=scale,
    )


def load_config(
    path: str | Path,
    scale: str = "desk",
    seeds: list[int] | None = None,
    env: dict | None = None,
) -> ExperimentConfig:
    """Parse and validate a YAML config. ``seeds`` replaces the file's seed list; ``DISECTR_OUT`` the output dir."""
    path = Path(path)
    env = os.environ if env is None else env
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" line {mark.line + 1}" if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{path}:{line}: invalid YAML: {problem}") from None
    cfg = from_dict(raw if raw is not None else {}, str(path), scale, node)
    if seeds:
        cfg.seeds = list(seeds)
    if env.get(OUT_ENV):
        cfg.output_dir = env[OUT_ENV]
    return cfg
