import json
from pathlib import Path

import pytest

from conftest import tiny_config, write_yaml
from disectr.config import from_dict, load_config, schema
from disectr.errors import ConfigError


def test_minimal_config_gets_defaults(tmp_path):
    path = write_yaml(tmp_path / "c.yaml", {"models": [{"kind": "mlp"}]})
    cfg = load_config(path, env={})
    assert cfg.seeds == [0]
    assert cfg.protocols == {"iid": True}
    assert cfg.fractions == [0.1]
    assert cfg.data["synthetic"]["n_train"] == 40000
    assert cfg.model_names() == ["mlp"]


def test_protocols_section_replaces_default_selection(tmp_path):
    raw = tiny_config(tmp_path, protocols={"ood_easy": {"affected_field": "g0_f0"}})
    cfg = from_dict(raw)
    assert "iid" not in cfg.protocols


def test_model_names_are_unique_and_descriptive(tmp_path):
    raw = tiny_config(tmp_path, models=[{"kind": "disectr", "M": 1}, {"kind": "disectr", "M": 4}, {"kind": "fm"}, {"kind": "fm"}])
    assert from_dict(raw).model_names() == ["disectr_M1", "disectr_M4", "fm", "fm_2"]
    raw["models"] = [{"kind": "mlp", "name": "a"}, {"kind": "fm", "name": "a"}]
    with pytest.raises(ConfigError, match="duplicate"):
        from_dict(raw)


def test_yaml_syntax_error_reports_line(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("models:\n  - kind: mlp\nseeds: [0, 1\n")
    with pytest.raises(ConfigError, match=r"line \d+.*invalid YAML"):
        load_config(path, env={})


def test_schema_error_names_field_and_line(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(
        "models:\n"
        "  - kind: mlp\n"
        "protocols:\n"
        "  ood_easy:\n"
        "    affected_field: g0_f0\n"
        "    e_prime: [0.2, 1.5]\n"
    )
    with pytest.raises(ConfigError) as err:
        load_config(path, env={})
    msg = str(err.value)
    assert "protocols.ood_easy.e_prime[1]" in msg
    assert "(line 6)" in msg


def test_unknown_key_and_bad_kind_rejected(tmp_path):
    with pytest.raises(ConfigError, match="models\\[0\\].kind"):
        from_dict({"models": [{"kind": "deepfm"}]})
    with pytest.raises(ConfigError, match="Additional properties"):
        from_dict({"models": [{"kind": "mlp"}], "epochs": 3})
    with pytest.raises(ConfigError, match="'models'"):
        from_dict({})


def test_semantic_errors(tmp_path):
    csv_data = {"source": "csv", "csv": {"path": "x.csv", "fields": ["user", "item"]}}
    with pytest.raises(ConfigError, match="intervention"):
        from_dict(tiny_config(tmp_path, data=csv_data, protocols={"intervention": True}))
    with pytest.raises(ConfigError, match="ood_hard"):
        from_dict(tiny_config(tmp_path, protocols={"ood_hard": {"train_behavior": "click", "test_behavior": "like"}}))
    with pytest.raises(ConfigError, match="no protocol"):
        from_dict(tiny_config(tmp_path, protocols={"iid": False}))
    with pytest.raises(ConfigError, match="repeats"):
        from_dict(tiny_config(tmp_path, seeds=[1, 1]))


def test_env_overrides_output_and_cli_seeds_replace(tmp_path):
    path = write_yaml(tmp_path / "c.yaml", tiny_config(tmp_path / "a"))
    cfg = load_config(path, seeds=[3, 4], env={"DISECTR_OUT": str(tmp_path / "b")})
    assert cfg.output_dir == str(tmp_path / "b")
    assert cfg.seeds == [3, 4]


def test_paper_scale_overrides_only_unset_values(tmp_path):
    raw = tiny_config(tmp_path, train={"max_epochs": 1, "batch_size": 64})
    cfg = from_dict(raw, scale="paper")
    assert cfg.train["lr"] == 1e-4
    assert cfg.train["batch_size"] == 64
    assert cfg.models[0]["d"] == 4
    assert from_dict({"models": [{"kind": "mlp"}]}, scale="paper").models[0]["d"] == 32
    with pytest.raises(ConfigError):
        from_dict(raw, scale="huge")


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/c.yaml", env={})


def test_published_schema_matches_bundled():
    docs = Path(__file__).resolve().parents[1] / "docs" / "config.schema.json"
    assert json.loads(docs.read_text()) == schema()
