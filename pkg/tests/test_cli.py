import csv
import io
import json

import pytest

from conftest import tiny_config, write_yaml
from disectr import cli
from disectr.errors import NumericalError
from disectr.synthetic import CausalWorld


@pytest.fixture
def config(tmp_path):
    cfg = tiny_config(tmp_path / "run", models=[{"kind": "mlp", "d": 4, "hidden": [8]}], protocols={"iid": True, "intervention": True})
    return write_yaml(tmp_path / "c.yaml", cfg)


def _table(text):
    return list(csv.DictReader(io.StringIO(text), delimiter="\t"))


def test_experiment_prints_summary_and_writes_plots(config, tmp_path, capsys):
    assert cli.main(["experiment", "--config", str(config)]) == 0
    rows = _table(capsys.readouterr().out)
    assert [r["cell"] for r in rows] == ["iid", "intervention_f0.2"]
    assert rows[1]["drop"] != ""
    assert (tmp_path / "run" / "plots" / "transfer_efficiency.png").exists()
    assert (tmp_path / "run" / "plots" / "transfer_efficiency.csv").exists()


def test_rerun_without_force_is_config_error(config, capsys):
    assert cli.main(["experiment", "--config", str(config), "--no-figures"]) == 0
    assert cli.main(["experiment", "--config", str(config)]) == 2
    assert "--force" in capsys.readouterr().err
    assert cli.main(["experiment", "--config", str(config), "--force", "--no-figures"]) == 0


def test_seed_flag_replaces_config_seeds(config, tmp_path, capsys):
    assert cli.main(["experiment", "--config", str(config), "--seed", "3", "--seed", "4", "--no-figures"]) == 0
    rows = _table(capsys.readouterr().out)
    assert sorted({r["seed"] for r in rows}) == ["3", "4"]


def test_report_regenerates_identical_files(config, tmp_path, capsys):
    assert cli.main(["experiment", "--config", str(config)]) == 0
    run = tmp_path / "run"
    before = {p.name: p.read_bytes() for p in (run / "plots").iterdir()}
    first = capsys.readouterr().out
    for p in (run / "plots").iterdir():
        p.unlink()
    assert cli.main(["report", str(run)]) == 0
    assert capsys.readouterr().out == first
    assert {p.name: p.read_bytes() for p in (run / "plots").iterdir()} == before


def test_ablate_records_toggles(config, tmp_path):
    cfg = tiny_config(tmp_path / "abl")
    path = write_yaml(tmp_path / "a.yaml", cfg)
    assert cli.main(["ablate", "--config", str(path), "--toggle", "discrepancy", "--toggle", "prototypes"]) == 0
    report = json.loads((tmp_path / "abl" / "report.json").read_text())
    assert report["ablation"] == ["discrepancy", "prototypes"]
    assert cli.main(["ablate", "--config", str(path), "--toggle", "heads"]) == 2


def test_train_writes_checkpoints(config, tmp_path, capsys):
    assert cli.main(["train", "--config", str(config)]) == 0
    out = tmp_path / "run" / "train"
    assert (out / "mlp_seed0" / "manifest.json").exists()
    rows = _table(capsys.readouterr().out)
    assert rows[0]["cell"] == "base_test"
    assert cli.main(["train", "--config", str(config)]) == 2


def test_synth_writes_world_and_csvs(config, tmp_path, capsys):
    out = tmp_path / "synth"
    assert cli.main(["synth", "--config", str(config), "--out", str(out)]) == 0
    seed_dir = out / "seed0"
    world = CausalWorld.load(seed_dir / "world.json")
    with open(seed_dir / "iid_train.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 400
    assert list(rows[0])[: len(world.field_names)] == world.field_names
    assert (seed_dir / "ood_test.csv").exists()
    assert "target_interest=" in capsys.readouterr().out


def test_exit_codes(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("models: [\n")
    assert cli.main(["experiment", "--config", str(bad)]) == 2

    data = tmp_path / "d.csv"
    data.write_text("user,item,label\n1,2,1\n1,3,7\n")
    cfg = tiny_config(tmp_path / "r", data={"source": "csv", "csv": {"path": str(data), "fields": ["user", "item"]}})
    assert cli.main(["experiment", "--config", str(write_yaml(tmp_path / "csv.yaml", cfg))]) == 3

    def boom(*args, **kwargs):
        raise NumericalError("non-finite loss term 'bpr'")

    monkeypatch.setattr("disectr.experiment.run_config", boom)
    good = write_yaml(tmp_path / "g.yaml", tiny_config(tmp_path / "g"))
    assert cli.main(["experiment", "--config", str(good)]) == 4
    assert "bpr" in capsys.readouterr().err

    assert cli.main(["experiment"]) == 2
    assert cli.main(["--help"]) == 0
