"""Command line: train, experiment, ablate, synth and report subcommands."""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click

from .config import SCALES, load_config
from .errors import ConfigError, DataError, DiseCTRError, NumericalError

SUMMARY_COLUMNS = ("seed", "model", "cell", "auc", "gauc", "logloss", "iid_auc", "drop", "prototype_distances")


def _summary(rows, stream=None) -> None:
    """Tab-delimited summary of report rows on stdout."""
    stream = stream or sys.stdout
    w = csv.writer(stream, delimiter="\t", lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        out = []
        for c in SUMMARY_COLUMNS:
            v = r.get(c)
            if isinstance(v, float):
                v = f"{v:.6f}"
            elif isinstance(v, list):
                v = "[" + ", ".join(f"{x:.4f}" for x in v) + "]"
            out.append("" if v is None else v)
        w.writerow(out)


config_option = click.option(
    "--config", "config_path", required=True, type=click.Path(dir_okay=False), help="YAML experiment config."
)
seed_option = click.option("--seed", "seeds", type=int, multiple=True, help="Seed(s) replacing the config's list.")
scale_option = click.option("--scale", type=click.Choice(SCALES), default="desk", show_default=True)
force_option = click.option("--force", is_flag=True, help="Overwrite an existing run in the output directory.")


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (repeat for debug output).")
def cli(verbose):
    """Disentangled-interest CTR models and OOD transfer experiments."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@seed_option
@scale_option
@force_option
def train(config_path, seeds, scale, force):
    """Train every configured model on the IID training split and save checkpoints."""
    from .experiment import model_config, prepare, train_config
    from .model import build_model
    from .trainer import evaluate, save_checkpoint
    from .trainer import train as fit

    cfg = load_config(config_path, scale, list(seeds))
    out = Path(cfg.output_dir) / "train"
    if (out / "train.json").exists() and not force:
        raise ConfigError(f"{out} already holds trained checkpoints; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        fam = prepare(cfg, seed)[0]
        tc = train_config(cfg, seed)
        for spec in cfg.models:
            mc = model_config(spec, fam)
            model = build_model(fam.train.schema.cardinalities, mc, seed)
            ckpt = fit(model, fam.train, fam.valid, tc)
            save_checkpoint(ckpt, out / f"{spec['name']}_seed{seed}")
            rows.append(dict(evaluate(model, fam.test), seed=seed, model=spec["name"], cell=f"{fam.name}_test"))
    (out / "train.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    _summary(rows)


@cli.command()
@config_option
@seed_option
@scale_option
@force_option
@click.option("--no-figures", is_flag=True, help="Write series CSVs only.")
def experiment(config_path, seeds, scale, force, no_figures):
    """Run the configured protocol grid and write report, tables and plots."""
    from .experiment import run_config
    from .plotting import emit_plots

    cfg = load_config(config_path, scale, list(seeds))
    report = run_config(cfg, force=force, plots=False)
    emit_plots(report, Path(cfg.output_dir) / "plots", figures=not no_figures)
    _summary(report.rows)


@cli.command()
@config_option
@seed_option
@scale_option
@force_option
@click.option(
    "--toggle",
    "toggles",
    multiple=True,
    type=click.Choice(["prototypes", "weak_supervision", "discrepancy"]),
    help="Component to switch off (repeatable).",
)
def ablate(config_path, seeds, scale, force, toggles):
    """Run the grid with DiseCTR components removed."""
    from .experiment import run_config

    cfg = load_config(config_path, scale, list(seeds))
    report = run_config(cfg, force=force, ablation=toggles)
    _summary(report.rows)


@cli.command()
@config_option
@seed_option
@force_option
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Directory for world.json and CSVs.")
def synth(config_path, seeds, force, out_dir):
    """Sample a synthetic world and write its IID and intervened datasets as CSV."""
    from .data import write_csv
    from .experiment import synthetic_world, target_interest
    from .synthetic import sample_dataset

    cfg = load_config(config_path, "desk", list(seeds))
    if cfg.data.get("source", "synthetic") != "synthetic":
        raise ConfigError("field 'data.source': synth needs a synthetic data section")
    syn = cfg.data["synthetic"]
    base = Path(out_dir) if out_dir else Path(cfg.output_dir) / "synthetic"
    for seed in cfg.seeds:
        out = base / f"seed{seed}"
        if (out / "world.json").exists() and not force:
            raise ConfigError(f"{out} already holds a world; pass --force to overwrite")
        out.mkdir(parents=True, exist_ok=True)
        world = synthetic_world(cfg, seed)
        world.save(out / "world.json")
        t = target_interest(world, syn.get("target_interest", "auto"))
        shift = world.flip_intervention(t)
        for k, split in enumerate(("train", "valid", "test")):
            n = syn[f"n_{split}"]
            write_csv(sample_dataset(world, n, None, 1000 * seed + 1 + k, split), out / f"iid_{split}.csv")
            write_csv(sample_dataset(world, n, shift, 1000 * seed + 7 + k, split), out / f"ood_{split}.csv")
        click.echo(f"{out}\ttarget_interest={t}\tfields={','.join(world.field_names)}")


@cli.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--no-figures", is_flag=True, help="Write series CSVs only.")
def report(run_dir, no_figures):
    """Regenerate tables, series files and figures from a finished run."""
    from .experiment import load_report, write_tables
    from .plotting import emit_plots

    rep = load_report(run_dir)
    write_tables(rep, Path(run_dir))
    for path in emit_plots(rep, Path(run_dir) / "plots", figures=not no_figures):
        click.echo(str(path), err=True)
    _summary(rep.rows)


EXIT_CODES = ((ConfigError, 2), (NumericalError, 4), (DataError, 3), (DiseCTRError, 1))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="disectr", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except DiseCTRError as exc:
        click.echo(f"error: {exc}", err=True)
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                return code
    except click.exceptions.Exit as exc:
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
