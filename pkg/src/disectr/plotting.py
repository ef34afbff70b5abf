"""Plot-ready series files and matplotlib renderings derived from a run report."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError

plt.rcParams.update(
    {
        "figure.figsize": (5.0, 3.2),
        "font.size": 9,
        "axes.linewidth": 0.6,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "legend.frameon": False,
        "savefig.dpi": 150,
    }
)

# no Software/date stamps, so re-rendering gives the same bytes
_PNG_META = {"Software": None}


def _mean(values) -> float:
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else float("nan")


def _rows(report) -> list[dict]:
    rows = report.rows if hasattr(report, "rows") else report["rows"]
    if not rows:
        raise DataError("report has no rows to plot")
    return rows


def _models(rows) -> list[str]:
    return sorted({r["model"] for r in rows})


def _write(path: Path, header: list[str], body: list[list]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
    return path


def transfer_accuracy_series(rows) -> tuple[list[str], list[list]]:
    """Mean post-fine-tune OOD AUC against e' (one line per model and fraction)."""
    models = _models(rows)
    easy = [r for r in rows if r.get("protocol") == "ood_easy"]
    keys = sorted({(r["fraction"], r["e_prime"]) for r in easy})
    body = []
    for fraction, e_prime in keys:
        cell = [r for r in easy if r["fraction"] == fraction and r["e_prime"] == e_prime]
        body.append([e_prime, fraction] + [_mean(r["auc"] for r in cell if r["model"] == m) for m in models])
    return ["e_prime", "fraction"] + models, body


def transfer_efficiency_series(rows) -> tuple[list[str], list[list]]:
    """Mean post-fine-tune OOD AUC against the fine-tune fraction, per protocol cell."""
    models = _models(rows)
    ood = [r for r in rows if r.get("fraction") is not None]
    keys = sorted({(r["protocol"], r.get("e_prime") if r.get("e_prime") is not None else -1.0, r["fraction"]) for r in ood})
    body = []
    for protocol, e_prime, fraction in keys:
        cell = [
            r
            for r in ood
            if r["protocol"] == protocol and r["fraction"] == fraction and (r.get("e_prime") if r.get("e_prime") is not None else -1.0) == e_prime
        ]
        body.append(
            [protocol, "" if e_prime == -1.0 else e_prime, fraction]
            + [_mean(r["auc"] for r in cell if r["model"] == m) for m in models]
        )
    return ["protocol", "e_prime", "fraction"] + models, body


def _per_interest_series(rows, key: str, prefix: str) -> tuple[list[str], list[list]]:
    have = [r for r in rows if r.get(key)]
    if not have:
        return [], []
    M = max(len(r[key]) for r in have)
    header = ["model", "cell", "seed"] + [f"{prefix}{i + 1}" for i in range(M)]
    body = []
    for r in sorted(have, key=lambda r: (r["model"], r["cell"], r["seed"])):
        values = list(r[key]) + [""] * (M - len(r[key]))
        body.append([r["model"], r["cell"], r["seed"]] + values)
    return header, body


def prototype_distance_series(rows):
    """Per-prototype transfer distance, one column per interest."""
    return _per_interest_series(rows, "prototype_distances", "prototype_")


def attention_rank_series(rows):
    """Mean attention rank of each interest (1 = least attended)."""
    return _per_interest_series(rows, "attention_ranks", "interest_")


SERIES = {
    "transfer_accuracy": transfer_accuracy_series,
    "transfer_efficiency": transfer_efficiency_series,
    "prototype_distances": prototype_distance_series,
    "attention_ranks": attention_rank_series,
}


def write_series(report, out_dir: str | Path) -> list[Path]:
    rows = _rows(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, fn in SERIES.items():
        header, body = fn(rows)
        if body:
            written.append(_write(out / f"{name}.csv", header, body))
    return written


def _line_plot(path: Path, x_label: str, header, body, x_col: int, first_model_col: int, group_cols=()):
    fig, ax = plt.subplots()
    models = header[first_model_col:]
    groups = sorted({tuple(row[c] for c in group_cols) for row in body})
    for g in groups:
        sub = [row for row in body if tuple(row[c] for c in group_cols) == g]
        named = [f"{header[c]}={v}" for c, v in zip(group_cols, g) if v != ""]
        suffix = " (" + ", ".join(named) + ")" if named else ""
        for j, m in enumerate(models):
            xs = [row[x_col] for row in sub]
            ys = [row[first_model_col + j] for row in sub]
            ax.plot(xs, ys, marker="o", ms=3, lw=1, label=f"{m}{suffix}")
    ax.set_xlabel(x_label)
    ax.set_ylabel("OOD test AUC")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def _bar_plot(path: Path, header, body, y_label: str):
    value_cols = [i for i, h in enumerate(header) if i >= 3]
    models = sorted({row[0] for row in body})
    fig, ax = plt.subplots()
    width = 0.8 / max(len(models), 1)
    for k, m in enumerate(models):
        sub = [row for row in body if row[0] == m]
        means = [_mean(row[c] for row in sub if row[c] != "") for c in value_cols]
        xs = [i + k * width for i in range(len(value_cols))]
        ax.bar(xs, means, width=width, label=m)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(value_cols))])
    ax.set_xticklabels([str(i + 1) for i in range(len(value_cols))])
    ax.set_xlabel("interest")
    ax.set_ylabel(y_label)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def render(report, out_dir: str | Path) -> list[Path]:
    rows = _rows(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    figures = []
    header, body = transfer_accuracy_series(rows)
    if body:
        figures.append(_line_plot(out / "transfer_accuracy.png", "target CTR of the low group (e')", header, body, 0, 2, (1,)))
    header, body = transfer_efficiency_series(rows)
    if body:
        figures.append(_line_plot(out / "transfer_efficiency.png", "fine-tune fraction", header, body, 2, 3, (0, 1)))
    header, body = prototype_distance_series(rows)
    if body:
        figures.append(_bar_plot(out / "prototype_distances.png", header, body, "mean transfer distance"))
    header, body = attention_rank_series(rows)
    if body:
        figures.append(_bar_plot(out / "attention_ranks.png", header, body, "mean attention rank"))
    return figures


def emit_plots(report, out_dir: str | Path, figures: bool = True) -> list[Path]:
    """Write every series CSV (and, with ``figures``, its PNG) under ``out_dir``."""
    written = write_series(report, out_dir)
    if figures:
        written += render(report, out_dir)
    return written
