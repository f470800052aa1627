"""Comparison reports over metric documents, with optional figures.

The report joins metrics documents on their config echo, writes a
delimited comparison table (first run is the baseline for the delta
columns), summarizes correction/damage diagnostics when available, and
renders the same tables as PNG figures next to the text output.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import DataError

COMPARISON_COLUMNS = ["run", "rule", "alpha", "iterations", "seed", "seed2", "wa", "ua", "delta_wa", "delta_ua"]
DIAG_COLUMNS = [
    "fold",
    "iteration",
    "mean_entropy",
    "changed_fraction",
    "corrected",
    "corrupted",
    "damaged",
    "clean",
]


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def comparison_rows(documents: list[tuple[str, dict]]) -> list[dict]:
    """One row per metrics document; deltas are against the first one."""
    if not documents:
        raise DataError("no metrics documents to compare")
    base_wa = documents[0][1]["wa"]
    base_ua = documents[0][1]["ua"]
    rows = []
    for name, doc in documents:
        cfg = doc.get("config", {})
        rows.append(
            {
                "run": name,
                "rule": cfg.get("rule", ""),
                "alpha": cfg.get("alpha", ""),
                "iterations": cfg.get("iterations", ""),
                "seed": cfg.get("seed", ""),
                "seed2": cfg.get("seed2", ""),
                "wa": doc["wa"],
                "ua": doc["ua"],
                "delta_wa": doc["wa"] - base_wa,
                "delta_ua": doc["ua"] - base_ua,
            }
        )
    return rows


def write_comparison(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARISON_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in COMPARISON_COLUMNS])


def read_diagnostics(path) -> list[dict]:
    """Rows of the per-fold, per-iteration diagnostics a training run wrote."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"diagnostics file not found: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        for rec in reader:
            rows.append(rec)
    return rows


def correction_summary(named_diags: list[tuple[str, list[dict]]]) -> list[dict]:
    """Pool correction/damage counts over folds, per run and iteration."""
    out = []
    for name, rows in named_diags:
        by_iter: dict[int, dict] = {}
        for rec in rows:
            it = int(rec["iteration"])
            agg = by_iter.setdefault(
                it,
                {"corrected": 0, "corrupted": 0, "damaged": 0, "clean": 0, "entropy": [], "changed": []},
            )
            agg["entropy"].append(float(rec["mean_entropy"]))
            agg["changed"].append(float(rec["changed_fraction"]))
            for key in ("corrected", "corrupted", "damaged", "clean"):
                if rec.get(key) not in (None, ""):
                    agg[key] += int(rec[key])
        for it in sorted(by_iter):
            agg = by_iter[it]
            out.append(
                {
                    "run": name,
                    "iteration": it,
                    "mean_entropy": sum(agg["entropy"]) / len(agg["entropy"]),
                    "changed_fraction": sum(agg["changed"]) / len(agg["changed"]),
                    "correction_rate": (agg["corrected"] / agg["corrupted"]) if agg["corrupted"] else "",
                    "damage_rate": (agg["damaged"] / agg["clean"]) if agg["clean"] else "",
                    "corrupted": agg["corrupted"],
                    "clean": agg["clean"],
                }
            )
    return out


def write_correction_summary(path, rows: list[dict]) -> None:
    columns = ["run", "iteration", "mean_entropy", "changed_fraction",
               "correction_rate", "damage_rate", "corrupted", "clean"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def accuracy_figure(documents: list[tuple[str, dict]], path) -> None:
    names = [name for name, _ in documents]
    wa = [doc["wa"] for _, doc in documents]
    ua = [doc["ua"] for _, doc in documents]
    x = range(len(names))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(names)), 3.2))
    ax.bar([i - 0.2 for i in x], wa, width=0.4, label="WA")
    ax.bar([i + 0.2 for i in x], ua, width=0.4, label="UA")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def per_class_figure(documents: list[tuple[str, dict]], path) -> None:
    class_names = documents[0][1].get("class_names") or [
        str(i) for i in range(len(documents[0][1]["per_class_recall"]))
    ]
    n_runs = len(documents)
    width = 0.8 / n_runs
    fig, ax = plt.subplots(figsize=(max(5.0, 0.9 * len(class_names) * n_runs), 3.2))
    for j, (name, doc) in enumerate(documents):
        recalls = [r if r is not None else 0.0 for r in doc["per_class_recall"]]
        xs = [i + (j - (n_runs - 1) / 2) * width for i in range(len(class_names))]
        ax.bar(xs, recalls, width=width, label=name)
    ax.set_xticks(range(len(class_names)))
    ax.set_xticklabels(class_names)
    ax.set_ylabel("per-class recall")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def entropy_figure(summary_rows: list[dict], path) -> None:
    by_run: dict[str, list[tuple[int, float]]] = {}
    for row in summary_rows:
        by_run.setdefault(row["run"], []).append((row["iteration"], row["mean_entropy"]))
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    for name, points in by_run.items():
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean prediction entropy (nats)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def alpha_sweep_figure(documents: list[tuple[str, dict]], path) -> bool:
    """WA against the wdsl blend weight; drawn when >= 3 alphas are present."""
    points = []
    for _, doc in documents:
        cfg = doc.get("config", {})
        if cfg.get("rule") == "wdsl" and cfg.get("alpha") is not None:
            points.append((float(cfg["alpha"]), doc["wa"], doc["ua"]))
    if len({a for a, _, _ in points}) < 3:
        return False
    points.sort()
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label="WA")
    ax.plot([p[0] for p in points], [p[2] for p in points], marker="s", label="UA")
    ax.set_xlabel("alpha")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True
