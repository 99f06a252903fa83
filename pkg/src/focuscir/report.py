"""Metric tables, metric files and sensitivity plots."""
from __future__ import annotations

import json
import os
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence


def round2(value: float) -> Decimal:
    """Two-decimal rounding of the printed value (81.985 -> 81.99, not binary-rounded 81.98)."""
    return Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def metric_label(m: dict) -> str:
    return m["metric"] if m["k"] is None else f"{m['metric']}@{m['k']}"


def format_table(metrics: Sequence[dict], dataset: str) -> str:
    if not metrics:
        return f"{dataset}: no metrics\n"
    labels = [metric_label(m) for m in metrics]
    values = [f"{round2(m['value'])}" for m in metrics]
    widths = [max(len(a), len(b)) for a, b in zip(labels, values)]
    header = " | ".join(l.rjust(w) for l, w in zip(labels, widths))
    row = " | ".join(v.rjust(w) for v, w in zip(values, widths))
    rule = "-+-".join("-" * w for w in widths)
    return f"{dataset}\n{header}\n{rule}\n{row}\n"


def write_metrics(metrics: Sequence[dict], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for m in metrics:
            fh.write(json.dumps({"metric": m["metric"], "k": m["k"], "value": m["value"]}, sort_keys=True) + "\n")
    return path


def read_metrics(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def report(metrics: Sequence[dict], dataset: str, out_dir: str | os.PathLike) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "report.txt"
    table.write_text(format_table(metrics, dataset), encoding="utf-8")
    return {"table": table, "metrics": write_metrics(metrics, out / "metrics.jsonl")}


def plot_sweep(param: str, values: Sequence[float], series: dict[str, Sequence[float]],
               path: str | os.PathLike) -> Path:
    """Metric-versus-hyperparameter line plot, one line per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    positions = list(range(len(values)))
    for name, ys in series.items():
        ax.plot(positions, ys, marker="o", label=name)
    ax.set_xticks(positions, [str(v) for v in values])
    ax.set_xlabel(param)
    ax.set_ylabel("recall (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
