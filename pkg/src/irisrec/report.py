"""Experiment reports: CSV records, a JSON sidecar, and rendered figures.

The CSV carries only deterministic columns (identical configs produce
byte-identical files); wall-clock timings live in the JSON sidecar next
to the config echo and the per-class confusion summary.  Each report also
renders a matplotlib figure of accuracy against the sweep variable.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

CSV_COLUMNS = ("sweep_var", "value", "accuracy", "correct", "total", "train_size", "test_size")


@dataclass(frozen=True)
class SweepRecord:
    sweep_var: str
    value: object  # the swept value: an int, or a layer name
    accuracy: Fraction
    correct: int
    total: int
    train_size: int
    test_size: int
    wall_ms: float
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Report:
    config_echo: dict
    records: tuple
    confusion: dict  # class -> (correct, total), from the last record's run

    @property
    def accuracy(self) -> Fraction:
        last = self.records[-1]
        return Fraction(last.correct, last.total)


def write_report(report: Report, out_dir, basename: str) -> dict:
    """Write <basename>.csv/.json/.png under out_dir; returns the paths.

    Files are only written once the whole report exists, so a failed run
    never leaves partial output behind.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out_dir / f"{basename}.csv",
        "json": out_dir / f"{basename}.json",
        "png": out_dir / f"{basename}.png",
    }

    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in report.records:
            writer.writerow(
                [
                    rec.sweep_var,
                    rec.value,
                    f"{float(rec.accuracy):.4f}",
                    rec.correct,
                    rec.total,
                    rec.train_size,
                    rec.test_size,
                ]
            )

    doc = {
        "config": report.config_echo,
        "records": [
            {
                "sweep_var": rec.sweep_var,
                "value": rec.value,
                "accuracy": f"{float(rec.accuracy):.4f}",
                "correct": rec.correct,
                "total": rec.total,
                "train_size": rec.train_size,
                "test_size": rec.test_size,
                "wall_ms": round(rec.wall_ms, 3),
                **rec.extras,
            }
            for rec in report.records
        ],
        "confusion": {
            cls: {"correct": c, "total": t} for cls, (c, t) in sorted(report.confusion.items())
        },
    }
    paths["json"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    _render_figure(report, paths["png"])
    return paths


def _render_figure(report: Report, png_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    records = report.records
    if len(records) == 1 and report.confusion:
        classes = sorted(report.confusion)
        rates = [report.confusion[c][0] / report.confusion[c][1] for c in classes]
        ax.bar(range(len(classes)), rates, color="#4878b0")
        ax.set_xticks(range(len(classes)))
        ax.set_xticklabels(classes, rotation=90, fontsize=6)
        ax.set_ylabel("per-class accuracy")
        ax.set_ylim(0.0, 1.05)
        ax.set_title(f"overall accuracy {float(report.accuracy):.4f}")
    else:
        values = [rec.value for rec in records]
        accuracies = [float(rec.accuracy) for rec in records]
        if all(isinstance(v, (int, float)) for v in values):
            ax.plot(values, accuracies, marker="o", color="#4878b0")
        else:
            ax.bar(range(len(values)), accuracies, color="#4878b0")
            ax.set_xticks(range(len(values)))
            ax.set_xticklabels([str(v) for v in values], rotation=45, ha="right")
        ax.set_xlabel(records[0].sweep_var)
        ax.set_ylabel("accuracy")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
