"""Render training metrics and evaluation results to figures and CSV.

Reads the JSONL metrics stream emitted by the trainer and writes loss
curves, the learning-rate schedule, and codebook perplexity as PNG files,
next to a flat CSV of the same records.  Evaluation report JSONs, when
given, are summarized as an AUC bar chart.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import ParseError  # noqa: E402

LOSS_KEYS = ("total", "l1", "l2", "l_cb", "l_ce", "l_r")
CSV_KEYS = ("step", "lr", "l1", "l2", "l_cb", "l_ce", "l_q", "l_r", "total", "perplexity")


def load_metrics(metrics_path) -> list[dict]:
    records = []
    for ln, line in enumerate(Path(metrics_path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ParseError(f"{metrics_path} line {ln}: invalid metrics record: {e}") from None
    if not records:
        raise ParseError(f"{metrics_path}: no metrics records found")
    return records


def write_metrics_csv(records: list[dict], path) -> None:
    lines = [",".join(CSV_KEYS)]
    for r in records:
        lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k])
                              for k in CSV_KEYS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_training_report(metrics_path, out_dir, eval_paths=()) -> list[Path]:
    """Write figures + CSV derived from one training run; returns the paths."""
    records = load_metrics(metrics_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = [r["step"] for r in records]
    written = []

    csv_path = out / "metrics.csv"
    write_metrics_csv(records, csv_path)
    written.append(csv_path)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in LOSS_KEYS:
        ax.plot(steps, [r[key] for r in records], label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss terms")
    ax.grid(alpha=0.3)
    ax.legend(ncol=3, fontsize=8)
    written.append(_save(fig, out / "loss_terms.png"))

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r["lr"] for r in records], color="tab:red")
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    ax.set_title("cosine schedule")
    ax.grid(alpha=0.3)
    written.append(_save(fig, out / "lr_schedule.png"))

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r["perplexity"] for r in records], color="tab:green")
    ax.set_xlabel("step")
    ax.set_ylabel("perplexity")
    ax.set_title("codebook usage perplexity")
    ax.grid(alpha=0.3)
    written.append(_save(fig, out / "perplexity.png"))

    if eval_paths:
        names, aucs, baselines = [], [], []
        for p in eval_paths:
            rep = json.loads(Path(p).read_text())
            names.append(Path(p).stem)
            aucs.append(rep.get("macro_auc"))
            baselines.append(rep.get("baseline_macro_auc"))
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 3.5))
        xs = range(len(names))
        ax.bar(xs, [a or 0.0 for a in aucs], width=0.4, label="macro AUC")
        if any(b is not None for b in baselines):
            ax.bar([x + 0.4 for x in xs], [b or 0.0 for b in baselines],
                   width=0.4, label="random-init baseline")
        ax.set_xticks([x + 0.2 for x in xs])
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
        ax.set_ylim(0, 1)
        ax.set_ylabel("macro AUC")
        ax.axhline(0.5, color="gray", linestyle=":", linewidth=1)
        ax.legend(fontsize=8)
        ax.set_title("evaluation")
        written.append(_save(fig, out / "evaluation_auc.png"))

    return written
