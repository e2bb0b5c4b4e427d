"""Rendering of ablation results: delimited table, text table, and figures."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .ablation import AblationRecord, CellStats

TSV_COLUMNS = ("row_no", "config", "backbone", "auc_mean", "auc_std", "logloss_mean", "logloss_std")


def write_records_jsonl(path, records: list[AblationRecord]) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def write_tsv(path, cells: list[CellStats]) -> None:
    lines = ["\t".join(TSV_COLUMNS)]
    for c in sorted(cells, key=lambda c: (c.row, c.backbone)):
        lines.append(
            f"{c.row}\t{c.label}\t{c.backbone}\t"
            f"{c.auc_mean:.6f}\t{c.auc_std:.6f}\t{c.logloss_mean:.6f}\t{c.logloss_std:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def render_text_table(cells: list[CellStats], backbones: list[str]) -> str:
    """Fixed-width matrix: one line per configuration, AUC and LogLoss per backbone."""
    by_cell = {(c.row, c.backbone): c for c in cells}
    rows = sorted({c.row for c in cells})
    labels = {c.row: c.label for c in cells}
    label_w = max([len("Config")] + [len(labels[r]) for r in rows]) + 2
    col_w = 17

    def fmt(mean, std):
        return f"{mean:.4f}±{std:.4f}".center(col_w)

    head1 = " " * (4 + label_w) + "".join(b.center(2 * col_w + 1) for b in backbones)
    head2 = "No. " + "Config".ljust(label_w) + "".join(
        "AUC".center(col_w) + " " + "LogLoss".center(col_w) for _ in backbones
    )
    out = [head1, head2, "-" * len(head2)]
    for r in rows:
        line = f"{r:<4}" + labels[r].ljust(label_w)
        for b in backbones:
            c = by_cell.get((r, b))
            if c is None:
                line += "n/a".center(col_w) + " " + "n/a".center(col_w)
            else:
                line += fmt(c.auc_mean, c.auc_std) + " " + fmt(c.logloss_mean, c.logloss_std)
        out.append(line)
    return "\n".join(out) + "\n"


def _grouped_bars(ax, cells, backbones, metric: str):
    rows = sorted({c.row for c in cells})
    by_cell = {(c.row, c.backbone): c for c in cells}
    width = 0.8 / max(len(backbones), 1)
    x = np.arange(len(rows))
    for i, b in enumerate(backbones):
        means = [getattr(by_cell[(r, b)], f"{metric}_mean") if (r, b) in by_cell else np.nan for r in rows]
        stds = [getattr(by_cell[(r, b)], f"{metric}_std") if (r, b) in by_cell else 0.0 for r in rows]
        ax.bar(x + (i - (len(backbones) - 1) / 2) * width, means, width, yerr=stds, capsize=2, label=b)
    ax.set_xticks(x)
    ax.set_xticklabels([str(r) for r in rows])
    ax.set_xlabel("configuration")
    ax.set_ylabel(metric.upper() if metric == "auc" else "LogLoss")
    finite = [getattr(c, f"{metric}_mean") for c in cells]
    if finite:
        lo, hi = min(finite), max(finite)
        pad = 0.1 * (hi - lo) if hi > lo else 0.01
        ax.set_ylim(lo - pad, hi + 3 * pad)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)


def render_figures(out_dir, cells: list[CellStats], backbones: list[str]) -> list[Path]:
    """Write one bar chart per metric; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric in ("auc", "logloss"):
        fig, ax = plt.subplots(figsize=(8, 4))
        _grouped_bars(ax, cells, backbones, metric)
        ax.set_title(f"{'AUC' if metric == 'auc' else 'LogLoss'} by configuration (mean ± std)")
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def render_pretrain_curves(out_dir, logs: dict[str, list[dict]]) -> Path | None:
    """Loss-per-epoch curves for each pretraining mode, if logs are present."""
    if not logs:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, entries in sorted(logs.items()):
        epochs = [e["epoch"] for e in entries]
        losses = [e["mean_loss"] for e in entries]
        ax.plot(epochs, losses, marker="o", label=mode)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean pretrain loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out_dir / "pretrain_loss.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
