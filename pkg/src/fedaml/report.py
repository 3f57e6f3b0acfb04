"""Report emission: delimited tables, a plain-text pretty table, and
matplotlib figures rendered to files next to the CSV output."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

REPORT_COLUMNS = ["market", "auroc", "auprc", "type1", "type2", "support", "positives"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_metric_table(report: dict[str, dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for market, row in report.items():
            writer.writerow([market] + [_fmt(row.get(c)) for c in REPORT_COLUMNS[1:]])


def pretty_table(report: dict[str, dict]) -> str:
    header = ["Market", "AUROC", "AUPRC", "Type I", "Type II", "Support", "Pos"]
    rows = [[m, _fmt(r.get("auroc")), _fmt(r.get("auprc")), _fmt(r.get("type1")),
             _fmt(r.get("type2")), str(r.get("support", "")), str(r.get("positives", ""))]
            for m, r in report.items()]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def write_economic_table(rows: list[dict], path) -> None:
    columns = ["market", "threshold", "total_loss", "prevented_loss", "prevented_ratio",
               "type1", "type2", "monitored_legit_rate", "n_frozen"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def plot_training_history(history: list[dict], path) -> None:
    """Per-client loss and ranking-quality trajectories over aggregation rounds."""
    clients = sorted({row["client"] for row in history})
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for client in clients:
        rows = [r for r in history if r["client"] == client]
        rounds = [r["round"] for r in rows]
        axes[0].plot(rounds, [r["loss"] for r in rows], label=client)
        auprcs = [(r["round"], r["auprc"]) for r in rows if r.get("auprc") is not None]
        if auprcs:
            axes[1].plot([a for a, _ in auprcs], [b for _, b in auprcs], label=client)
    axes[0].set_xlabel("round")
    axes[0].set_ylabel("training loss")
    axes[1].set_xlabel("round")
    axes[1].set_ylabel("AUPRC")
    axes[1].set_ylim(0, 1)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_score_distribution(scores, labels, path) -> None:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0, 1, 41)
    ax.hist(scores[labels == 0], bins=bins, alpha=0.6, label="legitimate", density=True)
    if (labels == 1).any():
        ax.hist(scores[labels == 1], bins=bins, alpha=0.6, label="illicit", density=True)
    ax.set_xlabel("predicted suspicion")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_economic_summary(rows: list[dict], path) -> None:
    """Prevented-loss ratio per market as a bar chart."""
    markets = [r["market"] for r in rows]
    ratios = [r.get("prevented_ratio") or 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(markets)), 4))
    ax.bar(range(len(markets)), ratios, color="tab:blue")
    ax.set_xticks(range(len(markets)))
    ax.set_xticklabels(markets, rotation=30, ha="right")
    ax.set_ylabel("prevented loss ratio")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_cluster_summary(stats: dict[str, dict[str, float]], path) -> None:
    """Cluster statistics (accounts, hits, empty clusters) per method."""
    methods = sorted(stats)
    keys = ["total_accounts", "malicious_hits", "zero_hit_clusters"]
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.5))
    for ax, key in zip(axes, keys):
        ax.bar(range(len(methods)), [stats[m].get(key, 0) for m in methods],
               color="tab:orange")
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, rotation=20, ha="right")
        ax.set_title(key.replace("_", " "))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_all(out_dir, metric_report=None, history=None, scores=None, labels=None,
               economic_rows=None, cluster_stats=None) -> list[str]:
    """Render whichever artifacts are available; returns the files written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if metric_report:
        path = out_dir / "report.csv"
        write_metric_table(metric_report, path)
        written.append(str(path))
        text = out_dir / "report.txt"
        text.write_text(pretty_table(metric_report), encoding="utf-8")
        written.append(str(text))
    figures = out_dir / "figures"
    figures.mkdir(exist_ok=True)
    if history:
        path = figures / "training_history.png"
        plot_training_history(history, path)
        written.append(str(path))
    if scores is not None and labels is not None:
        path = figures / "score_distribution.png"
        plot_score_distribution(scores, labels, path)
        written.append(str(path))
    if economic_rows:
        path = out_dir / "economic_report.csv"
        write_economic_table(economic_rows, path)
        written.append(str(path))
        fig_path = figures / "prevented_loss.png"
        plot_economic_summary(economic_rows, fig_path)
        written.append(str(fig_path))
    if cluster_stats:
        path = figures / "cluster_summary.png"
        plot_cluster_summary(cluster_stats, path)
        written.append(str(path))
    return written
