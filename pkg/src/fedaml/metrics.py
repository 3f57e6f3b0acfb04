"""Ranking and error metrics for heavily imbalanced edge classification."""

from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative.

    Ties count one half (Mann-Whitney convention). Requires both classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise MetricError("auroc: undefined metric, needs both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def auprc(scores, labels) -> float:
    """Average precision (step-interpolated area under precision-recall).

    Edges sharing a score are absorbed in one step, so tie ordering cannot
    affect the result.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricError("auprc: no positives")
    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        group_pos = int(sorted_labels[i:j + 1].sum())
        tp += group_pos
        seen = j + 1
        if group_pos:
            ap += (tp / seen) * (group_pos / n_pos)
        i = j + 1
    return float(ap)


def error_rates(scores, labels, threshold: float) -> tuple[float | None, float | None]:
    """(type I, type II) at a decision threshold; score >= threshold is positive.

    A missing class yields None for its rate rather than a silent zero.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    predicted = scores >= threshold
    legit = labels == 0
    illicit = labels == 1
    type1 = float(predicted[legit].mean()) if legit.any() else None
    type2 = float((~predicted[illicit]).mean()) if illicit.any() else None
    return type1, type2


def summary_row(scores, labels, threshold: float = 0.5) -> dict:
    """One table row of metrics; ranking metrics are None when undefined."""
    labels = np.asarray(labels)
    row: dict = {"support": int(len(labels)), "positives": int((labels == 1).sum())}
    try:
        row["auroc"] = auroc(scores, labels)
    except MetricError:
        row["auroc"] = None
    try:
        row["auprc"] = auprc(scores, labels)
    except MetricError:
        row["auprc"] = None
    t1, t2 = error_rates(scores, labels, threshold)
    row["type1"] = t1
    row["type2"] = t2
    return row


def evaluation_report(scores_by_market: dict[str, np.ndarray],
                      labels_by_market: dict[str, np.ndarray],
                      threshold: float = 0.5, overall_mode: str = "pooled") -> dict[str, dict]:
    """Per-market rows plus an Overall row.

    The overall row pools predictions across markets by default; the caller is
    expected to have deduplicated cross-border edges (one canonical market per
    edge). ``overall_mode='macro'`` averages the per-market rows instead.
    """
    report: dict[str, dict] = {}
    for market in sorted(scores_by_market):
        report[market] = summary_row(scores_by_market[market],
                                     labels_by_market[market], threshold)
    if overall_mode == "pooled":
        pooled_scores = np.concatenate([np.asarray(scores_by_market[m])
                                        for m in sorted(scores_by_market)])
        pooled_labels = np.concatenate([np.asarray(labels_by_market[m])
                                        for m in sorted(scores_by_market)])
        report["Overall"] = summary_row(pooled_scores, pooled_labels, threshold)
    elif overall_mode == "macro":
        keys = ("auroc", "auprc", "type1", "type2")
        rows = [r for m, r in report.items()]
        overall = {"support": sum(r["support"] for r in rows),
                   "positives": sum(r["positives"] for r in rows)}
        for key in keys:
            vals = [r[key] for r in rows if r[key] is not None]
            overall[key] = float(np.mean(vals)) if vals else None
        report["Overall"] = overall
    else:
        raise MetricError(f"unknown overall mode {overall_mode!r}")
    return report
