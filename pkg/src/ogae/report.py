"""Comparison tables and figures for a finished evaluation.

The text table mirrors the benchmark layout: one row per method, one
column per metric, the best value starred and competitors the paired
bootstrap cannot separate from it underscored. The same content goes out
as CSV for machine diffing, and the figure set (ROC, PR, score
histograms, latent-spread curves) lands next to them as PNG files.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # render to files only; no display in scope
import matplotlib.pyplot as plt
import numpy as np

from .errors import UsageError
from .metrics import BootstrapReport, pr_points, roc_points

logger = logging.getLogger(__name__)

METRIC_ORDER = ("auroc", "aupr", "auroc30")


def _cell(value: float, name: str, rep: BootstrapReport | None) -> str:
    text = f"{value:.4f}"
    if rep is None:
        return text
    if name in rep.bold:
        return f"*{text}*"
    if name in rep.underline:
        return f"_{text}_"
    return text


def render_table(
    point: dict[str, dict[str, float]],
    bootstrap: dict[str, BootstrapReport] | None = None,
    metrics: tuple[str, ...] = METRIC_ORDER,
) -> str:
    """Plain-text comparison table.

    ``point``: method -> {metric -> value}. ``bootstrap``: metric ->
    report; when given, the best method per metric is starred and
    statistically indistinguishable runners-up are marked _so_.
    """
    if not point:
        raise UsageError("no methods to tabulate")
    methods = list(point)
    bootstrap = bootstrap or {}
    headers = ["method"] + [m.upper() for m in metrics]
    rows = []
    for name in methods:
        row = [name]
        for metric in metrics:
            if metric not in point[name]:
                raise UsageError(f"method {name!r} is missing metric {metric!r}")
            row.append(_cell(point[name][metric], name, bootstrap.get(metric)))
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    if bootstrap:
        any_rep = next(iter(bootstrap.values()))
        lines.append("")
        lines.append(
            f"*best*  _indistinguishable from best_ "
            f"(paired bootstrap, {any_rep.n_resamples} resamples, "
            f"p > {any_rep.threshold:.4g} after Bonferroni)"
        )
    return "\n".join(lines) + "\n"


def write_table_csv(
    path: str | Path,
    point: dict[str, dict[str, float]],
    bootstrap: dict[str, BootstrapReport] | None = None,
    metrics: tuple[str, ...] = METRIC_ORDER,
) -> None:
    """Delimited twin of the text table, with flags as explicit columns."""
    bootstrap = bootstrap or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["method"]
        for m in metrics:
            header += [m, f"{m}_p_value", f"{m}_best", f"{m}_indistinguishable"]
        w.writerow(header)
        for name, vals in point.items():
            row = [name]
            for m in metrics:
                rep = bootstrap.get(m)
                row.append(f"{vals[m]:.6f}")
                row.append("" if rep is None else f"{rep.p_values.get(name, float('nan')):.4f}")
                row.append("" if rep is None else str(name in rep.bold).lower())
                row.append("" if rep is None else str(name in rep.underline).lower())
            w.writerow(row)


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def _roc_figure(labels, scores_by_method, path):
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for name, s in scores_by_method.items():
        fpr, tpr = roc_points(labels, s)
        ax.plot(fpr, tpr, label=name, linewidth=1.4)
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8, alpha=0.5)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("ROC")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _pr_figure(labels, scores_by_method, path):
    fig, ax = plt.subplots(figsize=(5.5, 5))
    prevalence = float(np.mean(labels))
    for name, s in scores_by_method.items():
        recall, precision = pr_points(labels, s)
        ax.plot(recall, precision, label=name, linewidth=1.4)
    ax.axhline(prevalence, color="k", linestyle="--", linewidth=0.8, alpha=0.5)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_ylim(0, 1.02)
    ax.set_title("precision-recall")
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _hist_figure(labels, scores_by_method, path):
    n = len(scores_by_method)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.2), squeeze=False)
    labels = np.asarray(labels)
    for ax, (name, s) in zip(axes[0], scores_by_method.items()):
        s = np.asarray(s)
        ax.hist(s[labels == 0], bins=40, alpha=0.6, density=True, label="normal")
        ax.hist(s[labels == 1], bins=40, alpha=0.6, density=True, label="anomalous")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("score")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _spread_figure(logs: dict[str, list[dict]], path):
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for prefix, rows in logs.items():
        epochs = [r["epoch"] for r in rows]
        spread = [r["latent_spread"] for r in rows]
        ax.plot(epochs, spread, marker="o", markersize=3, label=prefix)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean pairwise latent distance$^2$")
    ax.set_title("latent spread during training")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_figures(
    out_dir: str | Path,
    labels: np.ndarray,
    scores_by_method: dict[str, np.ndarray],
    logs: dict[str, list[dict]] | None = None,
) -> list[Path]:
    """Render the standard figure set; returns the written paths."""
    if not scores_by_method:
        raise UsageError("no score sets to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fname, fn in (
        ("roc.png", _roc_figure),
        ("pr.png", _pr_figure),
        ("score-hist.png", _hist_figure),
    ):
        path = out_dir / fname
        fn(labels, scores_by_method, path)
        written.append(path)
    if logs:
        path = out_dir / "latent-spread.png"
        _spread_figure(logs, path)
        written.append(path)
    logger.info("wrote %d figures to %s", len(written), out_dir)
    return written
