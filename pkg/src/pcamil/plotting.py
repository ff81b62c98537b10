"""Figures for experiment and sweep reports (PNG, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METHOD_COLORS = {
    "Baseline": "#7f7f7f",
    "CI-Baseline": "#1f77b4",
    "CI-CRC": "#9467bd",
    "MIL-CRC": "#ff7f0e",
    "CIMIL-CRC": "#d62728",
}

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "pcamil",
}

# Software tag left out so identical runs give identical bytes across hosts
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def roc_points(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    """FPR/TPR at every distinct threshold, ties grouped."""
    y = np.asarray(labels, dtype=int)
    s = np.asarray(scores, dtype=float)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    return np.r_[0.0, fp / max(1, len(y) - y.sum())], np.r_[0.0, tp / max(1, y.sum())]


def pr_points(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels, dtype=int)
    s = np.asarray(scores, dtype=float)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    return tp / max(1, y.sum()), tp / (ends + 1)


def curve_figures(curves: dict[str, list[tuple[np.ndarray, np.ndarray]]], out_dir) -> list[Path]:
    """ROC and PR panels, one line per fold, colour per method.

    ``curves`` maps a method name to its per-fold ``(labels, scores)``.
    """
    out_dir = Path(out_dir)
    with plt.rc_context(_RC):
        fig, (ax_roc, ax_pr) = plt.subplots(1, 2, figsize=(8, 3.6))
        for method, folds in curves.items():
            color = METHOD_COLORS.get(method)
            for i, (y, s) in enumerate(folds):
                fpr, tpr = roc_points(y, s)
                rec, prec = pr_points(y, s)
                label = method if i == 0 else None
                ax_roc.step(fpr, tpr, where="post", color=color, alpha=0.6, lw=1, label=label)
                ax_pr.step(rec, prec, where="post", color=color, alpha=0.6, lw=1, label=label)
        ax_roc.plot([0, 1], [0, 1], ls=":", color="k", lw=0.8)
        ax_roc.set(xlabel="False positive rate", ylabel="True positive rate", title="ROC")
        ax_pr.set(xlabel="Recall", ylabel="Precision", title="Precision-recall", ylim=(0, 1.02))
        ax_roc.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return [_save(fig, out_dir / "curves.png")]


def metric_bars(summary: dict, out_dir, metrics=("auroc", "auprc", "f1", "kappa")) -> Path:
    """Per-method mean with CI error bars, one group per metric."""
    methods = list(summary)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7, 3.2))
        width = 0.8 / max(1, len(methods))
        x = np.arange(len(metrics))
        for j, m in enumerate(methods):
            means, lo, hi = [], [], []
            for metric in metrics:
                cell = summary[m].get(metric)
                if cell is None:
                    means.append(np.nan)
                    lo.append(0)
                    hi.append(0)
                    continue
                means.append(cell["mean"])
                lo.append(cell["mean"] - cell["ci_low"])
                hi.append(cell["ci_high"] - cell["mean"])
            ax.bar(x + (j - (len(methods) - 1) / 2) * width, means, width, yerr=[lo, hi],
                   color=METHOD_COLORS.get(m), label=m, capsize=2)
        ax.set_xticks(x, [m.upper() if len(m) <= 5 else m for m in metrics])
        ax.set_ylim(min(0.0, ax.get_ylim()[0]), 1.05)
        ax.axhline(0, color="k", lw=0.6)
        ax.legend(ncol=len(methods), loc="upper center", bbox_to_anchor=(0.5, 1.18), frameon=False)
        fig.tight_layout()
        return _save(fig, Path(out_dir) / "metrics.png")


def sweep_figure(axis: str, rows: list[dict], out_dir) -> Path:
    values = [r["value"] for r in rows]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 2, figsize=(7, 3))
        for ax, metric, title in zip(axes, ("f1", "kappa"), ("F1-score", "Cohen's kappa")):
            mean = np.array([r[f"{metric}_mean"] for r in rows])
            sd = np.array([r[f"{metric}_sd"] for r in rows])
            ax.errorbar(values, mean, yerr=sd, marker="o", ms=3, capsize=2, color="#d62728")
            ax.set(xlabel=axis, title=title)
        fig.tight_layout()
        return _save(fig, Path(out_dir) / f"sweep_{axis}.png")
