"""Figures written next to the JSON/CSV reports."""
from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "ocpsps",
}


def _save(fig, path) -> str:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.path.splitext(path)[1]}"
    fig.savefig(tmp, bbox_inches="tight", metadata={"Date": None} if path.endswith(".svg") else None)
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_sim_report(report, path) -> str:
    """Per-day mean and std over repeats of the cost and assignment errors."""
    summary = report.summary()
    days = np.arange(report.days)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 2.8))
        width = 0.38
        for off, key, label in ((-width / 2, "err_cost", "cost error"), (width / 2, "err_assign", "assignment error")):
            ax.bar(days + off, summary[key]["per_day_mean"], width, yerr=summary[key]["per_day_std"],
                   capsize=3, label=label)
        ax.set_xticks(days, [f"day {d + 1}" for d in days])
        ax.set_ylabel("error")
        ax.set_title(f"{report.repeats} repeats, {len(report.lots)} lots")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_pr_curves(det_report, path) -> str:
    """Raw precision/recall at IoU 0.5 per class."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.0))
        for cls, (rec, prec) in sorted(det_report.pr_curves.items()):
            ap = det_report.per_class_ap_05.get(cls, float("nan"))
            ax.step(rec, prec, where="post", label=f"{cls} (AP {ap:.2f})")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.legend(frameon=False, loc="lower left")
        return _save(fig, path)


def plot_frame_errors(errors: Sequence, path, trust_threshold: float = 0.5) -> str:
    """Histogram of total frame error, split by trust decision."""
    kept = [e.err_total for e in errors if e.trusted]
    dropped = [e.err_total for e in errors if not e.trusted]
    bins = np.linspace(0.0, 1.0, 21)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.hist([kept, dropped], bins=bins, stacked=True, label=["trusted", "rejected"])
        ax.axvline(trust_threshold, color="k", lw=0.8, ls="--")
        ax.set_xlabel("total error")
        ax.set_ylabel("frames")
        ax.legend(frameon=False)
        return _save(fig, path)
