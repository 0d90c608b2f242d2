"""Figures written next to the metric reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# no Software/date stamps, so identical inputs give identical files
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def metrics_figure(report: MetricsReport, path) -> None:
    """MAAPE and RMSE against missing rate, one line per (pattern, method)."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8))
        patterns = list(dict.fromkeys(r.pattern for r in report.rows))
        for pat in patterns:
            for meth in report.methods():
                rows = sorted(report.select(meth, pat), key=lambda r: r.rate)
                if not rows:
                    continue
                x = [100 * r.rate for r in rows]
                label = meth if len(patterns) == 1 else f"{meth} ({pat.upper()})"
                marker = "o" if len(rows) > 1 else "s"
                axes[0].plot(x, [100 * r.maape for r in rows], marker=marker, label=label)
                axes[1].plot(x, [r.rmse for r in rows], marker=marker, label=label)
        axes[0].set_ylabel("MAAPE (%)")
        axes[1].set_ylabel("RMSE")
        for ax in axes:
            ax.set_xlabel("missing rate (%)")
        axes[0].legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def ablation_figure(report: MetricsReport, axis: str, path) -> None:
    """Average MAAPE over missing rates for each ablation setting."""
    methods = report.methods()
    avg = [100 * report.average_maape(m) for m in methods]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 0.6 * len(methods) + 1.5), 3.0))
        pos = np.arange(len(methods))
        ax.plot(pos, avg, marker="o", color="C0")
        ax.set_xticks(pos)
        ax.set_xticklabels([m.split("=", 1)[-1] for m in methods], rotation=30, ha="right")
        ax.set_xlabel(axis.replace("_", " "))
        ax.set_ylabel("average MAAPE (%)")
        fig.tight_layout()
        _save(fig, path)
