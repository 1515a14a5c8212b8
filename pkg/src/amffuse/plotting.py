"""Report figures written next to the CSV outputs (PNG, headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricReport  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curve(losses, path, title: str = "pretraining loss", ylabel: str = "ITC loss") -> Path:
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(len(losses)), losses, lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_finetune_curves(curves: dict[int, list[dict]], path, metric: str = "auc") -> Path:
    """Training loss and validation metric per epoch, one line per seed."""
    fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(9, 3.2))
    for seed, curve in sorted(curves.items()):
        ep = [c["epoch"] for c in curve]
        ax_l.plot(ep, [c["loss"] for c in curve], label=str(seed))
        ax_m.plot(ep, [c["val_metric"] for c in curve], label=str(seed))
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("training loss")
    ax_m.set_xlabel("epoch")
    ax_m.set_ylabel(f"validation {metric}")
    for ax in (ax_l, ax_m):
        ax.grid(alpha=0.3)
    ax_m.legend(title="seed", fontsize=8)
    return _save(fig, path)


def plot_metric_report(report: MetricReport, path, title: str | None = None) -> Path:
    vals = report.values()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    x = np.arange(len(vals))
    ax.bar(x, vals, color="tab:blue", alpha=0.8)
    ax.axhline(report.mean(), color="k", ls="--", lw=1, label=f"mean {report.mean():.4f}")
    ax.set_xticks(x, [str(s) for s in report.seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel(report.metric)
    lo = min(0.5, float(vals.min()) - 0.05) if vals.size else 0.0
    ax.set_ylim(lo, 1.0)
    ax.set_title(title or report.metric)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_noise_trend(summary: list[dict], path, metric: str = "auc") -> Path:
    """Mean test metric (with seed std) and image share of the fused width per noise level."""
    kinds = [k for k in ("rfm", "image_sigma") if any(r["kind"] == k for r in summary)]
    fig, axes = plt.subplots(1, len(kinds), figsize=(4.5 * len(kinds), 3.4), squeeze=False)
    labels = {"rfm": "tabular missing rate", "image_sigma": "image noise sigma"}
    for ax, kind in zip(axes[0], kinds):
        rows = sorted((r for r in summary if r["kind"] == kind), key=lambda r: r["level"])
        lv = [r["level"] for r in rows]
        m = np.array([r["metric"] for r in rows])
        sd = np.array([r.get("metric_std", 0.0) for r in rows])
        ax.errorbar(lv, m, yerr=sd, marker="o", capsize=3, label=f"fused {metric}")
        ax.set_xlabel(labels[kind])
        ax.set_ylabel(metric)
        ax.grid(alpha=0.3)
        share = [r["l_img"] / (r["l_img"] + r["l_tab"]) for r in rows]
        ax2 = ax.twinx()
        ax2.plot(lv, share, color="tab:orange", ls="--", marker="s", label="image share")
        ax2.set_ylabel("L_img / D_out")
        ax2.set_ylim(0, 1)
        h1, l1 = ax.get_legend_handles_labels()
        h2, l2 = ax2.get_legend_handles_labels()
        ax.legend(h1 + h2, l1 + l2, fontsize=8, loc="lower left")
    return _save(fig, path)


def plot_attributions(table: list[tuple[str, float, float]], path, top: int = 15) -> Path:
    rows = table[:top][::-1]
    fig, ax = plt.subplots(figsize=(5, 0.3 * len(rows) + 1.2))
    ax.barh([r[0] for r in rows], [r[2] for r in rows], color="tab:green")
    ax.set_xlabel("share of total |attribution| (%)")
    ax.set_title("tabular feature importance")
    return _save(fig, path)
