"""Evaluation metrics and the per-seed metric report."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) ROC AUC; tied scores get half credit."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("auc expects binary labels")
    n_pos = int((y == 1).sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one sample of each class")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def top1_acc(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if logits.ndim == 1 or logits.shape[-1] == 1:
        pred = (logits.reshape(-1) > 0).astype(int)
    else:
        pred = logits.argmax(axis=-1)
    return float((pred == y).mean())


def binary_scores(logits) -> np.ndarray:
    """Positive-class score from a single logit column or a 2-class logit pair."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1 or logits.shape[-1] == 1:
        return logits.reshape(-1)
    if logits.shape[-1] == 2:
        return logits[:, 1] - logits[:, 0]
    raise ValueError("binary scores need 1 or 2 logit columns")


def evaluate(logits, labels, metric: str) -> dict[str, float]:
    """All metrics that apply to the label set; ``metric`` names the primary one."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    out = {"acc": top1_acc(logits, y)}
    if (logits.ndim == 1 or logits.shape[-1] <= 2) and np.isin(y, (0, 1)).all() and len(np.unique(y)) == 2:
        out["auc"] = auc(binary_scores(logits), y)
    if metric not in out:
        raise ValueError(f"metric {metric!r} is not available for these labels")
    out["primary"] = out[metric]
    return out


@dataclass
class MetricReport:
    metric: str
    seeds: list[int] = field(default_factory=list)
    rows: list[dict[str, float]] = field(default_factory=list)

    def add(self, seed: int, values: dict[str, float]) -> None:
        self.seeds.append(seed)
        self.rows.append(dict(values))

    @property
    def columns(self) -> list[str]:
        cols = []
        for r in self.rows:
            cols += [k for k in r if k not in cols and k != "primary"]
        return cols

    def values(self, key: str | None = None) -> np.ndarray:
        key = key or self.metric
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    def mean(self, key: str | None = None) -> float:
        return float(self.values(key).mean())

    def std(self, key: str | None = None) -> float:
        v = self.values(key)
        return float(v.std(ddof=1)) if v.size >= 2 else float("nan")

    def write_csv(self, path) -> Path:
        path = Path(path)
        cols = self.columns
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed"] + cols)
            for seed, r in zip(self.seeds, self.rows):
                w.writerow([seed] + [f"{r[c]:.6f}" if c in r else "" for c in cols])
            w.writerow(["mean"] + [f"{self.mean(c):.6f}" for c in cols])
            w.writerow(["std"] + [f"{self.std(c):.6f}" for c in cols])
        return path

    def summary(self) -> str:
        return f"{self.metric} = {self.mean():.4f} +/- {self.std():.4f} over {len(self.seeds)} seed(s)"
