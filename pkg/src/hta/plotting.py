"""Static PNG figures written next to the CSV/JSON artifacts."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLORS = {"hta": "tab:blue", "traditional": "tab:orange"}


def _finite(pairs):
    return [(s, v) for s, v in pairs if isinstance(v, (int, float)) and math.isfinite(v)]


def loss_curves(traces: dict, path, title: str = "") -> Path:
    """Epoch-end training loss against SGD step, one line per method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, trace in traces.items():
        pts = _finite([(s, fl) for s, _, _, _, fl in trace.epochs])
        if not pts:
            pts = list(enumerate(trace.batch_loss, start=1))
        ax.plot(*zip(*pts), label=method, color=COLORS.get(method))
    _finish(ax, "SGD step", "training loss", title)
    return _save(fig, path)


def test_trajectories(series: dict, path, title: str = "") -> Path:
    """``series`` maps method -> list of (step, test loss)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, pts in series.items():
        pts = _finite(pts)
        if pts:
            ax.plot(*zip(*pts), label=method, color=COLORS.get(method))
    _finish(ax, "SGD step", "test loss", title)
    return _save(fig, path)


def restart_losses(reports: dict, path, title: str = "") -> Path:
    """Per-restart test losses as a strip plot."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, (method, rep) in enumerate(reports.items()):
        vals = [v for v in rep.test_losses if math.isfinite(v) and v > 0]
        ax.scatter([i] * len(vals), vals, color=COLORS.get(method), alpha=0.7)
    ax.set_xticks(range(len(reports)), list(reports))
    ax.set_yscale("log")
    ax.set_ylabel("test loss")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def roi_bars(rows: list, path) -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 4))
    ax.bar([r["experiment"] for r in rows], [100 * r["roi"] for r in rows], color="tab:green")
    ax.axhline(0, color="k", lw=0.8)
    ax.set_ylabel("improvement rate (%)")
    return _save(fig, path)


def _finish(ax, xlabel, ylabel, title):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend()


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
