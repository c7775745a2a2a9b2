"""PNG figures for RL traces, OOD curves and the beta2 comparison.

Uses the non-interactive Agg backend; every function writes one file and
closes its figure.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def smooth(values, window: int = 10) -> np.ndarray:
    """Trailing moving average; the first points average what is available."""
    v = np.asarray(values, dtype=float)
    if v.size == 0 or window <= 1:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def plot_rl_trace(rows: Sequence[Mapping[str, float]], path, title: str = "") -> Path:
    """Gold and proxy reward on the left axis, measured KL on the right."""
    steps = [r["step"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, smooth([r["gold_reward"] for r in rows]), label="gold", color="tab:green")
        ax.plot(steps, smooth([r["proxy_reward"] for r in rows]), label="proxy", color="tab:blue")
        ax.set_xlabel("step")
        ax.set_ylabel("reward (10-step mean)")
        ax2 = ax.twinx()
        ax2.plot(steps, smooth([r["kl_measured"] for r in rows]), label="KL", color="tab:gray", ls="--")
        ax2.set_ylabel("KL to SFT")
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="best")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_gold_comparison(runs: Mapping[str, Sequence[Mapping[str, float]]], path) -> Path:
    """Gold reward against KL for each labelled run (e.g. ``beta2=0 seed=1``)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, rows in runs.items():
            ls = "-" if "beta2=0 " in label + " " else "--"
            ax.plot(smooth([r["kl_measured"] for r in rows]), smooth([r["gold_reward"] for r in rows]), ls=ls, label=label)
        ax.set_xlabel("KL to SFT")
        ax.set_ylabel("gold reward (10-step mean)")
        ax.legend(fontsize=7, ncol=2)
        return _save(fig, path)


def plot_ood_curve(rows: Sequence[Mapping[str, float]], path) -> Path:
    """Mean ensemble uncertainty and gold reward against checkpoint KL."""
    kl = [r["kl"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(kl, [r["u_mean"] for r in rows], marker="o", color="tab:red", label="uncertainty")
        ax.set_xlabel("KL to SFT")
        ax.set_ylabel("mean uncertainty")
        ax2 = ax.twinx()
        ax2.plot(kl, [r["gold_mean"] for r in rows], marker="s", color="tab:green", label="gold")
        ax2.set_ylabel("mean gold reward")
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="best")
        return _save(fig, path)
