"""Figures rendered from the harness CSV files, written next to them."""

from __future__ import annotations

import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import read_csv  # noqa: E402


def _by_policy_distance(rows, x, y):
    groups = defaultdict(lambda: ([], []))
    for r in rows:
        key = (r["policy"], int(r["d"]))
        groups[key][0].append(float(r[x]))
        groups[key][1].append(float(r[y]))
    return groups


def _panel_grid(distances):
    fig, axes = plt.subplots(1, len(distances), figsize=(4.2 * len(distances), 3.4), squeeze=False)
    return fig, {d: ax for d, ax in zip(distances, axes[0])}


def plot_survival(csv_path, out_path=None) -> str:
    groups = _by_policy_distance(read_csv(csv_path), "t", "S")
    distances = sorted({d for _, d in groups})
    fig, axes = _panel_grid(distances)
    for (policy, d), (t, s) in sorted(groups.items()):
        axes[d].step(t, s, where="post", label=policy)
    for d, ax in axes.items():
        ax.set_title(f"d = {d}")
        ax.set_xlabel("cycle t")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=8)
    axes[distances[0]].set_ylabel("S(t)")
    return _save(fig, out_path or _sibling(csv_path, "survival.png"))


def plot_hazard(csv_path, out_path=None) -> str:
    groups = _by_policy_distance(read_csv(csv_path), "t", "mean_hazard")
    distances = sorted({d for _, d in groups})
    fig, axes = _panel_grid(distances)
    for (policy, d), (t, h) in sorted(groups.items()):
        axes[d].plot(t, h, label=policy)
    for d, ax in axes.items():
        ax.axhline(0.0, color="0.8", lw=0.5)
        ax.set_title(f"d = {d}")
        ax.set_xlabel("cycle t")
        ax.legend(fontsize=8)
    axes[distances[0]].set_ylabel("mean hazard (alive runs)")
    return _save(fig, out_path or _sibling(csv_path, "hazard.png"))


def plot_metrics(csv_path, out_path=None) -> str:
    """TTT with 95% intervals per policy and distance."""
    rows = read_csv(csv_path)
    policies = list(dict.fromkeys(r["policy"] for r in rows))
    distances = sorted({int(r["distance"]) for r in rows})
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    width = 0.8 / max(len(policies), 1)
    for i, p in enumerate(policies):
        xs, ys, lo, hi = [], [], [], []
        for r in rows:
            if r["policy"] == p:
                xs.append(distances.index(int(r["distance"])) + (i - (len(policies) - 1) / 2) * width)
                ys.append(float(r["ttt_mean"]))
                lo.append(float(r["ttt_mean"]) - float(r["ttt_ci_low"]))
                hi.append(float(r["ttt_ci_high"]) - float(r["ttt_mean"]))
        ax.bar(xs, ys, width, yerr=[lo, hi], capsize=3, label=p)
    ax.set_xticks(range(len(distances)), [f"d = {d}" for d in distances])
    ax.set_ylabel("TTT (cycles)")
    ax.legend(fontsize=8)
    return _save(fig, out_path or _sibling(csv_path, "metrics.png"))


def plot_training(csv_path, out_path=None, window: int = 10) -> str:
    """Episode return and mean latent norm over training."""
    rows = read_csv(csv_path)
    ep = np.array([int(r["episode"]) for r in rows])
    ret = np.array([float(r["return"]) for r in rows])
    lat = np.array([float(r["mean_latent_norm"]) for r in rows])
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8.4, 3.2))
    a1.plot(ep, ret, color="0.75", lw=0.8)
    if len(ret) >= window:
        a1.plot(ep[window - 1:], np.convolve(ret, np.ones(window) / window, mode="valid"), label=f"{window}-episode mean")
        a1.legend(fontsize=8)
    a1.set_xlabel("episode")
    a1.set_ylabel("return")
    a2.plot(ep, lat)
    a2.set_xlabel("episode")
    a2.set_ylabel("mean latent norm")
    return _save(fig, out_path or _sibling(csv_path, "training.png"))


def plot_ablation(csv_path, out_path=None) -> str:
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    names = [r["variant"] for r in rows]
    mean = np.array([float(r["ttt_mean"]) for r in rows])
    lo = mean - np.array([float(r["ttt_ci_low"]) for r in rows])
    hi = np.array([float(r["ttt_ci_high"]) for r in rows]) - mean
    ax.bar(range(len(rows)), mean, yerr=[lo, hi], capsize=3)
    ax.set_xticks(range(len(rows)), names, rotation=20, fontsize=8)
    ax.set_ylabel("TTT (cycles)")
    return _save(fig, out_path or _sibling(csv_path, "ablation.png"))


PLOTTERS = {
    "survival.csv": plot_survival,
    "hazard.csv": plot_hazard,
    "metrics.csv": plot_metrics,
    "training_log.csv": plot_training,
    "ablation.csv": plot_ablation,
}


def render_directory(root) -> list[str]:
    """Render a figure for every known CSV under ``root``; returns the paths."""
    written = []
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            if name in PLOTTERS:
                path = os.path.join(dirpath, name)
                if read_csv(path):
                    written.append(PLOTTERS[name](path))
    return written


def _sibling(path, name):
    return os.path.join(os.path.dirname(os.path.abspath(path)), name)


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
