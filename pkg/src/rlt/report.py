"""Figure rendering for run reports.

Every CLI path that writes delimited output also drops rendered figures
next to it: training curves and per-episode outcomes for train-rl, the
loss curve for train-token, trajectory plots for demos and evaluation
summaries for eval. `rlt report` re-renders everything from metrics.log.
"""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import simenv
from .orchestrate import EpisodeTrace


def _save(fig, out_dir, name) -> str:
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def parse_metrics(path) -> dict[str, list[dict]]:
    """Read a metrics.log back into typed rows (inverse of MetricsLog)."""

    def num(s):
        if s == "-":
            return None
        try:
            return float(s)
        except ValueError:
            return s

    rows = {"train": [], "episode": [], "eval": [], "event": []}
    with open(path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            kind = parts[0]
            if kind == "train":
                rows["train"].append(
                    {"step": int(parts[1]), "l_q": num(parts[2]), "l_pi": num(parts[3]),
                     "mean_q": num(parts[4]), "ref_dev": num(parts[5])}
                )
            elif kind == "episode":
                rows["episode"].append(
                    {"episode": int(parts[1]), "phase": parts[2], "steps": int(parts[3]),
                     "label": int(parts[4]), "vla": int(parts[5]), "rl": int(parts[6]),
                     "human": int(parts[7]), "stored": int(parts[8]), "buffer": int(parts[9])}
                )
            elif kind == "eval":
                rows["eval"].append(
                    {"episode": int(parts[1]), "success_rate": num(parts[2]),
                     "median_steps_to_success": num(parts[3]),
                     "mean_steps_to_success": num(parts[4]), "throughput": num(parts[5])}
                )
            elif kind == "event":
                rows["event"].append({"name": parts[1], "detail": parts[2] if len(parts) > 2 else ""})
    return rows


def render_training_figures(rows: dict[str, list[dict]], out_dir) -> list[str]:
    paths = []
    train = rows.get("train", [])
    if train:
        fig, axes = plt.subplots(2, 2, figsize=(10, 7))
        steps = [r["step"] for r in train]
        axes[0, 0].plot(steps, [r["l_q"] for r in train], lw=0.8)
        axes[0, 0].set_title("critic loss")
        axes[0, 0].set_yscale("log")
        pi = [(r["step"], r["l_pi"]) for r in train if r["l_pi"] is not None]
        if pi:
            axes[0, 1].plot([p[0] for p in pi], [p[1] for p in pi], lw=0.8, color="tab:orange")
        axes[0, 1].set_title("actor loss")
        axes[1, 0].plot(steps, [r["mean_q"] for r in train], lw=0.8, color="tab:green")
        axes[1, 0].set_title("mean Q")
        rd = [(r["step"], r["ref_dev"]) for r in train if r["ref_dev"] is not None]
        if rd:
            axes[1, 1].plot([p[0] for p in rd], [p[1] for p in rd], lw=0.8, color="tab:red")
        axes[1, 1].set_title("reference deviation ||a - ref||")
        for ax in axes.flat:
            ax.set_xlabel("update")
        fig.tight_layout()
        paths.append(_save(fig, out_dir, "training_curves.png"))

    episodes = [r for r in rows.get("episode", []) if r["phase"] == "online"]
    if episodes:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
        idx = [r["episode"] for r in episodes]
        labels = np.array([r["label"] for r in episodes], dtype=float)
        window = min(20, max(1, len(labels) // 5))
        kernel = np.ones(window) / window
        smooth = np.convolve(labels, kernel, mode="valid")
        ax1.plot(idx, labels, ".", ms=3, alpha=0.4, label="episode outcome")
        if len(smooth):
            ax1.plot(idx[window - 1:], smooth, lw=1.5, label=f"moving avg ({window})")
        ax1.set_xlabel("episode")
        ax1.set_ylabel("success")
        ax1.legend(fontsize=8)
        ax1.set_title("training episode outcomes")
        ax2.plot(idx, [r["steps"] for r in episodes], lw=0.8, color="tab:purple")
        ax2.set_xlabel("episode")
        ax2.set_ylabel("steps")
        ax2.set_title("episode length")
        fig.tight_layout()
        paths.append(_save(fig, out_dir, "episode_outcomes.png"))

    evals = rows.get("eval", [])
    if evals:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot([r["episode"] for r in evals], [r["success_rate"] for r in evals], "o-")
        ax.set_xlabel("training episode")
        ax.set_ylabel("eval success rate")
        ax.set_ylim(0, 1.05)
        ax.set_title("evaluation during training")
        fig.tight_layout()
        paths.append(_save(fig, out_dir, "eval_curve.png"))
    return paths


def render_token_loss(loss_curve: list[float], log_every: int, out_dir) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = np.arange(len(loss_curve)) * log_every
    ax.plot(xs, loss_curve, lw=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("gradient step")
    ax.set_ylabel("reconstruction loss")
    ax.set_title("readout training")
    fig.tight_layout()
    return _save(fig, out_dir, "token_loss.png")


def render_trace(trace: EpisodeTrace, out_dir, name: str = "trace.png") -> str:
    """Top-down trajectory plot: tip path over the slot geometry."""
    fig, ax = plt.subplots(figsize=(5, 5))
    poses = trace.proprios[:, :3].astype(np.float64)
    tips = poses[:, :2] + simenv.TIP_LENGTH * np.stack(
        [np.cos(poses[:, 2]), np.sin(poses[:, 2])], axis=1
    )
    src = trace.sources
    colors = {0: "tab:blue", 1: "tab:green", 2: "tab:red"}
    for s, color in colors.items():
        m = np.where(src == s)[0]
        if m.size:
            ax.plot(tips[m, 0], tips[m, 1], ".", ms=2.5, color=color,
                    label={0: "base", 1: "actor", 2: "human"}[s])
    img = trace.pixels[0]
    ax.imshow(
        img, cmap="gray", origin="lower",
        extent=(0, simenv.WORKSPACE, 0, simenv.WORKSPACE), alpha=0.45,
    )
    ax.set_xlim(0, simenv.WORKSPACE)
    ax.set_ylim(0, simenv.WORKSPACE)
    ax.set_title(f"episode trace ({'success' if trace.label else 'failure'}, {trace.length} steps)")
    ax.legend(fontsize=8, loc="lower left")
    return _save(fig, out_dir, name)


def render_eval_summary(actor_eval: dict, baseline_eval: dict | None, steps_actor: list[int],
                        steps_baseline: list[int] | None, out_dir) -> str:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    names = ["actor"]
    rates = [actor_eval["success_rate"]]
    if baseline_eval is not None:
        names.append("base policy")
        rates.append(baseline_eval["success_rate"])
    ax1.bar(names, rates, color=["tab:green", "tab:blue"][: len(names)])
    ax1.set_ylim(0, 1.05)
    ax1.set_ylabel("success rate")
    bins = np.linspace(0, max(steps_actor + (steps_baseline or []) + [1]), 25)
    if steps_actor:
        ax2.hist(steps_actor, bins=bins, alpha=0.6, label="actor", color="tab:green")
    if steps_baseline:
        ax2.hist(steps_baseline, bins=bins, alpha=0.6, label="base policy", color="tab:blue")
    ax2.set_xlabel("steps to success")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, out_dir, "eval_summary.png")
