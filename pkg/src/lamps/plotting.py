"""Figures written next to the delimited reports."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PERSPECTIVE_COLORS = {
    "extrap": "#1b9e77",
    "shuffle": "#d95f02",
    "compdecomp": "#7570b3",
    "extrap+shuffle+compdecomp": "#444444",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curves(records: list[dict], path) -> Path:
    """Per-step total loss coloured by active perspective, plus per-epoch means."""
    fig, (ax_step, ax_epoch) = plt.subplots(1, 2, figsize=(10, 3.6))
    by_persp = defaultdict(lambda: ([], []))
    epoch_vals = defaultdict(list)
    for r in records:
        xs, ys = by_persp[r["perspective"]]
        xs.append(int(r["step"]))
        ys.append(float(r["total"]))
        epoch_vals[(int(r["epoch"]), r["perspective"])].append(float(r["total"]))
    for name, (xs, ys) in by_persp.items():
        color = PERSPECTIVE_COLORS.get(name)
        ax_step.plot(xs, ys, ".", ms=2, color=color, label=name)
        epochs = sorted(e for e, p in epoch_vals if p == name)
        ax_epoch.plot(epochs, [np.mean(epoch_vals[(e, name)]) for e in epochs], "o-", ms=3, color=color, label=name)
    ax_step.set_xlabel("step")
    ax_step.set_ylabel("loss")
    ax_epoch.set_xlabel("epoch")
    ax_epoch.set_ylabel("mean loss")
    ax_epoch.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_correspondence(image: np.ndarray, truth: np.ndarray, predicted: np.ndarray, names, path) -> Path:
    """Key image with ground-truth landmarks (circles) and predictions (crosses)."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.imshow(image, cmap="gray")
    colors = plt.cm.tab20(np.linspace(0, 1, len(names)))
    for (tx, ty), (px, py), c, name in zip(truth, predicted, colors, names):
        ax.plot(tx, ty, "o", mfc="none", mec=c, ms=7, label=name)
        ax.plot(px, py, "x", color="red", ms=5)
        ax.plot([tx, px], [ty, py], "-", color=c, lw=0.7)
    ax.set_axis_off()
    ax.legend(fontsize=5, loc="lower center", ncol=3, frameon=False, bbox_to_anchor=(0.5, -0.25))
    return _save(fig, path)


def plot_landmark_errors(per_landmark: dict[str, tuple[float, float]], path) -> Path:
    names = list(per_landmark)
    means = [per_landmark[n][0] for n in names]
    stds = [per_landmark[n][1] for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(range(len(names)), means, yerr=stds, color="#7570b3", capsize=2)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=6)
    ax.set_ylabel("error (px)")
    return _save(fig, path)


def plot_dna_similarities(trials, path) -> Path:
    """Scatter of cosine(C_s, C1) against cosine(C_s, C), coloured by true source."""
    fig, ax = plt.subplots(figsize=(4, 4))
    for source, color in (("inside_c1", "#1b9e77"), ("inside_complement", "#d95f02")):
        pts = np.array([(t.sim_c1, t.sim_c) for t in trials if t.cs_source == source])
        if len(pts):
            ax.plot(pts[:, 0], pts[:, 1], ".", ms=2, color=color, label=source)
    lo = min(ax.get_xlim()[0], ax.get_ylim()[0])
    hi = max(ax.get_xlim()[1], ax.get_ylim()[1])
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.7)
    ax.set_xlabel("cos(C_s, C1)")
    ax.set_ylabel("cos(C_s, C)")
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    """DNA accuracy and correspondence error per schedule mode (mean over seeds)."""
    modes = list(dict.fromkeys(r["mode"] for r in rows))
    dna = [np.mean([r["dna_accuracy"] for r in rows if r["mode"] == m]) for m in modes]
    corr = [np.mean([r["corr_error"] for r in rows if r["mode"] == m]) for m in modes]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.4))
    a.bar(modes, [100 * v for v in dna], color="#1b9e77")
    a.axhline(50, color="k", ls="--", lw=0.7)
    a.set_ylabel("DNA-test accuracy (%)")
    b.bar(modes, corr, color="#d95f02")
    b.set_ylabel("correspondence error (px)")
    for ax in (a, b):
        ax.tick_params(axis="x", rotation=30, labelsize=7)
    return _save(fig, path)
