"""Static figures for experiment reports (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import EXTRINSIC_NAMES, INTRINSIC_NAMES  # noqa: E402

PROPERTY_NAMES = EXTRINSIC_NAMES + INTRINSIC_NAMES
COLORS = {"baseline": "#8c8c8c", "joint": "#d9a441", "wo_cm": "#4c72b0", "w_cm": "#c44e52",
          "w_cm_early": "#dd8452"}
FEATURE_SETS = ("y_V", "y_T", "both")


def _color(name):
    return COLORS.get(name, None)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def classification_bars(acc: dict, path, chance: float | None = None):
    """Grouped bars of accuracy per feature set. ``acc[variant][fs] = (mean, std)``."""
    variants = list(acc)
    x = np.arange(len(FEATURE_SETS))
    w = 0.8 / max(1, len(variants))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, v in enumerate(variants):
        m = [acc[v].get(fs, (np.nan, 0))[0] for fs in FEATURE_SETS]
        s = [acc[v].get(fs, (np.nan, 0))[1] for fs in FEATURE_SETS]
        ax.bar(x + (i - (len(variants) - 1) / 2) * w, m, w, yerr=s, capsize=2, label=v, color=_color(v))
    if chance is not None:
        ax.axhline(chance, ls=":", color="k", lw=1, label="chance")
    ax.set_xticks(x, FEATURE_SETS)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def nmse_bars(means: dict, stds: dict, path, title: str | None = None):
    """Time-averaged NMSE per property, one bar group per property."""
    variants = list(means)
    x = np.arange(len(PROPERTY_NAMES))
    w = 0.8 / max(1, len(variants))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for i, v in enumerate(variants):
        ax.bar(x + (i - (len(variants) - 1) / 2) * w, means[v], w, yerr=stds.get(v), capsize=2,
               label=v, color=_color(v))
    ax.set_xticks(x, PROPERTY_NAMES, rotation=20)
    ax.set_ylabel("NMSE")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def nmse_curves(curves: dict, stds: dict, path, properties=INTRINSIC_NAMES, shade: float = 1.0,
                title: str | None = None):
    """NMSE over time per property; the band is ``shade`` x std across trajectories."""
    idx = [PROPERTY_NAMES.index(p) for p in properties]
    fig, axes = plt.subplots(1, len(idx), figsize=(3.2 * len(idx), 3), sharey=True, squeeze=False)
    for ax, j, name in zip(axes[0], idx, properties):
        for v, c in curves.items():
            c = np.asarray(c)
            t = np.arange(len(c))
            ax.plot(t, c[:, j], color=_color(v), label=v, lw=1.2)
            if v in stds and shade > 0:
                s = np.asarray(stds[v])[:, j] * shade
                ax.fill_between(t, c[:, j] - s, c[:, j] + s, color=_color(v), alpha=0.15, lw=0)
        ax.set_title(name)
        ax.set_xlabel("time step")
    axes[0][0].set_ylabel("NMSE")
    axes[0][-1].legend(fontsize=7)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def surprise_bars(aligned: dict, surprise: dict, path, stars: dict | None = None):
    """Mean intrinsic NMSE on the aligned vs surprise set per variant."""
    variants = list(aligned)
    x = np.arange(len(variants))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(x - 0.2, [aligned[v] for v in variants], 0.4, label="aligned", color="#9ecae1")
    ax.bar(x + 0.2, [surprise[v] for v in variants], 0.4, label="surprise", color="#fc9272")
    for i, v in enumerate(variants):
        if stars and v in stars:
            ax.text(i + 0.2, surprise[v], stars[v], ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x, variants)
    ax.set_ylabel("intrinsic NMSE")
    ax.legend(fontsize=7)
    return _save(fig, path)


def activation_bars(values: dict, path):
    """Intrinsic NMSE on the surprise set for different cross-modal activation times."""
    labels = list(values)
    m = [np.mean(values[k]) for k in labels]
    s = [np.std(values[k]) for k in labels]
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar(labels, m, yerr=s, capsize=3, color=[_color(k) or "#777777" for k in labels])
    ax.set_ylabel("surprise intrinsic NMSE")
    return _save(fig, path)


def perturbation_grid(grid: dict, path, scale: float = 100.0):
    """Table-style heat grid. ``grid[variant][cell] = (6,)`` NMSE; cells are ``"sigma,c"`` keys."""
    variants = list(grid)
    cells = sorted({c for v in variants for c in grid[v]}, key=lambda k: tuple(float(x) for x in k.split(",")))
    rows, labels = [], []
    for v in variants:
        for j, p in enumerate(PROPERTY_NAMES):
            rows.append([grid[v].get(c, [np.nan] * 6)[j] * scale for c in cells])
            labels.append(f"{v} / {p}")
    data = np.asarray(rows)
    fig, ax = plt.subplots(figsize=(1.1 * len(cells) + 3, 0.28 * len(rows) + 1))
    im = ax.imshow(data, aspect="auto", cmap="magma")
    ax.set_xticks(range(len(cells)), [f"σ={c.split(',')[0]}\nc={c.split(',')[1]}" for c in cells], fontsize=7)
    ax.set_yticks(range(len(rows)), labels, fontsize=6)
    for i in range(data.shape[0]):
        for k in range(data.shape[1]):
            ax.text(k, i, f"{data[i, k]:.0f}", ha="center", va="center", fontsize=5,
                    color="w" if data[i, k] < np.nanmean(data) else "k")
    fig.colorbar(im, ax=ax, label=f"NMSE x {scale:g}")
    return _save(fig, path)


def training_curves(log_rows: list, path):
    """Train/val total loss and beta per epoch from a metrics log."""
    fig, ax = plt.subplots(figsize=(5, 3))
    for split, style in (("train", "-"), ("val", "--")):
        rows = [r for r in log_rows if r["split"] == split]
        if rows:
            ax.plot([int(r["epoch"]) for r in rows], [float(r["total"]) for r in rows], style, label=split)
    ax.set_xlabel("epoch")
    ax.set_ylabel("-ELBO")
    ax.legend(fontsize=7)
    return _save(fig, path)
