"""Figures written next to the CSV/PNG artifacts of the command-line tools."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_META = {"Software": None}


def _show(ax, image, title, cmap=None):
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2 and cmap is None:
        cmap = "gray"
    ax.imshow(np.clip(image, 0, 1), cmap=cmap, vmin=0, vmax=1, interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])


def fit_panel(path, image, rendering, sampled, mask, output, landmarks=None, predicted=None) -> None:
    """Five panels: input, estimated shape in pose, sampled grid, visibility, masked output."""
    fig, axes = plt.subplots(1, 5, figsize=(12.5, 2.9))
    _show(axes[0], image, "input")
    if landmarks is not None:
        axes[0].plot(landmarks[:, 0] - 1, landmarks[:, 1] - 1, "o", ms=3, mfc="none", mec="tab:green", label="target")
    if predicted is not None:
        axes[0].plot(predicted[:, 0] - 1, predicted[:, 1] - 1, "+", ms=4, color="tab:red", label="fit")
    if landmarks is not None or predicted is not None:
        axes[0].legend(loc="lower right", fontsize=6, framealpha=0.6)
    _show(axes[1], rendering, "estimated shape")
    _show(axes[2], sampled, "sampled")
    _show(axes[3], mask, "visibility")
    _show(axes[4], output, "output")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def trace_plot(path, trace: list[dict], components=("landmark", "symmetry", "multiview", "prior")) -> None:
    it = np.array([row["iteration"] for row in trace])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.semilogy(it, np.maximum([row["total"] for row in trace], 1e-300), color="k", lw=1.2, label="total")
    for name in components:
        values = np.array([row[name] for row in trace])
        if np.any(values > 0):
            ax.semilogy(it, np.maximum(values, 1e-300), lw=0.8, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def gradcheck_chart(path, rows: list[dict], tolerance: float) -> None:
    """Horizontal bars of max relative error per operation, log scale."""
    names = [r["op"] for r in rows]
    errors = np.array([max(r["max_rel_error"], 1e-18) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 0.28 * len(rows) + 1.2))
    colors = ["tab:blue" if e < tolerance else "tab:red" for e in errors]
    ax.barh(np.arange(len(rows)), errors, color=colors)
    ax.axvline(tolerance, color="k", ls="--", lw=0.8)
    ax.set_xscale("log")
    ax.set_yticks(np.arange(len(rows)), names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("max relative error")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def coverage_map(path, count, mean) -> None:
    """Mask-weighted mean beside the per-pixel visibility count (zero = never seen)."""
    fig, axes = plt.subplots(1, 2, figsize=(6.5, 3.2))
    _show(axes[0], mean, "mean")
    im = axes[1].imshow(count, cmap="viridis", interpolation="nearest")
    axes[1].contour(count == 0, levels=[0.5], colors="r", linewidths=0.6)
    axes[1].set_title("images visible", fontsize=9)
    axes[1].set_xticks([])
    axes[1].set_yticks([])
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
