"""File-only figures for registration runs and ablations (matplotlib, Agg backend)."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .clustering import GapResult, LabelMap  # noqa: E402
from .imaging import Image, atomic_write_bytes  # noqa: E402

# fixed metadata keeps PNG bytes reproducible across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def difference_image(a: Image, b: Image) -> Image:
    return Image(np.abs(a.data - b.data))


def checkerboard(a: Image, b: Image, tile: int = 16) -> Image:
    """Alternate ``tile``-pixel squares of ``a`` and ``b``."""
    if a.shape != b.shape:
        raise ValueError("checkerboard inputs differ in size")
    if tile < 1:
        raise ValueError("tile must be >= 1")
    yy, xx = np.mgrid[0:a.height, 0:a.width]
    pick = ((yy // tile) + (xx // tile)) % 2 == 0
    return Image(np.where(pick, a.data, b.data))


def plot_loss_trace(trace, path) -> None:
    """Accepted total and its three terms against cumulative iteration."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if trace:
        x = np.arange(len(trace))
        for key in ("total", "sim", "smooth", "seg"):
            ax.plot(x, [getattr(e.report, key) for e in trace], label=key, lw=1.5)
        starts = [i for i, e in enumerate(trace) if e.iter == 0][1:]
        for s in starts:
            ax.axvline(s, color="0.6", ls=":", lw=1)
        ax.set_yscale("symlog", linthresh=1e-4)
        ax.legend(loc="upper right")
    ax.set_xlabel("iteration (all levels)")
    ax.set_ylabel("loss")
    fig.tight_layout()
    _save(fig, path)


def plot_gap(gap: GapResult, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ks = [r.k for r in gap.records]
    ax.errorbar(ks, [r.gap for r in gap.records], yerr=[r.sk for r in gap.records], marker="o", capsize=3)
    ax.axvline(gap.chosen_k, color="r", ls="--", lw=1)
    title = f"chosen k = {gap.chosen_k}" + (" (no elbow)" if gap.no_elbow else "")
    ax.set_title(title)
    ax.set_xlabel("k")
    ax.set_ylabel("gap")
    fig.tight_layout()
    _save(fig, path)


def plot_registration_panel(ref: Image, flt: Image, registered: Image, path) -> None:
    """Reference, floating, and the absolute differences before and after."""
    panels = [
        ("reference", ref.data, "gray"),
        ("floating", flt.data, "gray"),
        ("|ref - flt|", np.abs(ref.data - flt.data), "magma"),
        ("|ref - registered|", np.abs(ref.data - registered.data), "magma"),
    ]
    vmax = max(float(panels[2][1].max()), 1e-12)
    fig, axes = plt.subplots(1, 4, figsize=(14, 4))
    for ax, (title, data, cmap) in zip(axes, panels):
        lim = (0, vmax) if cmap == "magma" else (0, 1)
        ax.imshow(data, cmap=cmap, vmin=lim[0], vmax=lim[1], interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    _save(fig, path)


def plot_label_maps(ref: LabelMap, flt: LabelMap, path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, m, title in zip(axes, (ref, flt), ("reference labels", "floating labels")):
        ax.imshow(m.labels, cmap="tab20", vmin=0, vmax=max(m.k - 1, 1), interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    _save(fig, path)


def plot_ablation(result, path) -> None:
    """Per-seed median rTRE per variant, with paired lines between seeds."""
    names = list(result.variants)
    data = [result.series(v) for v in names]
    fig, ax = plt.subplots(figsize=(1.8 * len(names) + 3, 4))
    ax.boxplot(data, showfliers=False)
    for i in range(len(result.per_seed)):
        ax.plot(np.arange(1, len(names) + 1), [d[i] for d in data], color="0.7", lw=0.6, zorder=0)
    ax.set_xticks(np.arange(1, len(names) + 1))
    ax.set_xticklabels(names)
    ax.set_ylabel("median rTRE per pair")
    fig.tight_layout()
    _save(fig, path)
