"""PNG figures for the CLI report paths. Rendering only; no numbers are derived here."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_mape(rows: list[tuple], path: str | Path) -> Path:
    """MAPE against SNR, one panel per tissue; rows follow the results CSV schema."""
    data: dict[tuple, list[tuple[float, float]]] = {}
    tissues: list[str] = []
    for tissue, snr, method, n, metric, value, *_ in rows:
        if metric not in ("mape_t1", "mape_t2"):
            continue
        if tissue not in tissues:
            tissues.append(tissue)
        data.setdefault((tissue, method, int(n), metric), []).append((float(snr), float(value)))
    cols = 3
    nrows = max(1, math.ceil(len(tissues) / cols))
    fig, axes = plt.subplots(nrows, cols, figsize=(4 * cols, 3 * nrows), squeeze=False)
    for ax, tissue in zip(axes.flat, tissues):
        for (t, method, n, metric), pts in sorted(data.items()):
            if t != tissue:
                continue
            pts.sort()
            ax.plot(
                [p[0] for p in pts],
                [p[1] for p in pts],
                color="tab:blue" if metric == "mape_t1" else "tab:red",
                linestyle="-" if method == "celf" else "--",
                marker="o" if n == min(k[2] for k in data) else "s",
                markersize=3,
                label=f"{method} N={n} {metric[-2:].upper()}",
            )
        ax.set_title(tissue)
        ax.set_xlabel("SNR")
        ax.set_ylabel("MAPE (%)")
        ax.set_yscale("log")
    for ax in list(axes.flat)[len(tissues):]:
        ax.axis("off")
    if tissues:
        axes.flat[0].legend(fontsize=6)
    fig.tight_layout()
    return _save(fig, Path(path))


_LIMITS = {"t1_ms": (0, 5000), "t2_ms": (0, 1500), "off_hz": (-62.5, 62.5)}


def plot_maps(maps: dict[str, np.ndarray], path: str | Path, title: str = "") -> Path:
    panels = [k for k in ("t1_ms", "t2_ms", "off_hz") if k in maps]
    if "banding_free_re" in maps and "banding_free_im" in maps:
        panels.append("|banding_free|")
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.6), squeeze=False)
    for ax, name in zip(axes.flat, panels):
        if name == "|banding_free|":
            img = np.hypot(maps["banding_free_re"], maps["banding_free_im"])
            lim = (0, np.nanmax(img) if np.isfinite(img).any() else 1)
        else:
            img = maps[name]
            lim = _LIMITS.get(name, (None, None))
        im = ax.imshow(img, vmin=lim[0], vmax=lim[1], cmap="viridis", interpolation="nearest")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_images(images: dict[str, np.ndarray], path: str | Path) -> Path:
    fig, axes = plt.subplots(1, len(images), figsize=(3.5 * len(images), 3.4), squeeze=False)
    vmax = max((np.nanmax(v) for v in images.values() if np.isfinite(v).any()), default=1.0)
    for ax, (name, img) in zip(axes.flat, images.items()):
        ax.imshow(img, vmin=0, vmax=vmax, cmap="gray", interpolation="nearest")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, Path(path))
