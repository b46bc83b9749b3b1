"""Image writers and report figures."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .dataset import write_labels, write_rgb  # noqa: E402

PathLike = Union[str, Path]


def save_scalar(path: PathLike, values: np.ndarray, vmin: Optional[float] = None,
                vmax: Optional[float] = None, cmap: str = "viridis") -> None:
    """Colormapped PNG of a scalar image."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(np.nanmin(v)) if vmin is None else vmin
    hi = float(np.nanmax(v)) if vmax is None else vmax
    norm = np.zeros_like(v) if hi <= lo else np.clip((v - lo) / (hi - lo), 0, 1)
    rgba = matplotlib.colormaps[cmap](norm)
    Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8)).save(path)


def save_modality(out: PathLike, modality: str, image, colormap: np.ndarray) -> List[Path]:
    """Write one rendered modality; semantic writes a palette PNG and a colored PNG."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if modality == "semantic":
        labels, colored = image
        write_labels(out, labels, colormap)
        color_path = out.with_name(out.stem + "_color.png")
        write_rgb(color_path, colored)
        return [out, color_path]
    if modality in ("rgb", "semantic_shaded"):
        write_rgb(out, np.clip(image, 0, 1))
    elif modality == "sun":
        save_scalar(out, image, 0.0, 1.0, "gray")
    elif modality == "uncertainty":
        save_scalar(out, image, 0.0, max(1.0, float(np.max(image))), "magma")
    else:
        save_scalar(out, image, cmap="viridis")
    return [out]


def accuracy_figure(path: PathLike, reports: Dict[str, Dict[str, float]], title: str = "") -> None:
    """Grouped bars of per-frame accuracy, one group per report."""
    fig, ax = plt.subplots(figsize=(7, 3.2), dpi=110)
    names = sorted({k for r in reports.values() for k in r})
    x = np.arange(len(names))
    width = 0.8 / max(len(reports), 1)
    for i, (label, per_frame) in enumerate(reports.items()):
        ax.bar(x + i * width, [per_frame.get(n, np.nan) for n in names], width, label=label)
    ax.set_xticks(x + 0.4 - width / 2, names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def loss_curves(path: PathLike, records: Sequence[dict], terms: Sequence[str]) -> None:
    fig, ax = plt.subplots(figsize=(7, 3.2), dpi=110)
    it = [r["iteration"] for r in records]
    for t in terms:
        vals = np.array([r.get(t, 0.0) for r in records], dtype=float)
        if np.any(vals != 0):
            ax.plot(it, np.abs(vals) + 1e-12, label=t, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("weighted term")
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def label_panels(path: PathLike, panels: Dict[str, np.ndarray], colormap: np.ndarray) -> None:
    """Side-by-side colored label images (e.g. clean, corrupted, fused)."""
    cmap = np.asarray(colormap)
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.8), dpi=110)
    axes = np.atleast_1d(axes)
    for ax, (name, lab) in zip(axes, panels.items()):
        ax.imshow(cmap[np.asarray(lab)], interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
