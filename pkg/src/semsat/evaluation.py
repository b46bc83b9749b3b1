"""Accuracy, PSNR, transient uncertainty, label corruption and label fusion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .dataset import Dataset, copy_dataset, load_dataset, write_labels
from .field import FieldParams
from .trainer import RayTable, build_ray_table, render_frame, render_table

PSNR_INF = float("inf")


class EvaluationError(ValueError):
    pass


@dataclass
class AccuracyReport:
    split: str
    per_frame: Dict[str, float]
    confusion: Optional[np.ndarray] = None

    @property
    def mean(self) -> float:
        if not self.per_frame:
            raise EvaluationError("no frames evaluated")
        return float(np.mean(list(self.per_frame.values())))

    def lines(self, prefix: str = "") -> List[str]:
        out = [f"{prefix}split={self.split}", f"{prefix}mean_accuracy={self.mean:.6f}"]
        out += [f"{prefix}accuracy[{k}]={v:.6f}" for k, v in self.per_frame.items()]
        return out


def semantic_accuracy(pred, gt, ignore=None) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} and ground truth shape {gt.shape} differ")
    keep = np.ones(gt.shape, bool) if ignore is None else ~np.asarray(ignore, bool)
    n = int(keep.sum())
    if n == 0:
        raise EvaluationError("empty evaluation set")
    return float(np.sum((pred == gt) & keep) / n)


def confusion_counts(pred, gt, n_classes: int) -> np.ndarray:
    idx = np.asarray(gt, np.int64).ravel() * n_classes + np.asarray(pred, np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def psnr(pred, gt) -> float:
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# rendering-based metrics

def _n_samples(params: FieldParams, n_samples: Optional[int]) -> int:
    return 64 if n_samples is None else n_samples


def render_split(params: FieldParams, dataset: Dataset, split: str, n_samples: int = 64):
    """Full-frame renders of every frame in a split, keyed by frame name."""
    alt = dataset.alt_range
    out = {}
    for frame in dataset.split(split):
        h, w = frame.shape
        emb = frame.embed_index if frame.embed_index is not None else 0
        out[frame.name] = render_frame(params, frame.camera, frame.sun_dir, h, w, alt, dataset.bounds,
                                       n_samples, emb)
    return out


def evaluate_semantics(params: FieldParams, dataset: Dataset, split: str = "test", target: str = "static",
                       n_samples: int = 64, renders=None) -> AccuracyReport:
    """Rendered semantic accuracy against ``labels_static`` (transient-free) or ``labels``."""
    if target not in ("static", "labels"):
        raise ValueError("target must be 'static' or 'labels'")
    renders = renders if renders is not None else render_split(params, dataset, split, n_samples)
    per_frame = {}
    conf = np.zeros((dataset.n_classes,) * 2, np.int64)
    for frame in dataset.split(split):
        gt = frame.labels_static if target == "static" else frame.labels
        if gt is None:
            raise EvaluationError(f"frame {frame.name} has no transient-free labels")
        pred = renders[frame.name].sem_class.reshape(frame.shape)
        per_frame[frame.name] = semantic_accuracy(pred, gt)
        conf += confusion_counts(pred, gt, dataset.n_classes)
    return AccuracyReport(split, per_frame, conf)


def evaluate_psnr(params: FieldParams, dataset: Dataset, split: str = "train", target: str = "static",
                  n_samples: int = 64, renders=None) -> Dict[str, float]:
    renders = renders if renders is not None else render_split(params, dataset, split, n_samples)
    out = {}
    for frame in dataset.split(split):
        gt = frame.image_static if target == "static" else frame.image
        out[frame.name] = psnr(np.clip(renders[frame.name].rgb.reshape(gt.shape), 0, 1), gt)
    return out


def transient_rays(dataset: Dataset) -> RayTable:
    table = build_ray_table(dataset, "train")
    idx = np.flatnonzero(table.transient)
    if idx.size == 0:
        raise EvaluationError("no transient pixels in the training split")
    return table.subset(idx)


def transient_uncertainty(params: FieldParams, dataset: Dataset, n_samples: int = 64) -> float:
    """Mean rendered beta over transient pixels of training frames, each with its own embedding."""
    table = transient_rays(dataset)
    r = render_table(params, table, dataset.bounds, n_samples)
    return float(np.mean(r.beta))


def summary_metrics(params: FieldParams, dataset: Dataset, n_samples: int = 64) -> Dict[str, float]:
    train_r = render_split(params, dataset, "train", n_samples)
    test_r = render_split(params, dataset, "test", n_samples)
    out = {
        "train_accuracy": evaluate_semantics(params, dataset, "train", "static", renders=train_r).mean,
        "test_accuracy": evaluate_semantics(params, dataset, "test", "static", renders=test_r).mean,
        "train_psnr_static": float(np.mean(list(evaluate_psnr(params, dataset, "train", "static", renders=train_r).values()))),
        "test_psnr": float(np.mean(list(evaluate_psnr(params, dataset, "test", "live", renders=test_r).values()))),
    }
    try:
        out["transient_uncertainty"] = transient_uncertainty(params, dataset, n_samples)
    except EvaluationError:
        out["transient_uncertainty"] = float("nan")
    return out


# ---------------------------------------------------------------------------
# label corruption

@dataclass
class CorruptionConfig:
    target_loss: float = 0.2
    blur_radius: int = 2
    rescale: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.target_loss < 1:
            raise ValueError("target loss must lie in [0, 1)")
        if self.blur_radius < 0 or self.rescale < 1:
            raise ValueError("blur radius must be >= 0 and rescale >= 1")


def _noise_field(rng: np.random.Generator, shape, cfg: CorruptionConfig) -> np.ndarray:
    h, w = shape
    lh, lw = -(-h // cfg.rescale), -(-w // cfg.rescale)
    noise = rng.standard_normal((lh, lw))
    if cfg.blur_radius:
        noise = ndimage.uniform_filter(noise, size=2 * cfg.blur_radius + 1, mode="wrap")
    up = ndimage.zoom(noise, cfg.rescale, order=1, mode="grid-wrap", grid_mode=True)
    return up[:h, :w]


def corrupt_labels(labels, config: CorruptionConfig, n_classes: int = 5) -> np.ndarray:
    """Flip coherent blobs of every class to the next class.

    Per class a smooth noise field is thresholded so that the selected region
    covers ``target_loss`` of that class's pixels (ties broken by rank so the
    count is exact); selected pixels become class ``(c + 1) mod C``.
    """
    labels = np.asarray(labels)
    out = labels.copy()
    if config.target_loss == 0:
        return out
    rng = np.random.default_rng([config.seed, 31])
    for c in range(n_classes):
        noise = _noise_field(rng, labels.shape, config)
        members = np.flatnonzero(labels.ravel() == c)
        if members.size == 0:
            continue
        k = int(round(config.target_loss * members.size))
        if k == 0:
            continue
        order = np.argsort(-noise.ravel()[members], kind="stable")
        out.ravel()[members[order[:k]]] = (c + 1) % n_classes
    return out


def changed_regions(before, after) -> np.ndarray:
    """Sizes of 4-connected regions of changed pixels."""
    lab, n = ndimage.label(np.asarray(before) != np.asarray(after))
    if n == 0:
        return np.zeros(0, np.int64)
    return np.bincount(lab.ravel())[1:]


def corrupt_dataset(src: Union[str, Path], dst: Union[str, Path], config: CorruptionConfig) -> Dataset:
    """Copy a dataset and corrupt the labels of its training frames."""
    copy_dataset(src, dst)
    ds = load_dataset(dst)
    cmap = ds.colormap
    for i, name in enumerate(ds.train_names):
        frame = ds.frames[name]
        cfg = CorruptionConfig(config.target_loss, config.blur_radius, config.rescale, config.seed * 1000 + i)
        frame.labels = corrupt_labels(frame.labels, cfg, ds.n_classes)
        write_labels(Path(dst) / "labels" / f"{name}.png", frame.labels, cmap)
    return ds


@dataclass
class FusionReport:
    corrupted: AccuracyReport
    fused: AccuracyReport

    @property
    def delta(self) -> float:
        return self.fused.mean - self.corrupted.mean

    def lines(self) -> List[str]:
        return (self.corrupted.lines("corrupted_") + self.fused.lines("fused_")
                + [f"delta={self.delta:.6f}"])


def fuse_labels(params: FieldParams, corrupted: Dataset, clean: Dataset, n_samples: int = 64) -> FusionReport:
    """Render training views of a model trained on ``corrupted`` and score both label sets against ``clean``."""
    if corrupted.train_names != clean.train_names:
        raise EvaluationError("corrupted and clean datasets have different training splits")
    per_corr = {}
    for name in clean.train_names:
        per_corr[name] = semantic_accuracy(corrupted.frames[name].labels, clean.frames[name].labels)
    renders = render_split(params, corrupted, "train", n_samples)
    fused = evaluate_semantics(params, clean, "train", target="labels", renders=renders)
    return FusionReport(AccuracyReport("train", per_corr), fused)
