"""Alpha compositing and the aggregated per-ray outputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor


@dataclass
class CompositingWeights:
    alphas: Tensor
    transmittance: Tensor
    weights: Tensor

    @property
    def opacity(self) -> np.ndarray:
        return self.weights.data.sum(axis=-1)


def compositing_weights(sigmas, deltas) -> CompositingWeights:
    """alpha_i = 1 - exp(-sigma_i delta_i), T_i = prod_{j<i} (1 - alpha_j), w_i = T_i alpha_i.

    Works on the last axis; transmittance is evaluated as exp(-exclusive cumsum),
    which equals the running product of ``1 - alpha``.
    """
    sigmas = as_tensor(sigmas)
    deltas = np.asarray(deltas, dtype=sigmas.dtype)
    if sigmas.shape != deltas.shape:
        raise ValueError(f"sigma shape {sigmas.shape} and delta shape {deltas.shape} differ")
    if np.any(sigmas.data < 0):
        raise ValueError("negative density")
    if np.any(deltas < 0):
        raise ValueError("negative sample spacing")
    tau = sigmas * deltas
    alphas = 1.0 - ad.exp(-tau)
    trans = ad.exp(-ad.cumsum_exclusive(tau, axis=-1))
    return CompositingWeights(alphas, trans, trans * alphas)


def shade_sample(albedo, sun, ambient):
    """c = c_a * (sun + (1 - sun) * a); ``sun`` broadcasts over the color axis."""
    if isinstance(albedo, Tensor) or isinstance(sun, Tensor) or isinstance(ambient, Tensor):
        sun = as_tensor(sun)
        s = sun.reshape(sun.shape + (1,))
        return albedo * (s + (1.0 - s) * ambient)
    s = np.asarray(sun)[..., None]
    return np.asarray(albedo) * (s + (1.0 - s) * np.asarray(ambient))


def _weights(w) -> Tensor:
    return w.weights if isinstance(w, CompositingWeights) else as_tensor(w)


def render_color(weights, albedo, sun, ambient) -> Tensor:
    """Sum over samples of w_i * shaded color_i; returns (..., 3)."""
    w = _weights(weights)
    shaded = shade_sample(as_tensor(albedo, w.dtype), as_tensor(sun, w.dtype), as_tensor(ambient, w.dtype))
    return ad.tsum(w.reshape(w.shape + (1,)) * shaded, axis=-2)


def render_scalar(weights, values) -> Tensor:
    w = _weights(weights)
    return ad.tsum(w * as_tensor(values, w.dtype), axis=-1)


def render_semantic(weights, sem) -> Tuple[Tensor, np.ndarray]:
    """Weighted sum of per-sample logits, then softmax; argmax keeps the lowest index on ties."""
    w = _weights(weights)
    agg = ad.tsum(w.reshape(w.shape + (1,)) * as_tensor(sem, w.dtype), axis=-2)
    probs = ad.softmax(agg, axis=-1)
    return probs, np.argmax(probs.data, axis=-1)


def semantic_shaded_viz(sem_class, sun_agg, colormap) -> np.ndarray:
    """Class color scaled by the aggregated sun scalar."""
    cmap = np.asarray(colormap, dtype=np.float64)
    cls = np.asarray(sem_class)
    if cls.dtype.kind == "f" and cls.ndim >= 1 and cls.shape[-1] == len(cmap):
        cls = np.argmax(cls, axis=-1)
    if np.any(cls < 0) or np.any(cls >= len(cmap)):
        raise IndexError("class index outside colormap")
    return cmap[cls] * np.asarray(sun_agg, dtype=np.float64)[..., None]


@dataclass
class RenderedRays:
    """Per-ray aggregates as plain arrays."""

    rgb: np.ndarray
    sem_probs: np.ndarray
    sem_class: np.ndarray
    beta: np.ndarray
    sun: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
