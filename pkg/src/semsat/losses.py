"""Training objectives and their epoch/iteration schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

CE_EPS = 1e-12


@dataclass
class LossWeights:
    semantic: float = 0.04
    transient: float = 0.1
    solar: float = 0.05
    depth: float = 1000.0
    beta_floor: float = 0.05
    eta: float = 3.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


@dataclass
class LossSchedule:
    plain_color_epochs: int = 2
    transient_reg_start_epoch: int = 4
    depth_supervision_fraction: float = 0.25
    use_transient_reg: bool = True
    use_depth: bool = True
    use_solar: bool = True

    def __post_init__(self):
        if self.transient_reg_start_epoch <= self.plain_color_epochs:
            raise ValueError("transient regularization must start after the plain color epochs")

    def color_mode(self, epoch: int) -> str:
        return "l2" if epoch <= self.plain_color_epochs else "uncertainty"

    def transient_active(self, epoch: int) -> bool:
        return self.use_transient_reg and epoch >= self.transient_reg_start_epoch

    def depth_active(self, iteration: int, total_iterations: int) -> bool:
        return self.use_depth and iteration < self.depth_supervision_fraction * total_iterations


def l2_color_loss(pred, gt) -> Tensor:
    pred = as_tensor(pred)
    diff = pred - np.asarray(gt, dtype=pred.dtype)
    return ad.tsum(ad.square(diff))


def uncertainty_color_loss(pred, gt, beta, beta_floor: float = 0.05, eta: float = 3.0) -> Tensor:
    """sum_r |c - c_gt|^2 / (2 beta'^2) + (log beta' + eta) / 2 with beta' = beta + floor."""
    pred = as_tensor(pred)
    beta = as_tensor(beta, pred.dtype)
    if np.any(beta.data < 0):
        raise ValueError("uncertainty must be non-negative")
    sq = ad.tsum(ad.square(pred - np.asarray(gt, dtype=pred.dtype)), axis=-1)
    b = beta + beta_floor
    return ad.tsum(sq / (2.0 * ad.square(b)) + (ad.log(b) + eta) * 0.5)


def transient_reg_loss(beta) -> Tensor:
    beta = as_tensor(beta)
    return ad.tsum(ad.square(1.0 - beta))


def masked_semantic_loss(probs, labels, transient_mask) -> Tensor:
    """Cross-entropy over rays whose label is static; transient rays add exactly 0."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    keep = np.flatnonzero(~np.asarray(transient_mask, dtype=bool))
    if keep.size == 0:
        return Tensor(np.zeros((), dtype=probs.dtype))
    picked = probs[keep, labels[keep]]
    return -ad.tsum(ad.log(picked + CE_EPS))


def depth_supervision_loss(pred_depth, gt_depth, valid) -> Tensor:
    pred_depth = as_tensor(pred_depth)
    idx = np.flatnonzero(np.asarray(valid, dtype=bool))
    if idx.size == 0:
        return Tensor(np.zeros((), dtype=pred_depth.dtype))
    err = pred_depth[idx] - np.asarray(gt_depth, dtype=pred_depth.dtype)[idx]
    return ad.tsum(ad.square(err)) * (1.0 / idx.size)


def solar_correction_loss(transmittance, weights, sun, detach_geometry: bool = True) -> Tensor:
    """sum over solar rays of [sum_i (T_i - sun_i)^2 + 1 - sum_i w_i sun_i].

    With ``detach_geometry`` the transmittance and weights act as targets and
    only the sun prediction receives gradient.
    """
    sun = as_tensor(sun)
    T = as_tensor(transmittance, sun.dtype)
    w = as_tensor(weights, sun.dtype)
    if detach_geometry:
        T, w = T.detach(), w.detach()
    n_rays = sun.shape[0] if sun.ndim > 1 else 1
    per_sample = ad.tsum(ad.square(T - sun))
    coverage = ad.tsum(w * sun)
    return per_sample + (float(n_rays) - coverage)


@dataclass
class LossResult:
    total: Tensor
    terms: Dict[str, float] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)

    def breakdown(self) -> Dict[str, float]:
        """Weighted contribution of every term, zero for inactive ones."""
        return {k: self.weights[k] * self.terms[k] for k in self.terms}

    def log_line(self, **extra) -> str:
        parts = [f"{k}={v}" for k, v in extra.items()]
        parts += [f"{k}={v:.6g}" for k, v in self.breakdown().items()]
        parts.append(f"total={float(self.total.data):.6g}")
        return " ".join(parts)


TERM_NAMES = ("color_l2", "color_uncertainty", "transient", "semantic", "depth", "solar")


def total_loss(batch: Dict[str, object], epoch: int, iteration: int, total_iterations: int,
               weights: LossWeights, schedule: LossSchedule) -> LossResult:
    """Combine per-term losses according to the schedule.

    ``batch`` holds rendered tensors ``rgb``, ``beta``, ``sem_probs``, ``depth``
    and optional ``solar`` (a dict with ``transmittance``, ``weights``, ``sun``)
    together with targets ``gt_rgb``, ``labels``, ``transient``, ``gt_depth``,
    ``depth_valid``.
    """
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    rgb: Tensor = batch["rgb"]
    zero = Tensor(np.zeros((), dtype=rgb.dtype))
    terms: Dict[str, Tensor] = {}
    w: Dict[str, float] = {}

    mode = schedule.color_mode(epoch)
    if mode == "l2":
        terms["color_l2"] = l2_color_loss(rgb, batch["gt_rgb"])
        w["color_l2"], w["color_uncertainty"] = 1.0, 0.0
        terms["color_uncertainty"] = zero
    else:
        terms["color_uncertainty"] = uncertainty_color_loss(rgb, batch["gt_rgb"], batch["beta"],
                                                            weights.beta_floor, weights.eta)
        w["color_l2"], w["color_uncertainty"] = 0.0, 1.0
        terms["color_l2"] = zero

    transient = np.asarray(batch["transient"], dtype=bool)
    if schedule.transient_active(epoch) and transient.any():
        terms["transient"] = transient_reg_loss(batch["beta"][np.flatnonzero(transient)])
    else:
        terms["transient"] = zero
    w["transient"] = weights.transient if schedule.transient_active(epoch) else 0.0

    terms["semantic"] = masked_semantic_loss(batch["sem_probs"], batch["labels"], transient)
    w["semantic"] = weights.semantic

    if schedule.depth_active(iteration, total_iterations) and batch.get("depth") is not None:
        terms["depth"] = depth_supervision_loss(batch["depth"], batch["gt_depth"], batch["depth_valid"])
        w["depth"] = weights.depth
    else:
        terms["depth"], w["depth"] = zero, 0.0

    solar = batch.get("solar")
    if schedule.use_solar and solar is not None:
        terms["solar"] = solar_correction_loss(solar["transmittance"], solar["weights"], solar["sun"])
        w["solar"] = weights.solar
    else:
        terms["solar"], w["solar"] = zero, 0.0

    total = zero
    for name in TERM_NAMES:
        if w[name] != 0.0:
            total = total + terms[name] * w[name]
    values = {k: float(terms[k].data) for k in TERM_NAMES}
    for k, v in values.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"loss term '{k}' is not finite ({v})")
    return LossResult(total, values, w)
