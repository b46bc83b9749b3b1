"""Semantic satellite radiance field.

The network maps a normalized position ``x``, a sun direction ``omega`` and a
per-image embedding ``t_j`` to density, albedo, sun visibility, ambient sky
color, transient uncertainty and semantic logits.  Wiring:

* the backbone sees only the encoded position, so density, albedo and the
  semantic logits are functions of ``x`` alone;
* the sun head sees backbone features plus the encoded sun direction;
* the ambient head sees only the encoded sun direction;
* the uncertainty head sees backbone features plus the image embedding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SEMANTIC_ACTIVATIONS = ("sigmoid", "none")


@dataclass
class FieldConfig:
    backbone_layers: int = 8
    backbone_width: int = 512
    semantic_hidden: int = 256
    head_hidden: int = 256
    n_classes: int = 5
    embed_dim: int = 4
    pe_levels_position: int = 10
    pe_levels_sun: int = 4
    encode_sun: bool = True
    semantic_activation: str = "sigmoid"
    # sigma = density_scale * softplus(raw); lets small nets reach opaque surfaces
    density_scale: float = 1.0

    def __post_init__(self):
        ints = ("backbone_layers", "backbone_width", "semantic_hidden", "head_hidden",
                "embed_dim", "pe_levels_position", "pe_levels_sun")
        for name in ints:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.semantic_activation not in SEMANTIC_ACTIVATIONS:
            raise ValueError(f"semantic_activation must be one of {SEMANTIC_ACTIVATIONS}")
        if self.density_scale <= 0:
            raise ValueError("density_scale must be positive")

    @classmethod
    def desk(cls, **overrides) -> "FieldConfig":
        base = dict(backbone_layers=2, backbone_width=64, semantic_hidden=32, head_hidden=32,
                    n_classes=5, pe_levels_position=6, density_scale=25.0)
        base.update(overrides)
        return cls(**base)

    @property
    def position_dim(self) -> int:
        return 2 * self.pe_levels_position * 3

    @property
    def sun_dim(self) -> int:
        return 2 * self.pe_levels_sun * 3 if self.encode_sun else 3

    def to_dict(self) -> dict:
        return asdict(self)


def positional_encode(p: np.ndarray, levels: int) -> np.ndarray:
    """Sinusoidal encoding of the last axis.

    Output layout per frequency ``k``: ``sin(2^k pi p)`` for every component,
    then ``cos(2^k pi p)`` for every component.  Length ``2 * levels * d``.
    """
    p = np.asarray(p)
    freqs = (2.0 ** np.arange(levels)) * np.pi
    scaled = p[..., None, :] * freqs.astype(p.dtype if p.dtype.kind == "f" else np.float64)[:, None]
    enc = np.concatenate([np.sin(scaled), np.cos(scaled)], axis=-1)
    return enc.reshape(p.shape[:-1] + (2 * levels * p.shape[-1],))


def encode_sun(omega: np.ndarray, config: FieldConfig) -> np.ndarray:
    omega = np.asarray(omega)
    if config.encode_sun:
        return positional_encode(omega, config.pe_levels_sun)
    return omega


class FieldParams:
    """Named trainable tensors of a :class:`FieldConfig` network."""

    def __init__(self, config: FieldConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def n_embeddings(self) -> int:
        return self.tensors["embed"].shape[0]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                         for k, v in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @classmethod
    def from_arrays(cls, config: FieldConfig, arrays: Dict[str, np.ndarray]) -> "FieldParams":
        return cls(config, {k: Tensor(np.array(v), requires_grad=True) for k, v in arrays.items()})


def init_params(config: FieldConfig, n_embeddings: int, seed: int = 0,
                dtype=np.float32) -> FieldParams:
    """Kaiming-uniform weights, zero biases, one embedding row per training frame."""
    if n_embeddings < 1:
        raise ValueError("need at least one embedding row")
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}

    def linear(name: str, fan_in: int, fan_out: int, gain: float = 2.0, bias: bool = True):
        bound = np.sqrt(3.0 * gain / fan_in)
        arrays[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if bias:
            arrays[f"{name}.b"] = np.zeros(fan_out)

    width = config.backbone_width
    fan = config.position_dim
    for i in range(config.backbone_layers):
        linear(f"backbone{i}", fan, width)
        fan = width
    hh = config.head_hidden
    linear("sigma", width, 1, gain=1.0)
    linear("albedo", width, 3, gain=1.0)
    linear("sun0_feat", width, hh)
    linear("sun0_dir", config.sun_dim, hh, bias=False)
    linear("sun1", hh, 1, gain=1.0)
    linear("ambient0", config.sun_dim, hh)
    linear("ambient1", hh, 3, gain=1.0)
    linear("beta0_feat", width, hh)
    linear("beta0_embed", config.embed_dim, hh, bias=False)
    linear("beta1", hh, 1, gain=1.0)
    linear("semantic0", width, config.semantic_hidden)
    linear("semantic1", config.semantic_hidden, config.n_classes, gain=1.0)
    arrays["embed"] = rng.uniform(-1.0, 1.0, size=(n_embeddings, config.embed_dim))
    return FieldParams.from_arrays(config, {k: v.astype(dtype) for k, v in arrays.items()})


@dataclass
class FieldOutput:
    """Per-sample outputs, each shaped ``(B, N, ...)``; ambient is ``(B, 1, 3)``."""

    sigma: Tensor
    albedo: Tensor
    sun: Tensor
    ambient: Tensor
    beta: Optional[Tensor]
    sem: Tensor


def _dense(params: FieldParams, name: str, x: Tensor) -> Tensor:
    out = x @ params[f"{name}.w"]
    bias = params.tensors.get(f"{name}.b")
    return out + bias if bias is not None else out


def semantic_logits(params: FieldParams, features: Tensor) -> Tensor:
    """Semantic head on backbone features; sigmoid-squashed unless disabled."""
    hidden = ad.relu(_dense(params, "semantic0", features))
    logits = _dense(params, "semantic1", hidden)
    if params.config.semantic_activation == "sigmoid":
        return ad.sigmoid(logits)
    return logits


def field_forward(params: FieldParams, x_norm: np.ndarray, omega: np.ndarray,
                  embed_index: Optional[np.ndarray] = None) -> FieldOutput:
    """Evaluate the field on a batch of rays.

    Args:
        x_norm: (B, N, 3) sample positions in normalized scene coordinates.
        omega: (B, 3) unit sun directions, one per ray.
        embed_index: (B,) embedding rows; ``None`` skips the uncertainty head.
    """
    cfg = params.config
    B, N, _ = x_norm.shape
    dtype = params["embed"].dtype
    enc = positional_encode(np.asarray(x_norm, dtype=dtype).reshape(B * N, 3), cfg.pe_levels_position)
    h = Tensor(enc)
    for i in range(cfg.backbone_layers):
        h = ad.relu(_dense(params, f"backbone{i}", h))

    sigma = ad.softplus(_dense(params, "sigma", h)) * cfg.density_scale
    albedo = ad.sigmoid(_dense(params, "albedo", h))

    sun_enc = Tensor(encode_sun(np.asarray(omega, dtype=dtype), cfg))
    hh = cfg.head_hidden
    sun_pre = (_dense(params, "sun0_feat", h).reshape(B, N, hh)
               + (sun_enc @ params["sun0_dir.w"]).reshape(B, 1, hh))
    sun_hidden = ad.relu(sun_pre).reshape(B * N, hh)
    sun = ad.sigmoid(_dense(params, "sun1", sun_hidden))

    amb_hidden = ad.relu(_dense(params, "ambient0", sun_enc))
    ambient = ad.sigmoid(_dense(params, "ambient1", amb_hidden)).reshape(B, 1, 3)

    beta = None
    if embed_index is not None:
        emb = ad.take(params["embed"], embed_index)
        beta_pre = (_dense(params, "beta0_feat", h).reshape(B, N, hh)
                    + (emb @ params["beta0_embed.w"]).reshape(B, 1, hh))
        beta_hidden = ad.relu(beta_pre).reshape(B * N, hh)
        beta = ad.softplus(_dense(params, "beta1", beta_hidden)).reshape(B, N)

    sem = semantic_logits(params, h)
    return FieldOutput(
        sigma=sigma.reshape(B, N),
        albedo=albedo.reshape(B, N, 3),
        sun=sun.reshape(B, N),
        ambient=ambient,
        beta=beta,
        sem=sem.reshape(B, N, cfg.n_classes),
    )


def evaluate_field(params: FieldParams, x: np.ndarray, omega: np.ndarray,
                   embed_index: int) -> Dict[str, np.ndarray]:
    """Single-point evaluation returning plain arrays keyed by output name."""
    omega = np.asarray(omega, dtype=np.float64)
    if abs(np.linalg.norm(omega) - 1.0) > 1e-6:
        raise ValueError("sun direction must be a unit vector")
    if not 0 <= embed_index < params.n_embeddings:
        raise IndexError(f"embed_index {embed_index} out of range [0, {params.n_embeddings})")
    out = field_forward(params, np.asarray(x, dtype=np.float64).reshape(1, 1, 3),
                        omega.reshape(1, 3), np.array([embed_index]))
    return {
        "sigma": out.sigma.data[0, 0],
        "albedo": out.albedo.data[0, 0],
        "sun": out.sun.data[0, 0],
        "ambient": out.ambient.data[0, 0],
        "beta": out.beta.data[0, 0],
        "sem": out.sem.data[0, 0],
    }
