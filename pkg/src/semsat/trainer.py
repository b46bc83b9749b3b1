"""Training loop, checkpoints and full-view rendering."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field as dc_field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step
from .camera import RpcModel, SceneBounds, build_rays, pixel_grid, sample_rays, world_normalize
from .dataset import Dataset
from .field import FieldConfig, FieldParams, field_forward, init_params
from .losses import LossResult, LossSchedule, LossWeights, total_loss
from .render import RenderedRays, compositing_weights, render_color, render_scalar, render_semantic

log = logging.getLogger(__name__)

MODALITIES = ("rgb", "semantic", "sun", "uncertainty", "depth", "semantic_shaded")
CKPT_MAGIC = b"SSCK"
CKPT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 300_000
    batch_size: int = 1024
    n_samples: int = 64
    lr: float = 5e-4
    lr_decay: float = 0.9
    seed: int = 0
    solar_fraction: float = 0.25
    checkpoint_every: int = 10_000
    log_every: int = 100
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    weights: LossWeights = dc_field(default_factory=LossWeights)
    schedule: LossSchedule = dc_field(default_factory=LossSchedule)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        for name in ("batch_size", "n_samples", "checkpoint_every", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr must be positive and lr_decay in (0, 1]")
        if not 0 <= self.solar_fraction <= 1:
            raise ValueError("solar_fraction must be in [0, 1]")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(iterations=5000, batch_size=256, n_samples=32, lr=2e-3, lr_decay=0.97,
                    checkpoint_every=1000, log_every=10, field=FieldConfig.desk())
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        nested = {"field": FieldConfig, "weights": LossWeights, "schedule": LossSchedule}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in data and isinstance(data[key], dict):
                sub_known = {f.name for f in fields(typ)}
                bad = set(data[key]) - sub_known
                if bad:
                    raise ValueError(f"unknown {key} config keys: {sorted(bad)}")
                data[key] = typ(**data[key])
        return cls(**data)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()


def lr_at(epoch: int, base_lr: float = 5e-4, decay: float = 0.9) -> float:
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    return base_lr * decay ** (epoch - 1)


# ---------------------------------------------------------------------------
# rays

@dataclass
class RayTable:
    """Every training pixel as a ray with its targets."""

    origins: np.ndarray
    directions: np.ndarray
    t_far: np.ndarray
    sun: np.ndarray
    embed: np.ndarray
    rgb: np.ndarray
    labels: np.ndarray
    transient: np.ndarray
    depth: np.ndarray
    depth_valid: np.ndarray
    frame: np.ndarray
    pixel: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, idx: np.ndarray) -> "RayTable":
        return RayTable(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})


def frame_rays(frame, alt_min: float, alt_max: float, embed_index: int = 0,
               frame_id: int = 0) -> RayTable:
    h, w = frame.shape
    rows, cols = pixel_grid(h, w)
    rays = build_rays(frame.camera, rows, cols, alt_min, alt_max)
    n = len(rays)
    depth = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    ds = np.asarray(frame.depth_samples).reshape(-1, 3)
    if len(ds):
        flat = ds[:, 0].astype(np.int64) * w + ds[:, 1].astype(np.int64)
        depth[flat] = ds[:, 2]
        valid[flat] = True
    labels = frame.labels.reshape(-1).astype(np.int64)
    return RayTable(
        origins=rays.origins, directions=rays.directions, t_far=rays.t_far,
        sun=np.broadcast_to(frame.sun_dir, (n, 3)).copy(),
        embed=np.full(n, embed_index, dtype=np.int64),
        rgb=frame.image.reshape(-1, 3), labels=labels,
        transient=frame.transient_mask.reshape(-1), depth=depth, depth_valid=valid,
        frame=np.full(n, frame_id, dtype=np.int64),
        pixel=np.column_stack([rows, cols]).astype(np.int64),
    )


def build_ray_table(dataset: Dataset, split: str = "train") -> RayTable:
    alt_min, alt_max = dataset.alt_range
    tables = []
    for i, frame in enumerate(dataset.split(split)):
        emb = frame.embed_index if frame.embed_index is not None else 0
        tables.append(frame_rays(frame, alt_min, alt_max, emb, i))
    return RayTable(**{f.name: np.concatenate([getattr(t, f.name) for t in tables])
                       for f in fields(RayTable)})


class RaySampler:
    """Batches drawn without replacement from a per-epoch permutation."""

    def __init__(self, n_rays: int, batch_size: int, seed: int):
        if n_rays == 0:
            raise ValueError("dataset has no training rays")
        self.n_rays = n_rays
        self.batch_size = min(batch_size, n_rays)
        self.seed = seed
        self.iterations_per_epoch = math.ceil(n_rays / self.batch_size)
        self._cache: Tuple[int, Optional[np.ndarray]] = (-1, None)

    def epoch_of(self, iteration: int) -> int:
        return iteration // self.iterations_per_epoch + 1

    def permutation(self, epoch: int) -> np.ndarray:
        if self._cache[0] != epoch:
            self._cache = (epoch, np.random.default_rng([self.seed, 2, epoch]).permutation(self.n_rays))
        return self._cache[1]

    def indices(self, iteration: int) -> np.ndarray:
        perm = self.permutation(self.epoch_of(iteration))
        k = iteration % self.iterations_per_epoch
        return perm[k * self.batch_size:(k + 1) * self.batch_size]


def make_batch(sampler: RaySampler, table: RayTable, iteration: int) -> RayTable:
    return table.subset(sampler.indices(iteration))


# ---------------------------------------------------------------------------
# rendering a batch of rays

def render_rays(params: FieldParams, origins, directions, t_far, sun, embed, bounds: SceneBounds,
                n_samples: int, jitter: bool = False, rng=None, with_beta: bool = True) -> Dict[str, object]:
    dtype = params["embed"].dtype
    samples = sample_rays(origins, directions, np.zeros(len(origins)), t_far, n_samples, jitter, rng)
    x = world_normalize(samples.positions, bounds).astype(dtype)
    out = field_forward(params, x, np.asarray(sun, dtype=dtype),
                        np.asarray(embed) if with_beta else None)
    cw = compositing_weights(out.sigma, samples.deltas.astype(dtype))
    rgb = render_color(cw, out.albedo, out.sun, out.ambient)
    probs, cls = render_semantic(cw, out.sem)
    res = {
        "rgb": rgb, "sem_probs": probs, "sem_class": cls,
        "sun": render_scalar(cw, out.sun),
        "depth": render_scalar(cw, samples.t.astype(dtype)),
        "opacity": cw.weights.data.sum(axis=-1),
        "weights": cw, "field": out, "samples": samples,
    }
    res["beta"] = render_scalar(cw, out.beta) if out.beta is not None else None
    return res


def solar_rays(surface: np.ndarray, sun: np.ndarray, alt_min: float, alt_max: float):
    """Rays travelling along -sun through ``surface`` points, spanning the altitude bounds."""
    sun = np.asarray(sun, dtype=np.float64)
    up = sun[:, 2]
    origins = surface + ((alt_max - surface[:, 2]) / up)[:, None] * sun
    return origins, -sun, (alt_max - alt_min) / up


def frozen(params: FieldParams) -> FieldParams:
    return FieldParams(params.config, {k: Tensor(v.data) for k, v in params.items()})


def render_table(params: FieldParams, table: RayTable, bounds: SceneBounds, n_samples: int,
                 chunk: int = 2048, with_beta: bool = True) -> RenderedRays:
    """Deterministic (bin-center) render of every ray in ``table``."""
    p = frozen(params)
    parts: Dict[str, List[np.ndarray]] = {k: [] for k in ("rgb", "sem_probs", "sem_class", "beta", "sun", "depth", "opacity")}
    for s in range(0, len(table), chunk):
        sl = slice(s, s + chunk)
        r = render_rays(p, table.origins[sl], table.directions[sl], table.t_far[sl], table.sun[sl],
                        table.embed[sl], bounds, n_samples, with_beta=with_beta)
        parts["rgb"].append(r["rgb"].data)
        parts["sem_probs"].append(r["sem_probs"].data)
        parts["sem_class"].append(r["sem_class"])
        parts["beta"].append(r["beta"].data if r["beta"] is not None else np.zeros(len(r["depth"].data)))
        parts["sun"].append(r["sun"].data)
        parts["depth"].append(r["depth"].data)
        parts["opacity"].append(r["opacity"])
    return RenderedRays(**{k: np.concatenate(v) for k, v in parts.items()})


# ---------------------------------------------------------------------------
# checkpoints

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def pack_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        code = _CODES[np.dtype(dt.str)]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def unpack_arrays(payload: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(payload)
    (count,) = struct.unpack_from("<I", view, 0)
    pos = 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + n]).decode()
        pos += n
        code, ndim = struct.unpack_from("<BB", view, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        out[name] = np.frombuffer(bytes(view[pos:pos + size]), dtype=dt).reshape(shape).copy()
        pos += size
    return out


@dataclass
class Checkpoint:
    config: TrainConfig
    params: FieldParams
    adam: AdamState
    epoch: int
    iteration: int
    rng_state: dict

    @property
    def config_hash(self) -> bytes:
        return self.config.hash()

    def save(self, path: Union[str, Path]) -> None:
        sections = [
            (b"CONF", self.config.canonical_json().encode()),
            (b"PARM", pack_arrays(self.params.arrays())),
            (b"ADAM", _pack_adam(self.adam)),
            (b"RNG ", json.dumps(self.rng_state, sort_keys=True).encode()),
            (b"CNTR", json.dumps({"epoch": self.epoch, "iteration": self.iteration}, sort_keys=True).encode()),
        ]
        out = io.BytesIO()
        out.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + self.config_hash)
        for tag, payload in sections:
            out.write(tag + struct.pack("<Q", len(payload)) + payload)
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(out.getvalue())
        tmp.replace(path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:4] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        stored_hash = raw[8:40]
        pos = 40
        sections = {}
        while pos < len(raw):
            tag = raw[pos:pos + 4]
            (n,) = struct.unpack_from("<Q", raw, pos + 4)
            sections[tag] = raw[pos + 12:pos + 12 + n]
            pos += 12 + n
        config = TrainConfig.from_dict(json.loads(sections[b"CONF"]))
        if config.hash() != stored_hash:
            raise ValueError(f"{path}: config hash mismatch")
        params = FieldParams.from_arrays(config.field, unpack_arrays(sections[b"PARM"]))
        counters = json.loads(sections[b"CNTR"])
        return cls(config, params, _unpack_adam(sections[b"ADAM"]), counters["epoch"],
                   counters["iteration"], json.loads(sections[b"RNG "]))


def _pack_adam(state: AdamState) -> bytes:
    head = json.dumps({"step_count": state.step_count, "beta1": state.beta1, "beta2": state.beta2,
                       "eps": state.eps}, sort_keys=True).encode()
    arrays = {f"m/{k}": v for k, v in state.first_moment.items()}
    arrays.update({f"v/{k}": v for k, v in state.second_moment.items()})
    return struct.pack("<I", len(head)) + head + pack_arrays(arrays)


def _unpack_adam(payload: bytes) -> AdamState:
    (n,) = struct.unpack_from("<I", payload, 0)
    head = json.loads(payload[4:4 + n])
    arrays = unpack_arrays(payload[4 + n:])
    m = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
    v = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}
    return AdamState(m, v, head["step_count"], head["beta1"], head["beta2"], head["eps"])


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    out_dir: Optional[Path]
    records: List[dict]
    final_metrics: Optional[dict] = None


def _record(result: LossResult, iteration: int, epoch: int, lr: float) -> dict:
    rec = {"iteration": iteration, "epoch": epoch, "lr": lr}
    for k, v in result.breakdown().items():
        rec[k] = v
    for k, v in result.weights.items():
        rec[f"w_{k}"] = v
    rec["total"] = float(result.total.data)
    return rec


def train_step(params: FieldParams, table: RayTable, batch_idx: np.ndarray, config: TrainConfig,
               bounds: SceneBounds, alt_range: Tuple[float, float], iteration: int, epoch: int,
               rng: np.random.Generator) -> Tuple[LossResult, Dict[str, np.ndarray]]:
    """Forward, loss and backward for one batch; returns gradients (params untouched)."""
    b = table.subset(batch_idx)
    schedule = config.schedule
    need_beta = schedule.color_mode(epoch) == "uncertainty"
    out = render_rays(params, b.origins, b.directions, b.t_far, b.sun, b.embed, bounds,
                      config.n_samples, jitter=True, rng=rng, with_beta=need_beta)
    batch = {
        "rgb": out["rgb"], "beta": out["beta"], "sem_probs": out["sem_probs"], "depth": out["depth"],
        "gt_rgb": b.rgb, "labels": b.labels, "transient": b.transient,
        "gt_depth": b.depth, "depth_valid": b.depth_valid,
    }
    n_solar = int(round(config.solar_fraction * len(b)))
    if schedule.use_solar and n_solar > 0:
        depth = out["depth"].data[:n_solar].astype(np.float64)
        surface = b.origins[:n_solar] + depth[:, None] * b.directions[:n_solar]
        so, sd, sfar = solar_rays(surface, b.sun[:n_solar], *alt_range)
        sol = render_rays(params, so, sd, sfar, b.sun[:n_solar], None, bounds, config.n_samples,
                          jitter=True, rng=rng, with_beta=False)
        cw = sol["weights"]
        batch["solar"] = {"transmittance": cw.transmittance, "weights": cw.weights, "sun": sol["field"].sun}
    result = total_loss(batch, epoch, iteration, config.iterations, config.weights, schedule)
    params.zero_grad()
    result.total.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    return result, grads


def train(dataset: Dataset, config: TrainConfig, out_dir: Optional[Union[str, Path]] = None,
          resume: Optional[Union[str, Path, Checkpoint]] = None, stop_at: Optional[int] = None,
          evaluate: bool = True) -> TrainResult:
    """Run (or continue) training up to ``config.iterations``.

    ``stop_at`` halts early after that many iterations, leaving a checkpoint
    that :func:`train` can resume from with identical results.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    table = build_ray_table(dataset, "train")
    bounds = dataset.bounds
    n_embed = len(dataset.train_names)
    sampler = RaySampler(len(table), config.batch_size, config.seed)
    records: List[dict] = []

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        if ckpt.config.hash() != config.hash():
            raise ValueError("checkpoint was produced with a different configuration")
        params, adam, start = ckpt.params, ckpt.adam, ckpt.iteration
        if out is not None and (out / "metrics.jsonl").exists():
            for line in (out / "metrics.jsonl").read_text().splitlines():
                rec = json.loads(line)
                if rec["iteration"] < start:
                    records.append(rec)
    else:
        params = init_params(config.field, n_embed, seed=config.seed)
        adam = AdamState.zeros_like(params.tensors)
        start = 0
    if params.n_embeddings != n_embed:
        raise ValueError("checkpoint embedding table does not match the training split")

    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    metrics_f = open(out / "metrics.jsonl", "w") if out is not None else None
    timing_f = open(out / "timing.jsonl", "a" if resume is not None else "w") if out is not None else None
    if metrics_f is not None:
        for rec in records:
            metrics_f.write(json.dumps(rec, sort_keys=True) + "\n")
    t0 = time.perf_counter()
    epoch = sampler.epoch_of(start) if start < config.iterations else sampler.epoch_of(max(start - 1, 0))
    try:
        for it in range(start, end):
            epoch = sampler.epoch_of(it)
            lr = lr_at(epoch, config.lr, config.lr_decay)
            rng = np.random.default_rng([config.seed, 1, it])
            result, grads = train_step(params, table, sampler.indices(it), config, bounds,
                                       dataset.alt_range, it, epoch, rng)
            if not math.isfinite(float(result.total.data)):
                raise TrainingDiverged(f"total loss not finite at iteration {it}: {result.terms}")
            try:
                adam_step(params.tensors, grads, adam, lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"iteration {it}: {exc}") from exc
            if it % config.log_every == 0 or it == config.iterations - 1:
                rec = _record(result, it, epoch, lr)
                records.append(rec)
                log.info(result.log_line(iter=it, epoch=epoch, lr=f"{lr:.6g}"))
                if metrics_f is not None:
                    metrics_f.write(json.dumps(rec, sort_keys=True) + "\n")
                    timing_f.write(json.dumps({"iteration": it, "wall_time": time.perf_counter() - t0}) + "\n")
            if out is not None and (it + 1) % config.checkpoint_every == 0 and it + 1 < end:
                (out / "checkpoints").mkdir(exist_ok=True)
                _checkpoint(params, adam, config, epoch, it + 1).save(out / "checkpoints" / f"iter_{it + 1:07d}.ssck")
    finally:
        if metrics_f is not None:
            metrics_f.close()
            timing_f.close()

    ckpt = _checkpoint(params, adam, config, epoch, end)
    result = TrainResult(ckpt, out, records)
    if out is not None:
        ckpt.save(out / "checkpoint.ssck")
    if evaluate and end == config.iterations:
        from .evaluation import summary_metrics
        result.final_metrics = summary_metrics(ckpt.params, dataset, config.n_samples)
        if out is not None:
            (out / "final_metrics.json").write_text(json.dumps(result.final_metrics, indent=2, sort_keys=True) + "\n")
    return result


def _checkpoint(params, adam, config, epoch, iteration) -> Checkpoint:
    return Checkpoint(config, params.copy(), _copy_adam(adam), epoch, iteration,
                      {"seed": config.seed, "streams": {"jitter": 1, "permutation": 2}, "next_iteration": iteration})


def _copy_adam(s: AdamState) -> AdamState:
    return AdamState({k: v.copy() for k, v in s.first_moment.items()},
                     {k: v.copy() for k, v in s.second_moment.items()}, s.step_count, s.beta1, s.beta2, s.eps)


# ---------------------------------------------------------------------------
# full-view rendering

def render_frame(params: FieldParams, camera: RpcModel, sun_dir, height: int, width: int,
                 alt_range: Tuple[float, float], bounds: SceneBounds, n_samples: int,
                 embed_index: int = 0) -> RenderedRays:
    rows, cols = pixel_grid(height, width)
    rays = build_rays(camera, rows, cols, *alt_range)
    n = len(rays)
    table = RayTable(rays.origins, rays.directions, rays.t_far,
                     np.broadcast_to(np.asarray(sun_dir, float), (n, 3)).copy(),
                     np.full(n, embed_index, dtype=np.int64), np.zeros((n, 3)), np.zeros(n, np.int64),
                     np.zeros(n, bool), np.zeros(n), np.zeros(n, bool), np.zeros(n, np.int64),
                     np.column_stack([rows, cols]).astype(np.int64))
    return render_table(params, table, bounds, n_samples)


def render_view(checkpoint: Union[Checkpoint, FieldParams], camera: RpcModel, sun_dir, modality: str,
                height: int, width: int, alt_range: Tuple[float, float], bounds: SceneBounds,
                colormap: Optional[np.ndarray] = None, embed_index: int = 0,
                n_samples: Optional[int] = None) -> Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """Render one modality of a full frame.

    ``semantic`` returns ``(label_image, colored_rgb)``; the others return a
    single array.  Test views have no embedding of their own, so uncertainty
    renders use ``embed_index`` (row 0 by default).
    """
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality '{modality}', expected one of {MODALITIES}")
    if isinstance(checkpoint, Checkpoint):
        params, n_default = checkpoint.params, checkpoint.config.n_samples
    else:
        params, n_default = checkpoint, 64
    if not 0 <= embed_index < params.n_embeddings:
        raise IndexError("embed_index out of range")
    r = render_frame(params, camera, sun_dir, height, width, alt_range, bounds,
                     n_samples or n_default, embed_index)
    from .render import semantic_shaded_viz
    from .synth import COLORMAP
    cmap = COLORMAP if colormap is None else np.asarray(colormap)
    if modality == "rgb":
        return r.rgb.reshape(height, width, 3)
    if modality == "semantic":
        labels = r.sem_class.reshape(height, width).astype(np.uint8)
        return labels, cmap[labels]
    if modality == "sun":
        return r.sun.reshape(height, width)
    if modality == "uncertainty":
        return r.beta.reshape(height, width)
    if modality == "depth":
        return r.depth.reshape(height, width)
    return semantic_shaded_viz(r.sem_class, r.sun, cmap).reshape(height, width, 3)
