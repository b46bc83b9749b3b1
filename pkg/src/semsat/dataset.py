"""On-disk dataset layout.

::

    meta.json              scene bounds, class names, split, per-frame sun/embedding
    rpc/<frame>.txt        RPC key/value file
    rgb/<frame>.png        8-bit color
    labels/<frame>.png     palette PNG, index = class
    depth/<frame>.bin      "SSNF", u32 count, count x (u32 row, u32 col, f32 depth), LE
    labels_static/<frame>.png   vehicle-free labels
    rgb_static/<frame>.png      vehicle-free color
    masks/<frame>.png           transient mask (255 = vehicle)
"""

from __future__ import annotations

import json
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from PIL import Image

from .camera import RpcModel, SceneBounds
from .synth import CLASS_NAMES, COLORMAP, TRANSIENT_CLASSES, FrameRecord, SceneSpec, render_frames

DEPTH_MAGIC = b"SSNF"
DEPTH_DTYPE = np.dtype([("row", "<u4"), ("col", "<u4"), ("depth", "<f4")])
FORMAT_VERSION = 1

PathLike = Union[str, Path]


def write_depth(path: PathLike, samples: np.ndarray) -> None:
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    rec = np.zeros(len(samples), dtype=DEPTH_DTYPE)
    rec["row"] = samples[:, 0].astype(np.uint32)
    rec["col"] = samples[:, 1].astype(np.uint32)
    rec["depth"] = samples[:, 2].astype(np.float32)
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<I", len(rec)) + rec.tobytes())


def read_depth(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth file")
    (count,) = struct.unpack("<I", raw[4:8])
    rec = np.frombuffer(raw[8:], dtype=DEPTH_DTYPE, count=count)
    return np.column_stack([rec["row"], rec["col"], rec["depth"]]).astype(np.float64)


def write_rgb(path: PathLike, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_rgb(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_labels(path: PathLike, labels: np.ndarray, colormap: np.ndarray = COLORMAP) -> None:
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    pal = np.zeros((256, 3), dtype=np.uint8)
    pal[:len(colormap)] = np.round(np.asarray(colormap) * 255).astype(np.uint8)
    im.putpalette(pal.ravel().tolist())
    im.save(path)


def read_labels(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise ValueError(f"{path}: label image must be palette or grayscale")
        return np.asarray(im, dtype=np.uint8).copy()


def write_mask(path: PathLike, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, mode="L").save(path)


def read_mask(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im) > 127


@dataclass
class Dataset:
    root: Path
    meta: dict
    frames: Dict[str, FrameRecord]

    @property
    def bounds(self) -> SceneBounds:
        return SceneBounds(self.meta["bounds"]["lo"], self.meta["bounds"]["hi"])

    @property
    def train_names(self) -> List[str]:
        return list(self.meta["split"]["train"])

    @property
    def test_names(self) -> List[str]:
        return list(self.meta["split"]["test"])

    @property
    def alt_range(self):
        return float(self.meta["alt_min"]), float(self.meta["alt_max"])

    @property
    def n_classes(self) -> int:
        return len(self.meta["class_names"])

    @property
    def colormap(self) -> np.ndarray:
        return np.asarray(self.meta["colormap"], dtype=np.float64)

    @property
    def transient_classes(self) -> List[int]:
        return list(self.meta.get("transient_classes", TRANSIENT_CLASSES))

    def split(self, which: str) -> List[FrameRecord]:
        names = {"train": self.train_names, "test": self.test_names}[which]
        return [self.frames[n] for n in names]


def export_dataset(scene: SceneSpec, n_views: int, out_dir: PathLike, n_test: Optional[int] = None,
                   size: int = 48, depth_fraction: float = 0.2) -> Dataset:
    """Render ``n_views`` dates of ``scene`` and write them in the dataset layout."""
    frames, train, test = render_frames(scene, n_views, size=size, n_test=n_test,
                                        depth_fraction=depth_fraction)
    out = Path(out_dir)
    meta = {
        "format": FORMAT_VERSION,
        "scene": {"preset": scene.preset, "seed": scene.seed, "grid": scene.grid},
        "bounds": {"lo": [-1.0, -1.0, scene.alt_min], "hi": [1.0, 1.0, scene.alt_max]},
        "alt_min": scene.alt_min,
        "alt_max": scene.alt_max,
        "height": size,
        "width": size,
        "class_names": list(CLASS_NAMES),
        "colormap": COLORMAP.tolist(),
        "transient_classes": list(TRANSIENT_CLASSES),
        "ambient": scene.ambient.tolist(),
        "split": {"train": train, "test": test},
        "frames": {
            f.name: {"sun_dir": f.sun_dir.tolist(), "embed_index": f.embed_index, "date": f.date,
                     "view_dir": None if f.view_dir is None else f.view_dir.tolist()}
            for f in frames
        },
    }
    write_frames(out, meta, frames)
    return Dataset(out, meta, {f.name: f for f in frames})


def write_frames(out: Path, meta: dict, frames: List[FrameRecord]) -> None:
    for sub in ("rpc", "rgb", "labels", "depth", "labels_static", "rgb_static", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for f in frames:
        f.camera.save(out / "rpc" / f"{f.name}.txt")
        write_rgb(out / "rgb" / f"{f.name}.png", f.image)
        write_labels(out / "labels" / f"{f.name}.png", f.labels, np.asarray(meta["colormap"]))
        write_depth(out / "depth" / f"{f.name}.bin", f.depth_samples)
        write_mask(out / "masks" / f"{f.name}.png", f.transient_mask)
        if f.labels_static is not None:
            write_labels(out / "labels_static" / f"{f.name}.png", f.labels_static, np.asarray(meta["colormap"]))
        if f.image_static is not None:
            write_rgb(out / "rgb_static" / f"{f.name}.png", f.image_static)


def load_dataset(root: PathLike) -> Dataset:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{root} has no meta.json")
    meta = json.loads(meta_path.read_text())
    frames: Dict[str, FrameRecord] = {}
    for name, info in meta["frames"].items():
        static_lbl = root / "labels_static" / f"{name}.png"
        static_rgb = root / "rgb_static" / f"{name}.png"
        frames[name] = FrameRecord(
            name=name,
            image=read_rgb(root / "rgb" / f"{name}.png"),
            labels=read_labels(root / "labels" / f"{name}.png"),
            sun_dir=np.asarray(info["sun_dir"], dtype=np.float64),
            camera=RpcModel.load(root / "rpc" / f"{name}.txt"),
            date=int(info.get("date", 0)),
            embed_index=info.get("embed_index"),
            depth_samples=read_depth(root / "depth" / f"{name}.bin"),
            labels_static=read_labels(static_lbl) if static_lbl.exists() else None,
            image_static=read_rgb(static_rgb) if static_rgb.exists() else None,
            view_dir=None if info.get("view_dir") is None else np.asarray(info["view_dir"]),
            mask=read_mask(mask_path) if (mask_path := root / "masks" / f"{name}.png").exists() else None,
        )
    return Dataset(root, meta, frames)


def copy_dataset(src: PathLike, dst: PathLike) -> Path:
    src, dst = Path(src), Path(dst)
    if dst.exists():
        shutil.rmtree(dst)
    shutil.copytree(src, dst)
    return dst
