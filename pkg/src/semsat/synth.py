"""Deterministic multi-date synthetic scenes and their exact oracle renders.

A scene is a column heightfield on a ``grid x grid`` lattice covering the
world square ``[-1, 1]^2`` (row 0 is the northern edge).  Every cell has a
static class, albedo and height.  Vehicles are per-date boxes placed on
Ground cells; they are the only thing that changes between dates.

Rendering is exact: each camera ray is walked through the lattice cells it
crosses, the first column it enters below the column top is the hit, and the
hit point is lit iff the ray toward the sun leaves the scene without entering
another column.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .camera import RpcModel, affine_rpc, build_rays, pixel_grid

CLASS_NAMES = ("Ground", "Water", "Vegetation", "Buildings", "Vehicles")
GROUND, WATER, VEGETATION, BUILDINGS, VEHICLES = range(5)
TRANSIENT_CLASSES = (VEHICLES,)
PRESETS = ("flat", "town", "parking_lot")

COLORMAP = np.array([
    [0.62, 0.62, 0.62],
    [0.16, 0.40, 0.85],
    [0.20, 0.70, 0.25],
    [0.85, 0.35, 0.25],
    [0.95, 0.85, 0.15],
])

PALETTE = np.array([
    [0.55, 0.53, 0.50],
    [0.12, 0.22, 0.38],
    [0.20, 0.42, 0.16],
    [0.78, 0.74, 0.68],
    [0.90, 0.10, 0.10],
])

VEHICLE_COLORS = np.array([
    [0.92, 0.12, 0.10],
    [0.10, 0.18, 0.85],
    [0.96, 0.96, 0.96],
    [0.06, 0.06, 0.08],
    [0.95, 0.80, 0.10],
])

ROAD_ALBEDO = np.array([0.36, 0.36, 0.38])
VEHICLE_HEIGHT = 0.025
SHADOW_EPS = 1e-6


@dataclass
class Vehicle:
    row: int
    col: int
    rows: int
    cols: int
    color: Tuple[float, float, float]


@dataclass
class SceneSpec:
    grid: int
    heights: np.ndarray
    classes: np.ndarray
    albedo: np.ndarray
    vehicles: List[List[Vehicle]]
    ambient: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.40, 0.50]))
    alt_min: float = -0.1
    alt_max: float = 0.5
    preset: str = "custom"
    seed: int = 0

    def __post_init__(self):
        g = self.grid
        if self.heights.shape != (g, g) or self.classes.shape != (g, g) or self.albedo.shape != (g, g, 3):
            raise ValueError("layer shapes must match the grid")
        top = self.heights.max() + (VEHICLE_HEIGHT if any(self.vehicles) else 0.0)
        if self.heights.min() <= self.alt_min or top >= self.alt_max:
            raise ValueError("heights must lie strictly inside the altitude bounds")
        for date in self.vehicles:
            for v in date:
                cells = self.classes[v.row:v.row + v.rows, v.col:v.col + v.cols]
                if cells.shape != (v.rows, v.cols) or np.any(cells != GROUND):
                    raise ValueError("vehicle footprint must lie on Ground cells")

    @property
    def n_dates(self) -> int:
        return len(self.vehicles)

    @property
    def cell(self) -> float:
        return 2.0 / self.grid

    def layers(self, date: Optional[int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Heights, classes and albedo with the vehicles of ``date`` (``None``: none)."""
        heights = self.heights.copy()
        classes = self.classes.copy()
        albedo = self.albedo.copy()
        if date is not None:
            for v in self.vehicles[date]:
                sl = (slice(v.row, v.row + v.rows), slice(v.col, v.col + v.cols))
                heights[sl] = self.heights[sl] + VEHICLE_HEIGHT
                classes[sl] = VEHICLES
                albedo[sl] = v.color
        return heights, classes, albedo

    def vehicle_mask(self, date: int) -> np.ndarray:
        return self.layers(date)[1] == VEHICLES


def sun_direction(elevation_deg: float, azimuth_deg: float) -> np.ndarray:
    """Unit vector toward the sun; azimuth clockwise from north."""
    el, az = np.radians(elevation_deg), np.radians(azimuth_deg)
    return np.array([np.sin(az) * np.cos(el), np.cos(az) * np.cos(el), np.sin(el)])


def view_direction(off_nadir_deg: float, azimuth_deg: float) -> np.ndarray:
    """Unit travel direction of a camera ray seen from satellite azimuth ``azimuth_deg``."""
    th, az = np.radians(off_nadir_deg), np.radians(azimuth_deg)
    return -np.array([np.sin(th) * np.sin(az), np.sin(th) * np.cos(az), np.cos(th)])


# ---------------------------------------------------------------------------
# scene generation

def _texture(rng: np.random.Generator, g: int, amount: float) -> np.ndarray:
    noise = rng.standard_normal((g, g))
    # cheap smoothing keeps neighbouring cells correlated
    noise = (noise + np.roll(noise, 1, 0) + np.roll(noise, 1, 1) + np.roll(noise, (1, 1), (0, 1))) / 2.0
    return 1.0 + amount * np.clip(noise, -2, 2)


def _place_rects(rng, occupied: np.ndarray, count: int, size_range, margin: int = 1):
    g = occupied.shape[0]
    rects = []
    for _ in range(count * 60):
        if len(rects) == count:
            break
        h = int(rng.integers(size_range[0], size_range[1] + 1))
        w = int(rng.integers(size_range[0], size_range[1] + 1))
        r = int(rng.integers(1, g - h - 1))
        c = int(rng.integers(1, g - w - 1))
        box = occupied[max(r - margin, 0):r + h + margin, max(c - margin, 0):c + w + margin]
        if box.any():
            continue
        occupied[r:r + h, c:c + w] = True
        rects.append((r, c, h, w))
    return rects


def _road_vehicles(rng, road_cells: np.ndarray, classes: np.ndarray, count: int,
                   blocked: np.ndarray) -> List[Vehicle]:
    out = []
    cand = np.argwhere(road_cells)
    for _ in range(count * 10):
        if len(out) == count or len(cand) == 0:
            break
        r, c = cand[rng.integers(len(cand))]
        horizontal = bool(rng.integers(2))
        rows, cols = (1, 2) if horizontal else (2, 1)
        foot = classes[r:r + rows, c:c + cols]
        if foot.shape != (rows, cols) or np.any(foot != GROUND) or blocked[r:r + rows, c:c + cols].any():
            continue
        if not road_cells[r:r + rows, c:c + cols].all():
            continue
        blocked[r:r + rows, c:c + cols] = True
        color = tuple(VEHICLE_COLORS[rng.integers(len(VEHICLE_COLORS))])
        out.append(Vehicle(int(r), int(c), rows, cols, color))
    return out


def generate_scene(seed: int, preset: str, n_dates: int = 10, grid: int = 48) -> SceneSpec:
    """Build a deterministic scene for ``preset`` in {flat, town, parking_lot}."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset '{preset}', expected one of {PRESETS}")
    rng = np.random.default_rng([seed, PRESETS.index(preset)])
    g = grid
    heights = np.zeros((g, g))
    classes = np.full((g, g), GROUND, dtype=np.int64)
    albedo = np.broadcast_to(PALETTE[GROUND], (g, g, 3)).copy()

    if preset == "flat":
        albedo *= _texture(rng, g, 0.08)[..., None]
        return SceneSpec(g, heights, classes, np.clip(albedo, 0, 1), [[] for _ in range(n_dates)],
                         preset=preset, seed=seed)

    occupied = np.zeros((g, g), dtype=bool)
    road = np.zeros((g, g), dtype=bool)
    # two horizontal and two vertical roads, each two cells wide
    for k in rng.choice(np.arange(6, g - 8), size=2, replace=False):
        road[k:k + 2, :] = True
    for k in rng.choice(np.arange(6, g - 8), size=2, replace=False):
        road[:, k:k + 2] = True
    occupied |= road
    albedo[road] = ROAD_ALBEDO

    lot = np.zeros((g, g), dtype=bool)
    slots: List[Tuple[int, int]] = []
    if preset == "parking_lot":
        lr, lc, lh, lw = g // 2 - 8, g // 2 - 10, 16, 20
        lot[lr:lr + lh, lc:lc + lw] = True
        occupied[max(lr - 1, 0):lr + lh + 1, max(lc - 1, 0):lc + lw + 1] = True
        albedo[lot] = ROAD_ALBEDO * 1.1
        # vertical 1x2 slots in rows separated by a one-cell aisle
        for r in range(lr + 1, lr + lh - 2, 3):
            for c in range(lc + 1, lc + lw - 1, 2):
                slots.append((r, c))

    town = preset == "town"
    n_buildings, n_veg, n_water = (18, 16, 3) if town else (6, 5, 1)
    # water first so it finds room
    for r, c, h, w in _place_rects(rng, occupied, n_water, (5, 10)):
        classes[r:r + h, c:c + w] = WATER
        heights[r:r + h, c:c + w] = -0.02
        albedo[r:r + h, c:c + w] = PALETTE[WATER]
    for r, c, h, w in _place_rects(rng, occupied, n_buildings, (4, 8)):
        heights[r:r + h, c:c + w] = rng.uniform(0.08, 0.3)
        classes[r:r + h, c:c + w] = BUILDINGS
        albedo[r:r + h, c:c + w] = PALETTE[BUILDINGS] * rng.uniform(0.85, 1.1)
    for r, c, h, w in _place_rects(rng, occupied, n_veg, (4, 9) if town else (3, 6)):
        yy, xx = np.mgrid[0:h, 0:w]
        blob = ((yy - (h - 1) / 2) / (h / 2)) ** 2 + ((xx - (w - 1) / 2) / (w / 2)) ** 2 <= 1.0
        sub = (slice(r, r + h), slice(c, c + w))
        classes[sub][blob] = VEGETATION
        heights[sub][blob] = rng.uniform(0.03, 0.07)
        albedo[sub][blob] = PALETTE[VEGETATION]
    if town:
        # parkland: smooth noise patches over the remaining open ground
        free = (classes == GROUND) & ~road
        field_ = ndimage.gaussian_filter(rng.standard_normal((g, g)), 2.5, mode="wrap")
        park = free & (field_ > np.quantile(field_[free], 0.3))
        classes[park] = VEGETATION
        heights[park] = 0.03 + 0.3 * np.clip(field_[park], 0, 0.13)
        albedo[park] = PALETTE[VEGETATION]
    albedo = np.clip(albedo * _texture(rng, g, 0.06)[..., None], 0.0, 1.0)

    slot_prob = rng.uniform(0.7, 0.95, size=len(slots))
    slot_color = VEHICLE_COLORS[rng.integers(len(VEHICLE_COLORS), size=max(len(slots), 1))]
    vehicles: List[List[Vehicle]] = []
    n_road = 4 if preset == "town" else 1
    for _ in range(n_dates):
        blocked = np.zeros((g, g), dtype=bool)
        today = []
        for k, (r, c) in enumerate(slots):
            if rng.random() < slot_prob[k]:
                today.append(Vehicle(r, c, 2, 1, tuple(slot_color[k])))
                blocked[r:r + 2, c] = True
        today += _road_vehicles(rng, road & (classes == GROUND), classes, n_road, blocked)
        vehicles.append(today)
    return SceneSpec(g, heights, classes, albedo, vehicles, preset=preset, seed=seed)


# ---------------------------------------------------------------------------
# exact heightfield ray casting

def _cell_segments(origins: np.ndarray, dirs: np.ndarray, t_end: np.ndarray, grid: int):
    """Sorted boundaries of the lattice cells crossed by each ray on [0, t_end]."""
    edges = np.linspace(-1.0, 1.0, grid + 1)
    R = len(origins)
    parts = [np.zeros((R, 1)), t_end[:, None]]
    for axis in (0, 1):
        d = dirs[:, axis:axis + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (edges[None, :] - origins[:, axis:axis + 1]) / d
        t = np.where((np.abs(d) > 1e-15) & (t > 0) & (t < t_end[:, None]), t, t_end[:, None])
        parts.append(t)
    T = np.sort(np.concatenate(parts, axis=1), axis=1)
    return T[:, :-1], T[:, 1:]


def _cells_at(points: np.ndarray, grid: int):
    col = np.floor((points[..., 0] + 1.0) / 2.0 * grid).astype(np.int64)
    row = np.floor((1.0 - points[..., 1]) / 2.0 * grid).astype(np.int64)
    inside = (row >= 0) & (row < grid) & (col >= 0) & (col < grid)
    return np.clip(row, 0, grid - 1), np.clip(col, 0, grid - 1), inside


def intersect_heightfield(heights: np.ndarray, origins: np.ndarray, dirs: np.ndarray,
                          t_far: np.ndarray, outside_height: float = 0.0):
    """First hit of downward rays with the column heightfield.

    Returns ``(t_hit, row, col, inside)``; cells outside the lattice behave as
    flat ground at ``outside_height``.
    """
    g = heights.shape[0]
    ta, tb = _cell_segments(origins, dirs, t_far, g)
    mid = origins[:, None, :] + ((ta + tb) / 2)[..., None] * dirs[:, None, :]
    row, col, inside = _cells_at(mid, g)
    h = np.where(inside, heights[row, col], outside_height)
    z_exit = origins[:, 2:3] + tb * dirs[:, 2:3]
    hit = z_exit <= h + 1e-12
    hit[:, -1] = True
    first = np.argmax(hit, axis=1)
    idx = np.arange(len(origins))
    ta_f, h_f = ta[idx, first], h[idx, first]
    z_entry = origins[:, 2] + ta_f * dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_top = (h_f - origins[:, 2]) / dirs[:, 2]
    t_hit = np.where(z_entry <= h_f, ta_f, t_top)
    t_hit = np.minimum(t_hit, t_far)
    return t_hit, row[idx, first], col[idx, first], inside[idx, first]


def sun_visible(heights: np.ndarray, points: np.ndarray, sun_dir: np.ndarray, z_top: float,
                outside_height: float = 0.0) -> np.ndarray:
    """True where the segment from ``points`` toward the sun clears every column."""
    g = heights.shape[0]
    sun_dir = np.asarray(sun_dir, dtype=np.float64)
    starts = points + SHADOW_EPS * sun_dir
    R = len(points)
    dirs = np.broadcast_to(sun_dir, (R, 3))
    if sun_dir[2] <= 0:
        return np.zeros(R, dtype=bool)
    t_end = np.maximum((z_top - starts[:, 2]) / sun_dir[2], 1e-9)
    ta, tb = _cell_segments(starts, dirs, t_end, g)
    mid = starts[:, None, :] + ((ta + tb) / 2)[..., None] * dirs[:, None, :]
    row, col, inside = _cells_at(mid, g)
    h = np.where(inside, heights[row, col], outside_height)
    z_entry = starts[:, 2:3] + ta * dirs[:, 2:3]
    nonempty = tb > ta
    blocked = (z_entry < h) & nonempty
    return ~blocked.any(axis=1)


# ---------------------------------------------------------------------------
# frames

@dataclass
class FrameRecord:
    name: str
    image: np.ndarray
    labels: np.ndarray
    sun_dir: np.ndarray
    camera: RpcModel
    date: int
    embed_index: Optional[int]
    depth_samples: np.ndarray
    labels_static: Optional[np.ndarray] = None
    image_static: Optional[np.ndarray] = None
    view_dir: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape

    @property
    def transient_mask(self) -> np.ndarray:
        """Stored mask when present (it survives label corruption), else derived from labels."""
        if self.mask is not None:
            return np.asarray(self.mask, dtype=bool)
        return np.isin(self.labels, TRANSIENT_CLASSES)


@dataclass
class OracleView:
    image: np.ndarray
    labels: np.ndarray
    depth: np.ndarray
    lit: np.ndarray
    albedo: np.ndarray


def render_layers(scene: SceneSpec, camera: RpcModel, sun_dir: np.ndarray, date: Optional[int],
                  height: int, width: int) -> OracleView:
    heights, classes, albedo_map = scene.layers(date)
    rows, cols = pixel_grid(height, width)
    rays = build_rays(camera, rows, cols, scene.alt_min, scene.alt_max)
    t_hit, r, c, inside = intersect_heightfield(heights, rays.origins, rays.directions, rays.t_far)
    points = rays.origins + t_hit[:, None] * rays.directions
    lit = sun_visible(heights, points, sun_dir, scene.alt_max)
    labels = np.where(inside, classes[r, c], GROUND)
    albedo = np.where(inside[:, None], albedo_map[r, c], PALETTE[GROUND])
    litf = lit.astype(np.float64)[:, None]
    color = albedo * (litf + (1.0 - litf) * scene.ambient)
    return OracleView(color.reshape(height, width, 3), labels.reshape(height, width).astype(np.uint8),
                      t_hit.reshape(height, width), lit.reshape(height, width),
                      albedo.reshape(height, width, 3))


def oracle_render(scene: SceneSpec, camera: RpcModel, sun_dir, date: int, height: int = 48,
                  width: int = 48, name: str = "frame", embed_index: Optional[int] = None,
                  depth_fraction: float = 0.2, rng: Optional[np.random.Generator] = None,
                  view_dir=None) -> FrameRecord:
    """Exact render of one date: color, labels, vehicle-free variants and sparse depth."""
    sun_dir = np.asarray(sun_dir, dtype=np.float64)
    sun_dir = sun_dir / np.linalg.norm(sun_dir)
    live = render_layers(scene, camera, sun_dir, date, height, width)
    static = render_layers(scene, camera, sun_dir, None, height, width)
    rng = rng if rng is not None else np.random.default_rng(date)
    # sparse depth only on static structure, like a tie-point cloud
    static_px = np.argwhere(live.labels != VEHICLES)
    k = int(round(depth_fraction * len(static_px)))
    chosen = static_px[np.sort(rng.choice(len(static_px), size=k, replace=False))] if k else np.zeros((0, 2), int)
    depth = np.column_stack([chosen, live.depth[chosen[:, 0], chosen[:, 1]]]) if k else np.zeros((0, 3))
    return FrameRecord(name=name, image=live.image, labels=live.labels, sun_dir=sun_dir, camera=camera,
                       date=date, embed_index=embed_index, depth_samples=depth,
                       labels_static=static.labels, image_static=static.image,
                       view_dir=None if view_dir is None else np.asarray(view_dir, float))


def make_views(seed: int, n_views: int, max_off_nadir: float = 20.0):
    """Per-view camera direction and sun direction, one date per view."""
    rng = np.random.default_rng([seed, 99])
    views = []
    for _ in range(n_views):
        off = rng.uniform(0.0, max_off_nadir)
        az = rng.uniform(0.0, 360.0)
        sun_el = rng.uniform(50.0, 75.0)
        sun_az = rng.uniform(110.0, 250.0)
        views.append((view_direction(off, az), sun_direction(sun_el, sun_az)))
    return views


def render_frames(scene: SceneSpec, n_views: int, size: int = 48, n_test: Optional[int] = None,
                  depth_fraction: float = 0.2) -> Tuple[List[FrameRecord], List[str], List[str]]:
    if n_views < 2:
        raise ValueError("need at least two views")
    if n_views > scene.n_dates:
        raise ValueError(f"scene has {scene.n_dates} dates, {n_views} views requested")
    if n_test is None:
        n_test = max(1, int(round(0.2 * n_views)))
    n_train = n_views - n_test
    frames = []
    for i, (vdir, sdir) in enumerate(make_views(scene.seed, n_views)):
        name = f"view{i:02d}"
        cam = affine_rpc(vdir, size, size)
        frames.append(oracle_render(scene, cam, sdir, i, size, size, name=name,
                                    embed_index=i if i < n_train else None,
                                    depth_fraction=depth_fraction,
                                    rng=np.random.default_rng([scene.seed, 7, i]), view_dir=vdir))
    names = [f.name for f in frames]
    return frames, names[:n_train], names[n_train:]
