"""RPC camera model, altitude-bounded rays and ray discretization.

Geographic coordinates are treated as a local planar frame: longitude maps to
world ``x`` (east), latitude to world ``y`` (north) and altitude to ``z`` (up).

Coefficient ordering follows RPC00B, with L = longitude, P = latitude and
H = altitude, all normalized:

====  =====  ====  =====  ====  =====  ====  =====
 idx  term   idx   term   idx   term   idx   term
====  =====  ====  =====  ====  =====  ====  =====
  1   1        6   L H     11   P L H   16   P^3
  2   L        7   P H     12   L^3     17   P H^2
  3   P        8   L^2     13   L P^2   18   L^2 H
  4   H        9   P^2     14   L H^2   19   P^2 H
  5   L P     10   H^2     15   L^2 P   20   H^3
====  =====  ====  =====  ====  =====  ====  =====
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

OFFSET_KEYS = ("LINE_OFF", "SAMP_OFF", "LAT_OFF", "LONG_OFF", "HEIGHT_OFF")
SCALE_KEYS = ("LINE_SCALE", "SAMP_SCALE", "LAT_SCALE", "LONG_SCALE", "HEIGHT_SCALE")
COEFF_KEYS = ("LINE_NUM_COEFF", "LINE_DEN_COEFF", "SAMP_NUM_COEFF", "SAMP_DEN_COEFF")


class LocalizationError(RuntimeError):
    pass


def monomials(L, P, H) -> np.ndarray:
    """The 20 cubic monomials, stacked on a new leading axis."""
    L, P, H = np.broadcast_arrays(np.asarray(L, float), np.asarray(P, float), np.asarray(H, float))
    one = np.ones_like(L)
    return np.stack([
        one, L, P, H, L * P, L * H, P * H, L * L, P * P, H * H,
        P * L * H, L ** 3, L * P * P, L * H * H, L * L * P, P ** 3, P * H * H,
        L * L * H, P * P * H, H ** 3,
    ])


def _monomials_dL(L, P, H) -> np.ndarray:
    zero = np.zeros_like(L)
    one = np.ones_like(L)
    return np.stack([
        zero, one, zero, zero, P, H, zero, 2 * L, zero, zero,
        P * H, 3 * L * L, P * P, H * H, 2 * L * P, zero, zero,
        2 * L * H, zero, zero,
    ])


def _monomials_dP(L, P, H) -> np.ndarray:
    zero = np.zeros_like(L)
    one = np.ones_like(L)
    return np.stack([
        zero, zero, one, zero, L, zero, H, zero, 2 * P, zero,
        L * H, zero, 2 * L * P, zero, L * L, 3 * P * P, H * H,
        zero, 2 * P * H, zero,
    ])


@dataclass
class RpcModel:
    line_num: np.ndarray
    line_den: np.ndarray
    samp_num: np.ndarray
    samp_den: np.ndarray
    line_off: float = 0.0
    samp_off: float = 0.0
    lat_off: float = 0.0
    lon_off: float = 0.0
    alt_off: float = 0.0
    line_scale: float = 1.0
    samp_scale: float = 1.0
    lat_scale: float = 1.0
    lon_scale: float = 1.0
    alt_scale: float = 1.0

    def __post_init__(self):
        for name in ("line_num", "line_den", "samp_num", "samp_den"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (20,):
                raise ValueError(f"{name} must have 20 coefficients")
            setattr(self, name, arr)
        if self.line_den[0] == 0 or self.samp_den[0] == 0:
            raise ValueError("denominator constant coefficient must be non-zero")
        for name in ("line_scale", "samp_scale", "lat_scale", "lon_scale", "alt_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    # -- normalization helpers
    def normalize_ground(self, lat, lon, alt):
        return ((np.asarray(lat, float) - self.lat_off) / self.lat_scale,
                (np.asarray(lon, float) - self.lon_off) / self.lon_scale,
                (np.asarray(alt, float) - self.alt_off) / self.alt_scale)

    def normalize_image(self, row, col):
        return ((np.asarray(row, float) - self.line_off) / self.line_scale,
                (np.asarray(col, float) - self.samp_off) / self.samp_scale)

    def _ratios(self, P, L, H):
        m = monomials(L, P, H)
        num_r = np.tensordot(self.line_num, m, axes=1)
        den_r = np.tensordot(self.line_den, m, axes=1)
        num_c = np.tensordot(self.samp_num, m, axes=1)
        den_c = np.tensordot(self.samp_den, m, axes=1)
        if np.any(np.abs(den_r) < 1e-12) or np.any(np.abs(den_c) < 1e-12):
            raise ZeroDivisionError("RPC denominator vanishes")
        return num_r, den_r, num_c, den_c, m

    def project_normalized(self, P, L, H):
        num_r, den_r, num_c, den_c, _ = self._ratios(P, L, H)
        return num_r / den_r, num_c / den_c

    def project(self, lat, lon, alt) -> Tuple[np.ndarray, np.ndarray]:
        """Ground (lat, lon, alt) to image (row, col)."""
        P, L, H = self.normalize_ground(lat, lon, alt)
        rn, cn = self.project_normalized(P, L, H)
        return rn * self.line_scale + self.line_off, cn * self.samp_scale + self.samp_off

    def localize(self, row, col, alt, tol: float = 1e-9, max_iter: int = 50):
        """Image (row, col) at altitude ``alt`` to ground (lat, lon) by Newton's method."""
        rn, cn = self.normalize_image(row, col)
        _, _, H = self.normalize_ground(0.0, 0.0, alt)
        rn, cn, H = np.broadcast_arrays(rn, cn, H)
        P = np.zeros_like(rn)
        L = np.zeros_like(rn)
        converged = np.zeros(rn.shape, dtype=bool)
        for _ in range(max_iter):
            num_r, den_r, num_c, den_c, m = self._ratios(P, L, H)
            fr = num_r / den_r - rn
            fc = num_c / den_c - cn
            converged = np.maximum(np.abs(fr), np.abs(fc)) < tol
            if converged.all():
                break
            dL = _monomials_dL(L, P, H)
            dP = _monomials_dP(L, P, H)
            # quotient rule: d(n/d) = (n' d - n d') / d^2
            jr_P = (np.tensordot(self.line_num, dP, 1) * den_r - num_r * np.tensordot(self.line_den, dP, 1)) / den_r ** 2
            jr_L = (np.tensordot(self.line_num, dL, 1) * den_r - num_r * np.tensordot(self.line_den, dL, 1)) / den_r ** 2
            jc_P = (np.tensordot(self.samp_num, dP, 1) * den_c - num_c * np.tensordot(self.samp_den, dP, 1)) / den_c ** 2
            jc_L = (np.tensordot(self.samp_num, dL, 1) * den_c - num_c * np.tensordot(self.samp_den, dL, 1)) / den_c ** 2
            det = jr_P * jc_L - jr_L * jc_P
            if np.any(np.abs(det[~converged]) < 1e-14):
                raise LocalizationError("singular RPC Jacobian during localization")
            step_P = np.where(converged, 0.0, (jc_L * fr - jr_L * fc) / det)
            step_L = np.where(converged, 0.0, (-jc_P * fr + jr_P * fc) / det)
            # backtrack where a full step would increase the residual
            res0 = np.maximum(np.abs(fr), np.abs(fc))
            scale = np.ones_like(P)
            for _ in range(12):
                tP, tL = P - scale * step_P, L - scale * step_L
                with np.errstate(all="ignore"):
                    m_t = monomials(tL, tP, H)
                    r_t = np.tensordot(self.line_num, m_t, 1) / np.tensordot(self.line_den, m_t, 1) - rn
                    c_t = np.tensordot(self.samp_num, m_t, 1) / np.tensordot(self.samp_den, m_t, 1) - cn
                worse = ~(np.maximum(np.abs(r_t), np.abs(c_t)) < res0) & ~converged & (res0 > 1e-6)
                if not worse.any():
                    break
                scale = np.where(worse, scale * 0.5, scale)
            P = P - scale * step_P
            L = L - scale * step_L
        else:
            num_r, den_r, num_c, den_c, _ = self._ratios(P, L, H)
            resid = np.maximum(np.abs(num_r / den_r - rn), np.abs(num_c / den_c - cn))
            if np.any(resid >= tol):
                raise LocalizationError(f"localization did not converge in {max_iter} iterations")
        return P * self.lat_scale + self.lat_off, L * self.lon_scale + self.lon_off

    # -- text key/value format
    def to_text(self) -> str:
        vals = dict(zip(OFFSET_KEYS, (self.line_off, self.samp_off, self.lat_off, self.lon_off, self.alt_off)))
        vals.update(zip(SCALE_KEYS, (self.line_scale, self.samp_scale, self.lat_scale, self.lon_scale,
                                     self.alt_scale)))
        lines = [f"{k}: {float(v)!r}" for k, v in vals.items()]
        for key, coeffs in zip(COEFF_KEYS, (self.line_num, self.line_den, self.samp_num, self.samp_den)):
            lines += [f"{key}_{i + 1}: {float(c)!r}" for i, c in enumerate(coeffs)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RpcModel":
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(":")
            vals[key.strip()] = float(value.split()[0])
        try:
            coeffs = [[vals[f"{key}_{i}"] for i in range(1, 21)] for key in COEFF_KEYS]
            offs = [vals[k] for k in OFFSET_KEYS]
            scales = [vals[k] for k in SCALE_KEYS]
        except KeyError as exc:
            raise ValueError(f"missing RPC key {exc.args[0]}") from None
        return cls(*coeffs, *offs, *scales)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RpcModel":
        return cls.from_text(Path(path).read_text())


def affine_rpc(view_dir, height: int, width: int, half_extent: float = 1.0) -> RpcModel:
    """Orthographic camera looking along ``view_dir`` (pointing down).

    Ground point (lat, lon, alt) is slid along the view direction to ``alt = 0``
    and the footprint ``[-half_extent, half_extent]^2`` fills the image, north up.
    """
    d = np.asarray(view_dir, dtype=np.float64)
    d = d / np.linalg.norm(d)
    if d[2] >= 0:
        raise ValueError("view direction must point downward")
    kx, ky = d[0] / d[2], d[1] / d[2]
    line_num = np.zeros(20)
    samp_num = np.zeros(20)
    den = np.zeros(20)
    den[0] = 1.0
    # row_n = -(lat - alt * ky) / extent, col_n = (lon - alt * kx) / extent
    line_num[2] = -1.0 / half_extent
    line_num[3] = ky / half_extent
    samp_num[1] = 1.0 / half_extent
    samp_num[3] = -kx / half_extent
    return RpcModel(line_num, den.copy(), samp_num, den.copy(),
                    line_off=height / 2.0 - 0.5, samp_off=width / 2.0 - 0.5,
                    line_scale=height / 2.0, samp_scale=width / 2.0)


def geo_to_world(lat, lon, alt) -> np.ndarray:
    return np.stack(np.broadcast_arrays(np.asarray(lon, float), np.asarray(lat, float),
                                        np.asarray(alt, float)), axis=-1)


def world_to_geo(points: np.ndarray):
    points = np.asarray(points, float)
    return points[..., 1], points[..., 0], points[..., 2]


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    pixel: Tuple[float, float] = (0.0, 0.0)
    frame_index: int = 0

    def __post_init__(self):
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be smaller than t_far")


@dataclass
class RayBundle:
    """Vectorized rays: origins (R, 3), unit directions (R, 3), t_far (R,)."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def ray(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i], float(self.t_near[i]), float(self.t_far[i]))


def build_rays(model: RpcModel, rows, cols, alt_min: float, alt_max: float) -> RayBundle:
    """Rays from the ``alt_max`` localization of each pixel down to ``alt_min``."""
    if not alt_min < alt_max:
        raise ValueError("alt_min must be below alt_max")
    rows = np.asarray(rows, float).ravel()
    cols = np.asarray(cols, float).ravel()
    top = geo_to_world(*model.localize(rows, cols, np.full_like(rows, alt_max)), np.full_like(rows, alt_max))
    bottom = geo_to_world(*model.localize(rows, cols, np.full_like(rows, alt_min)), np.full_like(rows, alt_min))
    diff = bottom - top
    dist = np.linalg.norm(diff, axis=-1)
    return RayBundle(top, diff / dist[:, None], np.zeros_like(dist), dist)


def build_ray(model: RpcModel, pixel, alt_min: float, alt_max: float, frame_index: int = 0) -> Ray:
    bundle = build_rays(model, [pixel[0]], [pixel[1]], alt_min, alt_max)
    ray = bundle.ray(0)
    ray.pixel = (float(pixel[0]), float(pixel[1]))
    ray.frame_index = frame_index
    return ray


def pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column of every pixel center, row-major."""
    rows, cols = np.meshgrid(np.arange(height, dtype=float), np.arange(width, dtype=float), indexing="ij")
    return rows.ravel(), cols.ravel()


@dataclass
class SampleSet:
    positions: np.ndarray
    t: np.ndarray
    deltas: np.ndarray

    @property
    def n(self) -> int:
        return self.t.shape[-1]


def sample_rays(origins: np.ndarray, directions: np.ndarray, t_near: np.ndarray, t_far: np.ndarray,
                n_samples: int, jitter: bool = False, rng: Optional[np.random.Generator] = None,
                dtype=np.float64) -> SampleSet:
    """Stratified samples: bin centers, or one uniform draw per bin when jittering."""
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    origins = np.asarray(origins, dtype)
    directions = np.asarray(directions, dtype)
    t_near = np.asarray(t_near, dtype).reshape(-1, 1)
    t_far = np.asarray(t_far, dtype).reshape(-1, 1)
    R = origins.shape[0]
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        u = rng.random((R, n_samples)).astype(dtype)
    else:
        u = np.full((R, n_samples), 0.5, dtype=dtype)
    bins = (t_far - t_near) / n_samples
    t = t_near + (np.arange(n_samples, dtype=dtype) + u) * bins
    deltas = np.diff(t, axis=1, prepend=t_near)
    positions = origins[:, None, :] + t[..., None] * directions[:, None, :]
    return SampleSet(positions, t, deltas)


def sample_along_ray(ray: Ray, n_samples: int = 64, jitter: bool = False,
                     rng: Optional[np.random.Generator] = None) -> SampleSet:
    s = sample_rays(ray.origin[None], ray.direction[None], [ray.t_near], [ray.t_far], n_samples, jitter, rng)
    return SampleSet(s.positions[0], s.t[0], s.deltas[0])


@dataclass
class SceneBounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise ValueError("bounds must be 3-vectors")
        if np.any(self.hi <= self.lo):
            raise ValueError("degenerate scene bounds")

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


def world_normalize(points: np.ndarray, bounds: SceneBounds) -> np.ndarray:
    points = np.asarray(points)
    center = (bounds.lo + bounds.hi) / 2
    half = (bounds.hi - bounds.lo) / 2
    return ((points - center) / half).astype(points.dtype if points.dtype.kind == "f" else np.float64)


def world_denormalize(points: np.ndarray, bounds: SceneBounds) -> np.ndarray:
    center = (bounds.lo + bounds.hi) / 2
    half = (bounds.hi - bounds.lo) / 2
    return np.asarray(points) * half + center
