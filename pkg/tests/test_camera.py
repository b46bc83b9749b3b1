import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semsat.camera import (LocalizationError, RpcModel, SceneBounds, affine_rpc, build_ray, monomials,
                           sample_along_ray, sample_rays, world_denormalize, world_normalize)
from semsat.checks import random_cubic_rpc


def offset_only():
    num = np.zeros(20)
    den = np.zeros(20)
    den[0] = 1.0
    return RpcModel(num, den.copy(), num.copy(), den.copy(), line_off=12.0, samp_off=-3.0,
                    lat_off=0.4, lon_off=-0.2, line_scale=10, samp_scale=10)


def test_zero_numerator_projects_to_offsets():
    m = offset_only()
    r, c = m.project(np.array([0.3, -5.0]), np.array([1.0, 2.0]), np.array([0.0, 9.0]))
    assert np.all(r == 12.0) and np.all(c == -3.0)


def test_affine_projection_matches_polynomial():
    rng = np.random.default_rng(0)
    ln, sn = np.zeros(20), np.zeros(20)
    ln[1:3], sn[1:3] = rng.normal(size=2), rng.normal(size=2)
    den = np.eye(20)[0]
    m = RpcModel(ln, den, sn, den, line_off=5, samp_off=7, line_scale=3, samp_scale=4,
                 lat_scale=2, lon_scale=2)
    lat, lon = rng.uniform(-1, 1, 10), rng.uniform(-1, 1, 10)
    r, c = m.project(lat, lon, np.zeros(10))
    mono = monomials(lon / 2, lat / 2, np.zeros(10))
    assert np.allclose(r, (ln @ mono) * 3 + 5)
    assert np.allclose(c, (sn @ mono) * 4 + 7)


def test_affine_localize_is_exact_in_one_step():
    m = affine_rpc(np.array([0.2, -0.1, -1.0]), 32, 32)
    lat, lon = np.array([0.3, -0.7]), np.array([0.5, 0.1])
    r, c = m.project(lat, lon, np.array([0.2, 0.2]))
    la, lo = m.localize(r, c, 0.2, max_iter=2)
    assert np.allclose(la, lat, atol=1e-12) and np.allclose(lo, lon, atol=1e-12)


def test_offset_only_localize_not_invertible():
    # a constant projection has a singular Jacobian away from the offset pixel
    with pytest.raises(LocalizationError):
        offset_only().localize(np.array([0.0]), np.array([0.0]), 0.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_random_cubic_roundtrip(seed):
    rng = np.random.default_rng(seed)
    m = random_cubic_rpc(seed)
    P, L, H = (rng.uniform(-1, 1, 20) for _ in range(3))
    lat, lon, alt = P * m.lat_scale + m.lat_off, L * m.lon_scale + m.lon_off, H * m.alt_scale + m.alt_off
    r, c = m.project(lat, lon, alt)
    la, lo = m.localize(r, c, alt)
    r2, c2 = m.project(la, lo, alt)
    assert np.max(np.abs(r2 - r) / m.line_scale) < 1e-6
    assert np.max(np.abs(c2 - c) / m.samp_scale) < 1e-6


def test_rpc_text_roundtrip(tmp_path):
    m = random_cubic_rpc(3)
    m.save(tmp_path / "m.txt")
    m2 = RpcModel.load(tmp_path / "m.txt")
    assert np.array_equal(m.line_num, m2.line_num) and m.alt_scale == m2.alt_scale


def test_rpc_text_missing_key():
    with pytest.raises(ValueError):
        RpcModel.from_text("LINE_OFF: 1.0\n")


def test_rpc_validation():
    with pytest.raises(ValueError):
        RpcModel(np.zeros(20), np.zeros(20), np.zeros(20), np.eye(20)[0])
    with pytest.raises(ValueError):
        affine_rpc(np.array([0, 0, 1.0]), 8, 8)


def test_nadir_ray_points_down():
    ray = build_ray(affine_rpc(np.array([0, 0, -1.0]), 16, 16), (3.0, 9.0), -0.1, 0.5)
    assert np.allclose(ray.direction, [0, 0, -1])
    assert ray.t_far > ray.t_near


def test_bin_centers():
    ray = build_ray(affine_rpc(np.array([0, 0, -1.0]), 4, 4), (0.0, 0.0), 0.0, 1.0)
    s = sample_rays(ray.origin[None], ray.direction[None], [0.0], [1.0], 2)
    assert np.allclose(s.t, [[0.25, 0.75]]) and np.allclose(s.deltas, [[0.25, 0.5]])


def test_jitter_stays_in_bins_and_is_seeded():
    o, d = np.zeros((3, 3)), np.tile([0, 0, -1.0], (3, 1))
    a = sample_rays(o, d, np.zeros(3), np.ones(3), 8, jitter=True, rng=np.random.default_rng(5))
    b = sample_rays(o, d, np.zeros(3), np.ones(3), 8, jitter=True, rng=np.random.default_rng(5))
    assert np.array_equal(a.t, b.t)
    k = np.floor(a.t * 8)
    assert np.array_equal(k, np.broadcast_to(np.arange(8), (3, 8)))
    with pytest.raises(ValueError):
        sample_rays(o, d, np.zeros(3), np.ones(3), 8, jitter=True)


def test_world_normalize():
    b = SceneBounds([-1, -1, -0.1], [1, 1, 0.5])
    assert np.allclose(world_normalize(np.array([[0, 0, 0.2]]), b), 0)
    corners = np.array([[1, -1, 0.5], [-1, 1, -0.1]])
    assert np.allclose(np.abs(world_normalize(corners, b)), 1)
    x = np.random.default_rng(0).uniform(-1, 1, (5, 3))
    assert np.allclose(world_normalize(world_denormalize(x, b), b), x)
    with pytest.raises(ValueError):
        SceneBounds([0, 0, 0], [1, 1, 0])
