import filecmp

import numpy as np
import pytest

from semsat.camera import affine_rpc
from semsat.dataset import export_dataset, load_dataset, read_depth, write_depth
from semsat.synth import (BUILDINGS, GROUND, VEHICLES, SceneSpec, generate_scene, oracle_render, render_layers,
                          sun_direction)

NADIR = np.array([0.0, 0.0, -1.0])


def test_generation_is_deterministic():
    a, b = generate_scene(4, "town"), generate_scene(4, "town")
    assert np.array_equal(a.heights, b.heights) and np.array_equal(a.classes, b.classes)
    assert [[(v.row, v.col) for v in d] for d in a.vehicles] == [[(v.row, v.col) for v in d] for d in b.vehicles]


def test_flat_preset():
    s = generate_scene(0, "flat")
    assert np.all(s.heights == s.heights[0, 0]) and np.all(s.classes == GROUND)


def test_parking_lot_has_recurring_vehicle_cells():
    s = generate_scene(0, "parking_lot")
    occupied = np.mean([s.vehicle_mask(d) for d in range(s.n_dates)], axis=0)
    assert occupied.max() >= 0.5


def test_unknown_preset():
    with pytest.raises(ValueError):
        generate_scene(0, "forest")


def test_zenith_sun_on_flat_scene():
    s = generate_scene(0, "flat", grid=16)
    f = oracle_render(s, affine_rpc(NADIR, 16, 16), np.array([0, 0, 1.0]), 0, 16, 16)
    view = render_layers(s, affine_rpc(NADIR, 16, 16), np.array([0, 0, 1.0]), 0, 16, 16)
    assert view.lit.all()
    assert np.allclose(f.image, view.albedo)


def test_shadow_length_matches_box_height():
    g, h = 40, 0.2
    heights = np.zeros((g, g))
    classes = np.zeros((g, g), int)
    heights[18:22, 18:22] = h
    classes[18:22, 18:22] = BUILDINGS
    s = SceneSpec(g, heights, classes, np.full((g, g, 3), 0.5), [[]])
    v = render_layers(s, affine_rpc(NADIR, g, g), sun_direction(45.0, 90.0), 0, g, g)
    shadow = ~v.lit[18:22]
    widths = shadow.sum(axis=1)
    assert np.all(widths == round(h / s.cell))
    # the band sits on the side away from the sun (west for an eastern sun)
    assert np.all(shadow[:, :18].sum(axis=1) == widths)


def test_nadir_labels_match_class_map():
    s = generate_scene(1, "parking_lot", grid=24)
    v = render_layers(s, affine_rpc(NADIR, 24, 24), np.array([0, 0, 1.0]), 2, 24, 24)
    assert np.array_equal(v.labels, s.layers(2)[1])
    assert (v.labels == VEHICLES).any()


def test_scene_validation():
    g = 4
    with pytest.raises(ValueError):
        SceneSpec(g, np.full((g, g), 0.9), np.zeros((g, g), int), np.zeros((g, g, 3)), [[]])


def test_export_split_and_determinism(tmp_path):
    a = export_dataset(generate_scene(7, "parking_lot", grid=24), 10, tmp_path / "a", size=12)
    export_dataset(generate_scene(7, "parking_lot", grid=24), 10, tmp_path / "b", size=12)
    assert len(a.train_names) == 8 and len(a.test_names) == 2
    assert not set(a.train_names) & set(a.test_names)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only
    for sub in ("rgb", "labels", "depth", "rpc", "masks"):
        assert not filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub).diff_files


def test_load_roundtrip(tmp_path):
    a = export_dataset(generate_scene(2, "town", grid=24), 4, tmp_path / "d", size=12)
    b = load_dataset(tmp_path / "d")
    for name, f in a.frames.items():
        g = b.frames[name]
        assert np.array_equal(f.labels, g.labels)
        assert np.abs(f.image - g.image).max() <= 0.5 / 255 + 1e-9
        assert np.array_equal(f.transient_mask, g.transient_mask)
        assert f.embed_index == g.embed_index
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_depth_file_roundtrip(tmp_path):
    d = np.array([[1, 2, 0.25], [3, 4, -0.5]])
    write_depth(tmp_path / "d.bin", d)
    assert np.array_equal(read_depth(tmp_path / "d.bin"), d)
