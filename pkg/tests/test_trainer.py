import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_config
from semsat.dataset import load_dataset
from semsat.field import init_params
from semsat.render import semantic_shaded_viz
from semsat.synth import COLORMAP
from semsat.trainer import (MODALITIES, Checkpoint, RaySampler, TrainConfig, build_ray_table, lr_at, make_batch,
                            render_view, train)


def test_lr_schedule():
    assert lr_at(1) == 5e-4
    assert np.isclose(lr_at(2), 4.5e-4)
    assert np.isclose(lr_at(11), 1.743e-4, rtol=1e-3)
    with pytest.raises(ValueError):
        lr_at(0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 500), st.integers(1, 64), st.integers(0, 99))
def test_sampler_epoch_is_permutation(n, b, seed):
    s = RaySampler(n, b, seed)
    ipe = s.iterations_per_epoch
    for epoch in (1, 2):
        seen = np.concatenate([s.indices(i) for i in range((epoch - 1) * ipe, epoch * ipe)])
        assert np.array_equal(np.sort(seen), np.arange(n))
    t = RaySampler(n, b, seed)
    assert all(np.array_equal(s.indices(i), t.indices(i)) for i in range(2 * ipe))


def test_batches_are_train_rays(tiny_ds):
    table = build_ray_table(tiny_ds, "train")
    batch = make_batch(RaySampler(len(table), 50, 0), table, 3)
    train_frames = set(range(len(tiny_ds.train_names)))
    assert set(np.unique(batch.frame)) <= train_frames
    assert len(table) == len(tiny_ds.train_names) * 16 * 16


def test_config_roundtrip_and_unknown_keys():
    cfg = TrainConfig.desk(seed=3)
    again = TrainConfig.from_dict(json.loads(cfg.canonical_json()))
    assert again == cfg and again.hash() == cfg.hash()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"iters": 3})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"field": {"width": 3}})
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=1.5)


def test_zero_iterations_is_initialization(tiny_ds, tmp_path):
    cfg = tiny_config(iterations=0)
    res = train(tiny_ds, cfg, tmp_path, evaluate=False)
    init = init_params(cfg.field, len(tiny_ds.train_names), seed=cfg.seed)
    ck = Checkpoint.load(tmp_path / "checkpoint.ssck")
    for k, v in init.arrays().items():
        assert np.array_equal(ck.params.arrays()[k], v)
    assert ck.iteration == 0 and res.records == []


def test_checkpoint_roundtrip_and_corruption(tiny_ds, tmp_path):
    res = train(tiny_ds, tiny_config(iterations=3), tmp_path, evaluate=False)
    ck = Checkpoint.load(tmp_path / "checkpoint.ssck")
    assert ck.iteration == 3 and ck.adam.step_count == 3
    for k, v in res.checkpoint.params.arrays().items():
        assert np.array_equal(ck.params.arrays()[k], v)
    raw = bytearray((tmp_path / "checkpoint.ssck").read_bytes())
    raw[10] ^= 0xFF
    (tmp_path / "bad.ssck").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "bad.ssck")


def test_resume_is_bitwise_identical(tiny_ds, tmp_path):
    cfg = tiny_config()
    full = train(tiny_ds, cfg, tmp_path / "full", evaluate=False)
    train(tiny_ds, cfg, tmp_path / "part", stop_at=7, evaluate=False)
    resumed = train(tiny_ds, cfg, tmp_path / "part", resume=tmp_path / "part" / "checkpoint.ssck", evaluate=False)
    for k, v in full.checkpoint.params.arrays().items():
        assert np.array_equal(resumed.checkpoint.params.arrays()[k], v)
    assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == (tmp_path / "part" / "metrics.jsonl").read_bytes()
    with pytest.raises(ValueError):
        train(tiny_ds, tiny_config(seed=9), tmp_path / "part", resume=tmp_path / "part" / "checkpoint.ssck")


def test_metrics_log_fields(tiny_ds, tmp_path):
    train(tiny_ds, tiny_config(iterations=6), tmp_path, evaluate=False)
    recs = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in recs] == list(range(6))
    assert {"epoch", "lr", "total", "semantic", "w_semantic", "color_l2"} <= set(recs[0])
    assert (tmp_path / "checkpoints" / "iter_0000005.ssck").exists()
    assert Checkpoint.load(tmp_path / "checkpoints" / "iter_0000005.ssck").iteration == 5


def test_training_reduces_loss(tiny_ds):
    res = train(tiny_ds, tiny_config(iterations=40, log_every=1), evaluate=False)
    first = np.mean([r["total"] for r in res.records[:5]])
    last = np.mean([r["total"] for r in res.records[-5:]])
    assert last < first


@pytest.fixture(scope="module")
def trained(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    train(load_dataset(tiny_data), tiny_config(iterations=6), out, evaluate=False)
    return Checkpoint.load(out / "checkpoint.ssck"), load_dataset(tiny_data)


@pytest.mark.parametrize("modality", MODALITIES)
def test_render_view_deterministic(trained, modality):
    ck, ds = trained
    f = ds.frames[ds.test_names[0]]
    a = render_view(ck, f.camera, f.sun_dir, modality, 8, 8, ds.alt_range, ds.bounds)
    b = render_view(ck, f.camera, f.sun_dir, modality, 8, 8, ds.alt_range, ds.bounds)
    if modality == "semantic":
        assert a[0].dtype == np.uint8 and np.array_equal(a[0], b[0]) and a[1].shape == (8, 8, 3)
    else:
        assert np.array_equal(a, b) and np.all(np.isfinite(a))


def test_semantic_shaded_is_composition(trained):
    ck, ds = trained
    f = ds.frames[ds.train_names[0]]
    args = (f.camera, f.sun_dir)
    kw = dict(height=8, width=8, alt_range=ds.alt_range, bounds=ds.bounds)
    labels, _ = render_view(ck, *args, "semantic", **kw)
    sun = render_view(ck, *args, "sun", **kw)
    shaded = render_view(ck, *args, "semantic_shaded", **kw)
    assert np.allclose(shaded, semantic_shaded_viz(labels, sun, COLORMAP))


def test_render_view_rejects_unknown(trained):
    ck, ds = trained
    f = ds.frames[ds.train_names[0]]
    with pytest.raises(ValueError):
        render_view(ck, f.camera, f.sun_dir, "normals", 4, 4, ds.alt_range, ds.bounds)
    with pytest.raises(IndexError):
        render_view(ck, f.camera, f.sun_dir, "rgb", 4, 4, ds.alt_range, ds.bounds, embed_index=99)
