import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semsat.dataset import load_dataset
from semsat.evaluation import (PSNR_INF, CorruptionConfig, EvaluationError, changed_regions, corrupt_dataset,
                               corrupt_labels, evaluate_semantics, fuse_labels, psnr, semantic_accuracy,
                               transient_rays, transient_uncertainty)
from semsat.field import FieldConfig, init_params
from semsat.synth import generate_scene, render_frames
from semsat.trainer import render_table

SMALL = FieldConfig.desk(backbone_width=16, semantic_hidden=8, head_hidden=8, pe_levels_position=3)


def forced(n_embed, sigma_bias, beta_bias):
    p = init_params(SMALL, n_embed, seed=0, dtype=np.float64)
    p["sigma.w"].data[:] = 0
    p["sigma.b"].data[:] = sigma_bias
    p["beta1.w"].data[:] = 0
    p["beta1.b"].data[:] = beta_bias
    return p


def test_semantic_accuracy_examples():
    gt = np.arange(16).reshape(4, 4) % 5
    assert semantic_accuracy(gt, gt) == 1.0
    half = gt.copy()
    half[:2] = (half[:2] + 1) % 5
    assert semantic_accuracy(half, gt) == 0.5
    assert semantic_accuracy(half, gt, ignore=np.arange(16).reshape(4, 4) < 8) == 1.0
    with pytest.raises(EvaluationError):
        semantic_accuracy(gt, gt, ignore=np.ones((4, 4), bool))
    with pytest.raises(ValueError):
        semantic_accuracy(gt[:2], gt)


def test_psnr_examples():
    a = np.full((4, 4, 3), 0.5)
    assert psnr(a, a) == PSNR_INF
    assert np.isclose(psnr(a + 0.1, a), 20.0)
    e = np.random.default_rng(0).normal(size=a.shape) * 0.05
    assert np.isclose(psnr(a + e / math.sqrt(2), a) - psnr(a + e, a), 10 * math.log10(2))
    assert np.isclose(10 * math.log10(2), 3.0103, atol=1e-4)


def test_transient_uncertainty_saturated_and_zero(parking_data):
    ds = load_dataset(parking_data)
    inv_softplus_one = math.log(math.e - 1)
    assert np.isclose(transient_uncertainty(forced(len(ds.train_names), 10.0, inv_softplus_one), ds, 16), 1.0)
    assert transient_uncertainty(forced(len(ds.train_names), 10.0, -60.0), ds, 16) < 1e-20


def test_transient_uncertainty_two_rays(parking_data):
    ds = load_dataset(parking_data)
    table = transient_rays(ds).subset(np.array([0, 1]))
    p = forced(len(ds.train_names), -3.0, 0.5)
    r = render_table(p, table, ds.bounds, 16)
    sigma = SMALL.density_scale * math.log1p(math.exp(-3.0))
    b = math.log1p(math.exp(0.5))
    length = table.t_far * 15.5 / 16  # bin-center sampling covers the ray up to the last center
    want = b * (1 - np.exp(-sigma * length))
    assert np.allclose(r.beta, want, rtol=1e-10)


def test_transient_uncertainty_needs_vehicles(tmp_path):
    from semsat.dataset import export_dataset
    export_dataset(generate_scene(0, "flat", grid=16), 3, tmp_path / "f", size=8)
    with pytest.raises(EvaluationError):
        transient_uncertainty(forced(2, 0.0, 0.0), load_dataset(tmp_path / "f"), 8)


@pytest.fixture(scope="module")
def frames():
    fr, _, _ = render_frames(generate_scene(0, "town"), 3, size=48)
    return fr


def test_corruption_zero_loss_is_identity(frames):
    lab = frames[0].labels
    assert np.array_equal(corrupt_labels(lab, CorruptionConfig(0.0)), lab)


@pytest.mark.parametrize("loss", [0.1, 0.2, 0.3])
def test_corruption_hits_target(frames, loss):
    for f in frames:
        out = corrupt_labels(f.labels, CorruptionConfig(loss, seed=5))
        assert abs(semantic_accuracy(out, f.labels) - (1 - loss)) <= 0.01
        changed = out != f.labels
        assert np.all(out[changed] == (f.labels[changed] + 1) % 5)


def test_corruption_is_coherent_and_seeded(frames):
    lab = frames[1].labels
    a = corrupt_labels(lab, CorruptionConfig(0.2, seed=3))
    assert np.array_equal(a, corrupt_labels(lab, CorruptionConfig(0.2, seed=3)))
    assert not np.array_equal(a, corrupt_labels(lab, CorruptionConfig(0.2, seed=4)))
    assert changed_regions(lab, a).mean() >= 10


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 0.6), st.integers(0, 10_000))
def test_corruption_class_counts_exact(loss, seed):
    lab = np.random.default_rng(seed).integers(0, 5, (24, 24))
    out = corrupt_labels(lab, CorruptionConfig(loss, seed=seed))
    for c in range(5):
        n = int((lab == c).sum())
        assert int(((lab == c) & (out != lab)).sum()) == int(round(loss * n))


def test_corruption_config_validation():
    with pytest.raises(ValueError):
        CorruptionConfig(1.0)
    with pytest.raises(ValueError):
        CorruptionConfig(0.2, rescale=0)


def test_corrupt_dataset_keeps_masks_and_test_split(tiny_data, tmp_path):
    clean = load_dataset(tiny_data)
    corrupt_dataset(tiny_data, tmp_path / "c", CorruptionConfig(0.2))
    bad = load_dataset(tmp_path / "c")
    for name in clean.test_names:
        assert np.array_equal(bad.frames[name].labels, clean.frames[name].labels)
    for name in clean.train_names:
        assert np.array_equal(bad.frames[name].transient_mask, clean.frames[name].transient_mask)
        assert abs(semantic_accuracy(bad.frames[name].labels, clean.frames[name].labels) - 0.8) <= 0.01


def test_fuse_untrained_is_near_chance(tiny_data, tmp_path):
    clean = load_dataset(tiny_data)
    corrupt_dataset(tiny_data, tmp_path / "c", CorruptionConfig(0.2))
    rep = fuse_labels(init_params(SMALL, len(clean.train_names), seed=1), load_dataset(tmp_path / "c"), clean, 8)
    assert abs(rep.corrupted.mean - 0.8) <= 0.01
    assert rep.fused.mean < 0.6
    assert np.isclose(rep.delta, rep.fused.mean - rep.corrupted.mean)


def test_evaluate_semantics_target(tiny_data):
    ds = load_dataset(tiny_data)
    with pytest.raises(ValueError):
        evaluate_semantics(init_params(SMALL, 4), ds, "test", target="live")
