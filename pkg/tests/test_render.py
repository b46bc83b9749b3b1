import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from semsat.render import (compositing_weights, render_color, render_scalar, render_semantic, semantic_shaded_viz,
                           shade_sample)


def test_empty_space():
    w = compositing_weights(np.zeros(4), np.full(4, 0.1))
    assert np.all(w.alphas.data == 0) and np.all(w.weights.data == 0) and w.opacity == 0


def test_single_sample_half_alpha():
    w = compositing_weights(np.array([np.log(2.0)]), np.array([1.0]))
    assert np.isclose(w.alphas.data[0], 0.5)


def test_two_half_alphas():
    w = compositing_weights(np.full(2, np.log(2.0)), np.ones(2))
    assert np.allclose(w.transmittance.data, [1, 0.5])
    assert np.allclose(w.weights.data, [0.5, 0.25])
    assert np.isclose(w.opacity, 0.75)


def test_occlusion():
    w = compositing_weights(np.array([1e6, 3.0, 5.0]), np.full(3, 0.1))
    assert w.weights.data[0] > 1 - 1e-6 and np.all(w.weights.data[1:] < 1e-6)


def test_compositing_rejects_bad_input():
    with pytest.raises(ValueError):
        compositing_weights(np.array([-1.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        compositing_weights(np.ones(2), np.ones(3))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 32), elements=st.floats(0, 50)), st.floats(0.001, 0.5))
def test_weights_sum_to_opacity(sig, delta):
    w = compositing_weights(sig, np.full(sig.shape, delta))
    assert np.isclose(w.weights.data.sum(), 1 - np.prod(1 - w.alphas.data), atol=1e-12)
    assert np.all(np.diff(w.transmittance.data) <= 1e-15)
    assert np.all(w.weights.data >= 0) and w.weights.data.sum() <= 1 + 1e-12


def test_shade_sample_examples():
    c = np.array([0.3, 0.6, 0.9])
    assert np.allclose(shade_sample(c, 1.0, np.array([0.2, 0.2, 0.2])), c)
    assert np.allclose(shade_sample(c, 0.0, np.zeros(3)), 0)
    assert np.allclose(shade_sample(np.ones(3), 0.5, np.full(3, 0.4)), 0.7)


def test_render_color_examples():
    alb = np.array([[0.1, 0.2, 0.3], [0.9, 0.9, 0.9]])
    out = render_color(np.array([1.0, 0.0]), alb, np.ones(2), np.full((1, 3), 0.5))
    assert np.allclose(out.data, alb[0])
    assert np.allclose(render_color(np.zeros(2), alb, np.ones(2), np.zeros((1, 3))).data, 0)


def test_render_semantic_examples():
    probs, cls = render_semantic(np.array([1.0]), np.array([[0.9, 0.1, 0.1, 0.1, 0.1]]))
    assert cls == 0
    probs, cls = render_semantic(np.array([0.3, 0.2]), np.full((2, 5), 0.7))
    assert np.allclose(probs.data, 0.2) and cls == 0
    s = np.array([[2.0, -1.0], [0.0, 3.0]])
    agg = 0.5 * s[0] + 0.25 * s[1]
    want = np.exp(agg) / np.exp(agg).sum()
    probs, cls = render_semantic(np.array([0.5, 0.25]), s)
    assert np.allclose(probs.data, want) and cls == np.argmax(want)


def test_render_scalar_examples():
    w = compositing_weights(np.array([1e6, 1.0]), np.ones(2))
    assert np.isclose(render_scalar(w, np.ones(2)).data, 1.0)
    assert render_scalar(w, np.zeros(2)).data == 0


def test_semantic_shaded_viz():
    cmap = np.array([[0.2, 0.8, 0.2], [1.0, 0.0, 0.0]])
    assert np.allclose(semantic_shaded_viz(np.array([0]), np.array([1.0]), cmap), cmap[0])
    assert np.allclose(semantic_shaded_viz(np.array([1]), np.array([0.0]), cmap), 0)
    assert np.allclose(semantic_shaded_viz(np.array([0]), np.array([0.5]), cmap), [[0.1, 0.4, 0.1]])
    with pytest.raises(IndexError):
        semantic_shaded_viz(np.array([2]), np.array([1.0]), cmap)
