import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from semsat import autodiff as ad
from semsat.autodiff import AdamState, Graph, Tensor, adam_step


def scalar_graph(fn):
    return Graph(lambda x: fn(x))


def test_forward_examples():
    assert Graph(lambda x: x * x).forward({"x": Tensor(3.0)})["out"] == 9.0
    assert Graph(lambda x: ad.sigmoid(x)).forward({"x": Tensor(0.0)})["out"] == 0.5
    assert np.isclose(Graph(lambda x: ad.exp(x)).forward({"x": Tensor(-np.log(2.0))})["out"], 0.5)


def test_backward_examples():
    g = Graph(lambda x: x * x)
    g.forward({"x": Tensor(3.0, requires_grad=True)})
    assert g.backward()["x"] == 6.0
    g = Graph(lambda x: ad.sigmoid(x))
    g.forward({"x": Tensor(0.0, requires_grad=True)})
    assert g.backward()["x"] == 0.25


def test_backward_before_forward():
    with pytest.raises(RuntimeError):
        Graph(lambda x: x).backward()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_forward_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        Graph(lambda x: ad.log(x)).forward({"x": Tensor(-1.0)})


def test_gradient_accumulates_over_shared_leaf():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.tsum(x * x + x * 3.0)
    y.backward()
    assert np.allclose(x.grad, 2 * x.data + 3.0)


def test_detach_blocks_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.tsum(x * x.detach())
    y.backward()
    assert np.allclose(x.grad, [2.0])


def test_broadcast_gradient_reduces():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    ad.tsum(a * b).backward()
    assert np.allclose(b.grad, [4, 4, 4])
    assert np.allclose(a.grad, np.broadcast_to(np.arange(3.0), (4, 3)))


def test_adam_zero_grad_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    st_ = AdamState.zeros_like(p)
    adam_step(p, {"w": np.zeros(2)}, st_, 5e-4)
    assert np.array_equal(p["w"].data, [1.0, -2.0])
    assert st_.step_count == 1


@pytest.mark.parametrize("g", [0.3, -7.0, 1e-3])
def test_adam_first_step_is_lr_times_sign(g):
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    adam_step(p, {"w": np.array([g])}, AdamState.zeros_like(p), 5e-4)
    assert np.isclose(p["w"].data[0], -5e-4 * np.sign(g), rtol=1e-4)


def test_adam_second_step_magnitude():
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    s = AdamState.zeros_like(p)
    adam_step(p, {"w": np.array([0.5])}, s, 5e-4)
    first = -p["w"].data[0]
    adam_step(p, {"w": np.array([0.5])}, s, 5e-4)
    second = -p["w"].data[0] - first
    assert 0.9 * first <= second <= 1.0 * first + 1e-15


def test_adam_rejects_nan_gradient():
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    with pytest.raises(FloatingPointError):
        adam_step(p, {"w": np.array([np.nan])}, AdamState.zeros_like(p), 1e-3)


def test_adam_rejects_bad_lr():
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.array([1.0])}, AdamState.zeros_like(p), 0.0)


finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_softplus_matches_finite_differences(a, b):
    A = Tensor(a.copy(), requires_grad=True)
    B = Tensor(b.copy(), requires_grad=True)

    w = np.array([1.0, -0.5])

    def f():
        return float(np.sum(np.logaddexp(0.0, A.data @ B.data) * w))

    out = ad.tsum(ad.softplus(A @ B) * w)
    out.backward()
    num = ad.numerical_gradient(f, A.data)
    assert np.allclose(A.grad, num, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_softmax_and_cumsum_gradients(x):
    X = Tensor(x.copy(), requires_grad=True)
    wts = np.linspace(-1, 1, 10).reshape(2, 5)
    out = ad.tsum(ad.softmax(X) * wts) + ad.tsum(ad.exp(-ad.cumsum_exclusive(ad.square(X))) * wts)
    out.backward()

    def f():
        e = np.exp(X.data - X.data.max(-1, keepdims=True))
        sm = e / e.sum(-1, keepdims=True)
        cs = np.cumsum(X.data ** 2, axis=-1) - X.data ** 2
        return float(np.sum(sm * wts) + np.sum(np.exp(-cs) * wts))

    assert np.allclose(X.grad, ad.numerical_gradient(f, X.data), atol=1e-6)
