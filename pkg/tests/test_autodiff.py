import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ffjord import autodiff as ad


def fd_grad(fn, x, h=1e-6):
    """Central differences of a scalar function of an array."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def scalar(fn):
    def wrapped(x):
        with ad.no_grad():
            return fn(ad.tensor(x)).sum().item()
    return wrapped


finite = st.floats(-2.0, 2.0, allow_nan=False)
small_mats = hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite)

UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "exp": ad.exp,
    "square": lambda x: x * x,
    "neg_shift": lambda x: 3.0 - x * 2.0,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=small_mats)
@settings(max_examples=25)
def test_unary_gradients_match_finite_differences(name, x):
    fn = UNARY[name]
    xt = ad.tensor(x, requires_grad=True)
    (g,) = ad.grad(fn(xt).sum(), [xt])
    np.testing.assert_allclose(g, fd_grad(scalar(fn), x), rtol=1e-6, atol=1e-7)


def test_log_gradient():
    x = np.array([[0.5, 1.0, 3.0]])
    xt = ad.tensor(x, requires_grad=True)
    (g,) = ad.grad(ad.log(xt).sum(), [xt])
    np.testing.assert_allclose(g, 1 / x)


@given(
    a=hnp.arrays(np.float64, (3, 4), elements=finite),
    b=hnp.arrays(np.float64, (4, 2), elements=finite),
)
@settings(max_examples=25)
def test_matmul_gradients(a, b):
    at = ad.tensor(a, requires_grad=True)
    bt = ad.tensor(b, requires_grad=True)
    ga, gb = ad.grad((at @ bt).sum(), [at, bt])
    np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.T)
    np.testing.assert_allclose(gb, a.T @ np.ones((3, 2)))


@given(
    h=hnp.arrays(np.float64, (5, 3), elements=finite),
    W=hnp.arrays(np.float64, (4, 2), elements=finite),
    b=hnp.arrays(np.float64, (2,), elements=finite),
    t=st.floats(0, 1),
)
@settings(max_examples=25)
def test_time_affine_equals_concatenation(h, W, b, t):
    fused = ad.time_affine(ad.tensor(h), ad.tensor(W), ad.tensor(b), t).data
    hc = np.concatenate([h, np.full((5, 1), t)], axis=1)
    np.testing.assert_allclose(fused, hc @ W + b, atol=1e-12)


def test_time_affine_gradients_match_concatenation():
    rng = np.random.default_rng(0)
    h, W, b = rng.normal(size=(5, 3)), rng.normal(size=(4, 2)), rng.normal(size=2)
    ht, Wt, bt = (ad.tensor(v, requires_grad=True) for v in (h, W, b))
    g1 = ad.grad(ad.time_affine(ht, Wt, bt, 0.3).sum(), [ht, Wt, bt])
    tc = ad.tensor(np.full((5, 1), 0.3))
    g2 = ad.grad((ad.concat([ht, tc], axis=1) @ Wt + bt).sum(), [ht, Wt, bt])
    for x, y in zip(g1, g2):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_second_order_matches_analytic():
    # d/dx sum(d/dx sum tanh(x) * w) = -2 tanh(x) (1 - tanh^2 x) w
    x = np.array([[0.3, -1.2], [0.7, 2.0]])
    w = np.array([[1.0, 2.0], [0.5, -1.0]])
    xt = ad.tensor(x, requires_grad=True)
    y = ad.tanh(xt)
    dy = ad.vjp(y, xt, w, create_graph=True)
    assert isinstance(dy, ad.Tensor)
    (g2,) = ad.grad(dy.sum(), [xt])
    th = np.tanh(x)
    np.testing.assert_allclose(g2, -2 * th * (1 - th**2) * w, rtol=1e-12)


def test_softplus_second_order():
    x = np.array([[0.3, -1.2, 4.0]])
    xt = ad.tensor(x, requires_grad=True)
    dy = ad.vjp(ad.softplus(xt), xt, np.ones_like(x), create_graph=True)
    (g2,) = ad.grad(dy.sum(), [xt])
    s = 1 / (1 + np.exp(-x))
    np.testing.assert_allclose(g2, s * (1 - s), rtol=1e-12)


def test_third_order_is_rejected():
    xt = ad.tensor(np.ones((2, 2)), requires_grad=True)
    dy = ad.vjp(ad.tanh(xt), xt, np.ones((2, 2)), create_graph=True)
    with pytest.raises(ad.SecondOrderError):
        ad.vjp(dy, xt, np.ones((2, 2)), create_graph=True)


def test_unused_input_raises_unless_allowed():
    a = ad.tensor(np.ones(3), requires_grad=True)
    b = ad.tensor(np.ones(3), requires_grad=True)
    out = a * 2.0
    with pytest.raises(ad.GraphError):
        ad.vjp(out, [a, b], np.ones(3))
    ga, gb = ad.vjp(out, [a, b], np.ones(3), allow_unused=True)
    assert gb is None
    np.testing.assert_array_equal(ga, 2 * np.ones(3))


def test_grad_fills_unused_with_zeros_and_rejects_non_scalar():
    a = ad.tensor(np.ones(3), requires_grad=True)
    b = ad.tensor(np.ones((2, 2)), requires_grad=True)
    ga, gb = ad.grad((a * a).sum(), [a, b])
    np.testing.assert_array_equal(gb, np.zeros((2, 2)))
    np.testing.assert_array_equal(ga, 2 * np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.grad(a * a, [a])


def test_shape_mismatch_and_non_finite():
    with pytest.raises(ad.ShapeError):
        ad.tensor(np.ones((2, 3))) + ad.tensor(np.ones((3, 2)))
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.tensor(np.array([-1.0])))
    a = ad.tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.vjp(a * 1.0, a, np.ones(3))


def test_no_grad_stops_recording():
    a = ad.tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.tanh(a) * 2.0
    assert not out.requires_grad
    assert len(ad.Graph.trace(out)) == 0


def test_gradient_accumulates_over_fan_out():
    a = ad.tensor(np.array([1.5, -0.5]), requires_grad=True)
    out = a * a + a * 3.0 + ad.tanh(a)
    (g,) = ad.grad(out.sum(), [a])
    np.testing.assert_allclose(g, 2 * a.data + 3 + 1 - np.tanh(a.data) ** 2)


@given(
    shapes=st.lists(st.tuples(st.integers(1, 3), st.integers(1, 3)), min_size=1, max_size=4),
    seed=st.integers(0, 1000),
)
@settings(max_examples=30)
def test_paramstore_flatten_roundtrip(shapes, seed):
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    for i, s in enumerate(shapes):
        store.add(f"p{i}", rng.normal(size=s))
    vec = store.flatten()
    assert vec.size == store.count == sum(int(np.prod(s)) for s in shapes)
    store.assign(vec * 2)
    np.testing.assert_array_equal(store.flatten(), vec * 2)
    for name, arr in store.unflatten(vec).items():
        assert arr.shape == store.shapes()[name]


def test_paramstore_rejects_duplicates():
    store = ad.ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        store.add("w", np.zeros(2))


def test_getitem_and_reshape_gradients():
    x = np.arange(6.0).reshape(2, 3)
    xt = ad.tensor(x, requires_grad=True)
    out = (xt[:, 1] * 2.0).sum() + xt.reshape(3, 2)[0].sum()
    (g,) = ad.grad(out, [xt])
    expect = np.zeros((2, 3))
    expect[:, 1] += 2.0
    expect[0, :2] += 1.0
    np.testing.assert_array_equal(g, expect)
