import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffjord import cnf, models
from ffjord.cli import relative_error
from ffjord.odesolve import StepController

TIGHT = StepController.with_tol(1e-10)


def decay_model(dim, n_flows=1):
    return cnf.CNFModel([models.linear_net(-np.eye(dim)) for _ in range(n_flows)],
                        trace=cnf.TraceEstimatorSpec("exact"), controller=TIGHT)


def small_model(seed=0, dim=2, hidden=(8,), n_flows=1):
    spec = models.NetSpec(dim, hidden, init=models.InitSpec(zero_final=False))
    return cnf.CNFModel([models.init(spec, seed + k) for k in range(n_flows)],
                        trace=cnf.TraceEstimatorSpec("hutchinson", "gaussian"),
                        controller=StepController.with_tol(1e-8))


@given(dim=st.integers(1, 5), seed=st.integers(0, 1000))
@settings(max_examples=15, deadline=None)
def test_linear_decay_closed_form(dim, seed):
    x = np.random.default_rng(seed).normal(size=(4, dim))
    res = cnf.density_forward(decay_model(dim), x)
    np.testing.assert_allclose(res.z0, x * np.e, rtol=1e-8)
    np.testing.assert_allclose(res.delta_logp, -dim, atol=1e-8)
    np.testing.assert_allclose(res.logp, cnf.base_log_density(x * np.e) + dim, atol=1e-7)


def test_stacked_flows_compose():
    x = np.array([[0.3, -0.2], [1.0, 0.5]])
    res = cnf.density_forward(decay_model(2, n_flows=2), x)
    np.testing.assert_allclose(res.z0, x * np.e**2, rtol=1e-8)
    np.testing.assert_allclose(res.logp, cnf.base_log_density(x * np.e**2) + 4, atol=1e-7)
    assert len(res.boundaries) == 3
    np.testing.assert_array_equal(res.boundaries[-1], x)


def test_sampling_inverts_density_solve():
    model = small_model(seed=3, n_flows=2)
    model.controller = TIGHT
    z0 = np.random.default_rng(0).normal(size=(6, 2))
    x, nfe = cnf.push_forward(model, z0)
    assert nfe > 0
    back = cnf.density_forward(model, x, rng=0)
    np.testing.assert_allclose(back.z0, z0, atol=1e-7)


def test_sample_zero_and_determinism():
    model = small_model()
    assert cnf.sample(model, 0).shape == (0, 2)
    np.testing.assert_array_equal(cnf.sample(model, 5, 7), cnf.sample(model, 5, 7))


def test_noise_is_fixed_within_a_solve_and_seeded():
    model = small_model(seed=1)
    x = np.random.default_rng(1).normal(size=(5, 2))
    a = cnf.log_density(model, x, rng=11)
    b = cnf.log_density(model, x, rng=11)
    c = cnf.log_density(model, x, rng=12)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_hutchinson_density_is_unbiased_for_exact():
    model = small_model(seed=2)
    x = np.tile(np.array([[0.4, -0.7]]), (4000, 1))
    exact = cnf.log_density(model, x[:1], trace="exact")[0]
    est = cnf.log_density(model, x, rng=0, trace="hutchinson")
    assert abs(est.mean() - exact) < 4 * est.std(ddof=1) / math.sqrt(len(est)) + 1e-9


def test_augmented_state_algebra():
    s = cnf.AugmentedState(np.ones((2, 3)), np.zeros(2))
    t = s + s * 2.0
    np.testing.assert_array_equal(t.z, 3 * np.ones((2, 3)))
    y = t.pack()
    u = cnf.AugmentedState.unpack(y, 2, 3)
    np.testing.assert_array_equal(u.z, t.z)


def test_bottleneck_cyclic_trace_on_linear_composition():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(2, 10)), rng.normal(size=(10, 2))
    net = models.LinearBottleneckNet(A, B)
    z = rng.normal(size=(3, 10))
    eps = rng.normal(size=(3, 2))
    np.testing.assert_allclose(cnf.exact_trace(net, z, 0.0), np.trace(B @ A), atol=1e-10)
    est = cnf.bottleneck_trace(net, z, 0.0, eps)
    np.testing.assert_allclose(est, np.einsum("bi,ij,bj->b", eps, A @ B, eps), atol=1e-10)


def test_bottleneck_warns_when_not_narrower():
    rng = np.random.default_rng(0)
    net = models.LinearBottleneckNet(rng.normal(size=(4, 3)), rng.normal(size=(3, 4)))
    with pytest.warns(UserWarning):
        cnf.bottleneck_trace(net, np.ones((1, 3)), 0.0, np.ones((1, 4)))


def test_trace_spec_validation():
    with pytest.raises(ValueError):
        cnf.TraceEstimatorSpec("hutch")
    with pytest.raises(ValueError):
        cnf.TraceEstimatorSpec("hutchinson", noise="uniform")


def test_adjoint_matches_unrolled_on_small_problem():
    model = small_model(seed=4)
    x = np.random.default_rng(4).normal(size=(3, 2))
    eps = np.random.default_rng(5).normal(size=(3, 2))
    trace = cnf.TraceEstimatorSpec("hutchinson", "gaussian", epsilon=eps)
    adj = cnf.adjoint_gradients(model, x, trace=trace, controller=StepController.with_tol(1e-9))
    unr = cnf.unrolled_gradients(model, x, 200, trace=trace)
    assert relative_error(adj.flat(), unr.flat()) < 1e-6
    assert adj.loss == pytest.approx(unr.loss, rel=1e-7)


def test_adjoint_exact_trace_and_multiple_flows():
    model = small_model(seed=6, n_flows=2)
    x = np.random.default_rng(6).normal(size=(3, 2))
    adj = cnf.adjoint_gradients(model, x, trace="exact", controller=StepController.with_tol(1e-9))
    unr = cnf.unrolled_gradients(model, x, 200, trace="exact")
    assert relative_error(adj.flat(), unr.flat()) < 1e-6
    assert len(adj.grads) == len(model.params.names())


def test_corrupted_trace_sign_is_detectable():
    model = small_model(seed=4)
    x = np.random.default_rng(4).normal(size=(3, 2))
    good = cnf.adjoint_gradients(model, x, rng=0).flat()
    bad = cnf.adjoint_gradients(model, x, rng=0, trace_sign=-1.0).flat()
    assert relative_error(bad, good) > 1e-2


def test_density_grid_identity_flow_matches_gaussian_box_mass():
    net = models.init(models.NetSpec(2, (4,)), seed=0)
    model = cnf.CNFModel([net], trace=cnf.TraceEstimatorSpec("exact"))
    grid = cnf.density_grid(model, (-4, 4, -4, 4), 200)
    box = math.erf(4 / math.sqrt(2)) ** 2
    assert abs(grid.mass - box) < 1e-3
    one = cnf.density_grid(model, (-1, 1, -1, 1), 1)
    assert one.mass == pytest.approx(4 * math.exp(cnf.base_log_density(np.zeros((1, 2)))[0]))


def test_density_grid_rejects_non_2d():
    with pytest.raises(ValueError):
        cnf.density_grid(decay_model(3), resolution=4)


def test_bad_input_shape():
    with pytest.raises(ValueError):
        cnf.log_density(decay_model(2), np.ones((3, 3)))


def test_no_warning_on_plain_density():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cnf.log_density(small_model(), np.ones((2, 2)), rng=0)
