import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffjord.odesolve import (
    DORMAND_PRINCE,
    ButcherTableau,
    MaxStepsExceededError,
    NonFiniteDynamicsError,
    StepController,
    StepSizeUnderflowError,
    integrate,
    integrate_fixed_rk4,
)


def test_tableau_consistency():
    tab = DORMAND_PRINCE
    np.testing.assert_allclose(tab.a.sum(axis=1), tab.c, atol=1e-15)
    assert tab.b.sum() == pytest.approx(1.0, abs=1e-15)
    assert tab.b_hat.sum() == pytest.approx(1.0, abs=1e-15)
    # fifth-order quadrature conditions on b
    for k in range(5):
        assert np.dot(tab.b, tab.c**k) == pytest.approx(1.0 / (k + 1), abs=1e-14)


def test_tableau_rejects_implicit_coupling():
    a = np.eye(2)
    with pytest.raises(ValueError):
        ButcherTableau(c=np.zeros(2), a=a, b=np.ones(2) / 2, b_hat=np.ones(2) / 2)


def test_exponential_growth_terminal_error_near_tolerance():
    for tol in (1e-4, 1e-6, 1e-8):
        res = integrate(lambda y, t: y, np.array([1.0]), 0.0, 1.0, StepController.with_tol(tol))
        err = abs(res.y[0] - np.e)
        assert err <= 100 * tol * np.e


def test_nfe_is_seven_per_attempt():
    res = integrate(lambda y, t: -2 * y + np.sin(t), np.ones(3), 0.0, 2.0, StepController.with_tol(1e-7))
    assert res.nfe == 7 * (res.accepted + res.rejected)


@pytest.mark.parametrize("dim", [1, 2, 8, 64, 500])
def test_zero_dynamics_cost_is_dimension_free(dim):
    res = integrate(lambda y, t: np.zeros_like(y), np.ones(dim), 0.0, 1.0)
    assert res.nfe == 21
    np.testing.assert_array_equal(res.y, np.ones(dim))


def test_backward_in_time_inverts_forward():
    f = lambda y, t: np.array([y[1], -y[0]]) * (1 + 0.1 * t)
    ctrl = StepController.with_tol(1e-10)
    y1 = integrate(f, np.array([1.0, 0.0]), 0.0, 1.5, ctrl).y
    y0 = integrate(f, y1, 1.5, 0.0, ctrl).y
    np.testing.assert_allclose(y0, [1.0, 0.0], atol=1e-8)


def test_rk4_global_order_four():
    errs = []
    for n in (10, 20, 40, 80):
        y = integrate_fixed_rk4(lambda y, t: y, np.array([1.0]), 0.0, 1.0, n).y[0]
        errs.append(abs(y - np.e))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios >= 12) & (ratios <= 20))


def test_rk4_nfe_and_validation():
    res = integrate_fixed_rk4(lambda y, t: y, [1.0], 0.0, 1.0, 7)
    assert res.nfe == 28
    with pytest.raises(ValueError):
        integrate_fixed_rk4(lambda y, t: y, [1.0], 0.0, 1.0, 0)


def test_stiff_problem_underflows():
    with pytest.raises(StepSizeUnderflowError):
        # explicit stability needs h below ~3e-15, under the underflow floor
        integrate(lambda y, t: -1e15 * (y - np.cos(t)), np.ones(1), 0.0, 1.0)


def test_non_finite_dynamics_raise():
    with pytest.raises(NonFiniteDynamicsError):
        integrate(lambda y, t: np.full_like(y, np.nan), np.ones(2), 0.0, 1.0)


def test_max_steps():
    ctrl = StepController(atol=1e-12, rtol=1e-12, max_steps=5)
    with pytest.raises(MaxStepsExceededError):
        integrate(lambda y, t: np.cos(20 * t) * y, np.ones(1), 0.0, 3.0, ctrl)


def test_controller_validation():
    with pytest.raises(ValueError):
        StepController(atol=0.0)
    with pytest.raises(ValueError):
        StepController(min_factor=2.0)
    with pytest.raises(ValueError):
        integrate(lambda y, t: y, np.ones(1), 1.0, 1.0)


@given(
    lam=st.floats(-3.0, 1.0),
    y0=st.floats(-5.0, 5.0).filter(lambda v: abs(v) > 1e-3),
    t1=st.floats(0.1, 2.0),
)
@settings(max_examples=40, deadline=None)
def test_linear_scalar_matches_closed_form(lam, y0, t1):
    tol = 1e-8
    res = integrate(lambda y, t: lam * y, np.array([y0]), 0.0, t1, StepController.with_tol(tol))
    exact = y0 * np.exp(lam * t1)
    assert abs(res.y[0] - exact) <= 100 * tol * max(1.0, abs(exact))
