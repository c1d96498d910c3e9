import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import frozen
from omfrac.fbm import NoiseModel, Regime, Sigma
from omfrac.grid import TimeGrid
from omfrac.om import (
    DriftSpec,
    FractionalOperators,
    a2_ratio,
    beta_window,
    check_assumption_A,
    default_beta,
    el_bracket_fractional,
    el_residual_fractional,
    el_residual_standard,
    evaluate_om,
    novikov_horizon,
    om_from_path,
    om_regular,
    om_singular,
    om_standard,
    reconstruct_path,
)

DW = DriftSpec.double_well(1.0)
SIN = Sigma.sinusoidal(1.0, 1)


# ---------------------------------------------------------------------------
# Drift
# ---------------------------------------------------------------------------


@given(st.floats(-6, 6), st.floats(0.3, 2.0))
def test_double_well_derivatives(x, a):
    d = DriftSpec.double_well(a)
    e = 1e-5
    fd1 = (d.b(0.0, x + e) - d.b(0.0, x - e)) / (2 * e)
    fd2 = (d.db_dx(0.0, x + e) - d.db_dx(0.0, x - e)) / (2 * e)
    assert d.db_dx(0.0, x) == pytest.approx(fd1, abs=1e-7)
    assert d.d2b_dx2(0.0, x) == pytest.approx(fd2, abs=1e-7)


def test_double_well_constants():
    assert DW.lipschitz == pytest.approx(1.0, abs=1e-12)
    assert DW.sup_bound == pytest.approx(0.25, abs=1e-6)
    assert DW.b(0.0, np.array([-1.0, 0.0, 1.0])) == pytest.approx([0.0, 0.0, 0.0])
    assert DriftSpec.linear(2.0).sup_bound == math.inf
    assert DriftSpec.zero().to_dict() == {"family": "zero", "lipschitz": 0.0, "sup_bound": 0.0}


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def test_standard_straight_line_zero_drift():
    g = TimeGrid(1.0, 129)
    ev = om_standard(g.sample(lambda t: t), DriftSpec.zero(), NoiseModel(0.5, Sigma.constant(1.0)))
    assert ev.J == pytest.approx(-0.5, abs=1e-8)
    assert ev.regime is Regime.Standard and ev.dH == 1.0


@pytest.mark.parametrize("H", [0.3, 0.7])
@pytest.mark.parametrize("n", [129, 257])
def test_fractional_zero_drift_is_energy(H, n):
    g = TimeGrid(1.0, n)
    ev = evaluate_om(NoiseModel(H, Sigma.constant(1.0)), DriftSpec.zero(), 0.0, phi_dot=g.sample(lambda t: 1 + t))
    # trapezoid error bound for -1/2 ∫ (1 + t)^2: T h^2 max|f''| / 24
    assert abs(ev.J + 0.5 * 7.0 / 3.0) <= g.h**2 * 2.0 / 24.0 * (1 + 1e-6)
    assert ev.divergence == 0.0


def test_standard_linear_drift_closed_form():
    k = 0.7
    g = TimeGrid(1.0, 257)
    noise = NoiseModel(0.5, Sigma.constant(1.0))
    exact = -0.5 * (4 / 3 - k + k * k / 5) - k / 2
    nodal = om_standard(g.sample(lambda t: t**2), DriftSpec.linear(k), noise, phi_prime=g.sample(lambda t: 2 * t))
    cells = om_standard(g.sample(lambda t: t**2), DriftSpec.linear(k), noise)
    assert nodal.J == pytest.approx(exact, abs=5e-6)
    assert cells.J == pytest.approx(exact, abs=5e-6)


@pytest.mark.parametrize("sign", [1, -1])
def test_regime_continuity(sign):
    g = TimeGrid(1.0, 257)
    pd = g.sample(lambda t: 2 + np.cos(3 * t))
    J0 = evaluate_om(NoiseModel(0.5, SIN), DW, -1.0, phi_dot=pd).J
    gaps = [abs(evaluate_om(NoiseModel(0.5 + sign * d, SIN), DW, -1.0, phi_dot=pd).J - J0) for d in (1e-2, 1e-4, 1e-6)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-6


def test_regime_dispatch_errors():
    g = TimeGrid(1.0, 17)
    pd = g.sample(np.cos)
    with pytest.raises(ValueError):
        om_singular(pd, 0.0, DW, NoiseModel(0.7, SIN))
    with pytest.raises(ValueError):
        om_regular(pd, 0.0, DW, NoiseModel(0.3, SIN))
    with pytest.raises(ValueError):
        om_standard(pd, DW, NoiseModel(0.3, SIN))
    with pytest.raises(ValueError):
        evaluate_om(NoiseModel(0.3, SIN), DW, 0.0)


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_path_and_control_evaluations_agree(H):
    g = TimeGrid(1.0, 257)
    noise = NoiseModel(H, SIN)
    pd = g.sample(lambda t: 1.5 + np.sin(2 * t))
    phi = reconstruct_path(pd, -1.0, noise)
    a = evaluate_om(noise, DW, -1.0, phi_dot=pd).J
    b = om_from_path(phi, -1.0, DW, noise).J
    assert b == pytest.approx(a, abs=1e-3)


@pytest.mark.parametrize("H", [0.3, 0.5, 0.7])
def test_J_converges_under_refinement(H):
    vals = []
    for n in (129, 257, 513):
        g = TimeGrid(1.0, n)
        vals.append(evaluate_om(NoiseModel(H, SIN), DW, -1.0, phi_dot=g.sample(lambda t: 2 + np.cos(3 * t))).J)
    assert abs(vals[2] - vals[1]) < abs(vals[1] - vals[0])
    assert abs(vals[2] - vals[1]) < 1e-3


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_fractional_gradient_matches_finite_differences(H):
    g = TimeGrid(1.0, 33)
    noise = NoiseModel(H, SIN)
    ops = FractionalOperators.build(noise, g)
    t = g.nodes
    u = 1.0 + np.sin(3 * t)
    parts = ops.evaluate(u, -1.0, DW, t)
    grad = ops.gradient(u, parts, DW, t)
    e = 1e-6
    fd = np.empty_like(u)
    for i in range(u.size):
        up, dn = u.copy(), u.copy()
        up[i] += e
        dn[i] -= e
        jp = ops.evaluate(up, -1.0, DW, t)
        jm = ops.evaluate(dn, -1.0, DW, t)
        fd[i] = ((jp.kinetic + jp.divergence) - (jm.kinetic + jm.divergence)) / (2 * e)
    np.testing.assert_allclose(grad, fd, atol=1e-8)


# ---------------------------------------------------------------------------
# Assumption (A)
# ---------------------------------------------------------------------------


def test_example_one_ratio():
    assert a2_ratio(1.0, 3.0, 1.0, 0.6, 0.34) == pytest.approx(frozen.EXAMPLE1_RATIO, rel=1e-13)
    assert novikov_horizon(1.0, 3.0, 1.0, 0.6, 0.34) == pytest.approx(frozen.EXAMPLE1_RATIO ** (1 / 2.2), rel=1e-13)
    rep = check_assumption_A(DW, NoiseModel(0.6, SIN), beta=0.34)
    assert rep.passed
    assert 1.0 <= rep.ratio <= 1.1


def test_example_one_default_beta_fails_ratio():
    rep = check_assumption_A(DW, NoiseModel(0.6, SIN))
    assert [c.name for c in rep.failures()] == ["A2_ratio"]


@pytest.mark.parametrize("H", [0.3, 0.5])
def test_example_one_other_regimes_pass(H):
    assert check_assumption_A(DW, NoiseModel(H, SIN)).passed


def test_beta_windows():
    assert beta_window(0.3) == pytest.approx((0.0, 0.05))
    assert beta_window(0.7) == pytest.approx((0.2, 0.45))
    for H in (0.3, 0.45, 0.5, 0.6, 0.8):
        lo, hi = beta_window(H)
        assert lo < default_beta(H) < hi


def test_singular_beta_window_violation():
    rep = check_assumption_A(DW, NoiseModel(0.3, SIN), beta=0.2)
    assert not rep.passed
    assert [c.name for c in rep.failures()] == ["beta_window"]
    assert "0.05" in rep.failures()[0].detail


def test_unbounded_drift_and_degenerate_sigma_reported():
    rep = check_assumption_A(DriftSpec.linear(1.0), NoiseModel(0.6, Sigma.constant(1.0)))
    assert "drift_bounded" in [c.name for c in rep.failures()]
    rep = check_assumption_A(DW, NoiseModel(0.5, Sigma.constant(0.0), strict=False))
    assert "sigma_positive" in [c.name for c in rep.failures()]
    d = rep.to_dict()
    assert d["passed"] is False and d["regime"] == "standard"


def test_smoothness_condition():
    d = DriftSpec.custom(DW.b, DW.db_dx, DW.d2b_dx2, smoothness=1)
    rep = check_assumption_A(d, NoiseModel(0.5, SIN))
    assert {"drift_C2_in_x", "A3_smoothness"} <= {c.name for c in rep.failures()}


def test_zero_lipschitz_ratio_is_infinite():
    rep = check_assumption_A(DriftSpec.zero(), NoiseModel(0.7, SIN))
    assert rep.passed and rep.ratio == math.inf


# ---------------------------------------------------------------------------
# Euler–Lagrange residuals
# ---------------------------------------------------------------------------


def test_el_residual_standard_vanishes_on_straight_line_with_zero_drift():
    g = TimeGrid(1.0, 65)
    r = el_residual_standard(g.sample(lambda t: 3 * t - 1), DriftSpec.zero(), NoiseModel(0.5, Sigma.constant(1.0)))
    assert np.isnan(r.values[0]) and np.isnan(r.values[-1])
    np.testing.assert_allclose(r.values[1:-1], 0.0, atol=1e-10)


def test_el_residual_standard_is_second_order_on_exact_solution():
    # b = k x, σ = 1: the EL equation reads φ'' = k^2 φ, solved by sinh(k t)
    k = 1.3
    noise = NoiseModel(0.5, Sigma.constant(1.0))
    m = []
    for n in (65, 129, 257):
        g = TimeGrid(1.0, n)
        r = el_residual_standard(g.sample(lambda t: np.sinh(k * t)), DriftSpec.linear(k), noise)
        m.append(np.nanmax(np.abs(r.values)))
    assert m[0] / m[1] > 3.5 and m[1] / m[2] > 3.5


def test_el_fractional_diagnostics_are_finite():
    g = TimeGrid(1.0, 65)
    pd = g.sample(lambda t: 1 + t)
    for H in (0.3, 0.7):
        noise = NoiseModel(H, SIN)
        r = el_residual_fractional(pd, -1.0, DW, noise)
        assert np.isnan(r.values[0]) and np.all(np.isfinite(r.values[1:-1]))
        assert np.all(np.isfinite(el_bracket_fractional(pd, -1.0, DW, noise).values))
    with pytest.raises(ValueError):
        el_residual_fractional(pd, -1.0, DW, NoiseModel(0.5, SIN))
