import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import frozen
from omfrac.fbm import (
    BLOCK_SIZE,
    HurstParam,
    NoiseModel,
    PathKind,
    Regime,
    Sigma,
    apply_KH,
    apply_KH_factored,
    apply_KH_inverse,
    apply_KH_sigma,
    apply_KH_sigma_inverse,
    apply_KH_star,
    covariance_RH,
    gaussian_increments,
    integral_path_matrix,
    isometry_double_integral,
    iter_path_blocks,
    kernel_KH,
    kernel_square_integral,
    kh_star_square_integral,
    sample_paths,
    write_ensemble,
    young_integral,
)
from omfrac.grid import TimeGrid


def smooth_control(t):
    return 1.0 + np.sin(2 * np.pi * t) + t**2


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("H,regime", [(0.3, Regime.Singular), (0.5, Regime.Standard), (0.7, Regime.Regular)])
def test_hurst_regimes(H, regime):
    hp = HurstParam(H)
    assert hp.regime is regime
    assert hp.alpha == pytest.approx(abs(H - 0.5))


@pytest.mark.parametrize("H", [0.25, 0.1, 1.0, 1.2])
def test_hurst_out_of_range(H):
    with pytest.raises(ValueError):
        HurstParam(H)


def test_sigma_families_and_bounds():
    s = Sigma.sinusoidal(0.5, 4)
    assert s.bounds(1.0) == pytest.approx((0.5, 1.5))
    assert s.value(np.array([0.0]))[0] == pytest.approx(1.0)
    assert Sigma.constant(2.0).bounds() == (2.0, 2.0)
    tab = Sigma.tabulated([0.0, 0.5, 1.0], [1.0, 2.0, 1.5])
    assert tab.bounds(1.0) == pytest.approx((1.0, 2.0))
    assert tab.to_dict()["family"] == "tabulated"
    with pytest.raises(ValueError):
        Sigma.tabulated([0.0, 0.0], [1.0, 1.0])


def test_sigma_derivative_matches_finite_differences():
    s = Sigma.sinusoidal(1.0, 3)
    t = np.linspace(0.1, 0.9, 7)
    fd = (s.value(t + 1e-6) - s.value(t - 1e-6)) / 2e-6
    np.testing.assert_allclose(s.deriv(t), fd, rtol=1e-6)


def test_noise_model_rejects_degenerate_sigma():
    with pytest.raises(ValueError):
        NoiseModel(0.5, Sigma.constant(0.0))
    with pytest.raises(ValueError):
        NoiseModel(0.5, Sigma.sinusoidal(1.0, 1).__class__.tabulated([0, 1], [-1.0, 1.0]))
    nm = NoiseModel(0.5, Sigma.constant(0.0), strict=False)
    assert nm.m == 0.0
    assert NoiseModel(0.7, Sigma.sinusoidal(1, 1)).to_dict()["H"] == 0.7


# ---------------------------------------------------------------------------
# Covariance and kernel
# ---------------------------------------------------------------------------


def test_covariance_properties():
    t = np.array([0.2, 0.5, 1.0])
    for H in (0.3, 0.5, 0.7):
        C = covariance_RH(H, t[:, None], t[None, :])
        np.testing.assert_allclose(np.diag(C), t ** (2 * H))
        assert np.all(np.linalg.eigvalsh(C) > 0)
    assert covariance_RH(0.5, 0.3, 0.8) == pytest.approx(0.3)


@pytest.mark.parametrize("key", sorted(frozen.KERNEL))
def test_kernel_against_integral_oracle(key):
    assert kernel_KH(*key) == pytest.approx(frozen.KERNEL[key], rel=1e-12)


def test_kernel_domain():
    with pytest.raises(ValueError):
        kernel_KH(0.3, 1.0, 1.0)
    with pytest.raises(ValueError):
        kernel_KH(0.7, 1.0, 0.0)
    assert kernel_KH(0.5, 1.0, 0.5) == 1.0


@given(st.floats(0.3, 0.9), st.floats(0.05, 0.95), st.floats(0.2, 3.0))
def test_kernel_scaling(H, r, lam):
    # K_H(λt, λs) = λ^{H - 1/2} K_H(t, s)
    assert kernel_KH(H, lam, lam * r) == pytest.approx(lam ** (H - 0.5) * kernel_KH(H, 1.0, r), rel=1e-10)


@pytest.mark.parametrize("H", [0.3, 0.45, 0.55, 0.7, 0.9])
@pytest.mark.parametrize("t", [0.25, 1.0])
def test_kernel_square_integral_is_variance(H, t):
    assert kernel_square_integral(H, t, 1024) == pytest.approx(t ** (2 * H), rel=1e-10)


@pytest.mark.parametrize("H", [0.3, 0.4, 0.6, 0.7])
def test_kernel_route_agrees_with_factored_route(H):
    errs = []
    for n in (129, 257, 513):
        g = TimeGrid(1.0, n)
        x = g.sample(smooth_control)
        errs.append(np.max(np.abs(apply_KH(x, H).values - apply_KH_factored(x, H).values)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[0] < 1e-2


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_kernel_inverse_roundtrip(H):
    g = TimeGrid(1.0, 513)
    x = g.sample(smooth_control)
    y = apply_KH(x, H)
    back = apply_KH_inverse(y.with_values(np.concatenate([[0.0], y.values[1:]])), H)
    assert np.max(np.abs(back.values - x.values)) < 1e-3


def test_kernel_inverse_requires_zero_start():
    g = TimeGrid(1.0, 17)
    with pytest.raises(ValueError):
        apply_KH_inverse(g.sample(lambda t: 1.0 + t), 0.7)


@pytest.mark.parametrize("H", [0.3, 0.5, 0.7])
def test_sigma_operator_inverse_converges(H):
    nm = NoiseModel(H, Sigma.sinusoidal(1.0, 1))
    errs = []
    for n in (129, 257, 513):
        g = TimeGrid(1.0, n)
        x = g.sample(smooth_control)
        y = apply_KH_sigma(x, nm)
        back = apply_KH_sigma_inverse(y.with_values(np.concatenate([[0.0], y.values[1:]])), nm)
        errs.append(np.max(np.abs(back.values - x.values)))
    assert errs[0] / errs[1] > 3 and errs[1] / errs[2] > 3


def test_standard_regime_sigma_operator_is_an_integral():
    nm = NoiseModel(0.5, Sigma.sinusoidal(1.0, 2))
    g = TimeGrid(1.0, 257)
    u = g.sample(np.cos)
    out = apply_KH_sigma(u, nm).values
    # ∫_0^t σ u ds with σ u = (2 + sin 4πs) cos s; compare with a fine quadrature
    fine = np.linspace(0, 1, 200001)
    f = (2 + np.sin(4 * np.pi * fine)) * np.cos(fine)
    assert out[-1] == pytest.approx(np.trapezoid(f, fine), abs=5e-5)


# ---------------------------------------------------------------------------
# Isometry
# ---------------------------------------------------------------------------


def test_double_integral_against_oracle():
    nm = NoiseModel(0.7, Sigma.sinusoidal(1.0, 1))
    assert isometry_double_integral(nm) == pytest.approx(frozen.ISOMETRY[0.7], rel=1e-6)
    with pytest.raises(ValueError):
        isometry_double_integral(NoiseModel(0.3, Sigma.constant(1.0)))


@pytest.mark.parametrize("H", [0.6, 0.7])
def test_adjoint_route_matches_double_integral(H):
    nm = NoiseModel(H, Sigma.sinusoidal(1.0, 1))
    g = TimeGrid(1.0, 1025)
    ks = kh_star_square_integral(g.sample(nm.sigma.value), H)
    assert ks == pytest.approx(frozen.ISOMETRY[H], rel=2e-3)


def test_adjoint_standard_is_identity():
    g = TimeGrid(1.0, 33)
    f = g.sample(np.exp)
    np.testing.assert_array_equal(apply_KH_star(f, 0.5).values, f.values)
    assert kh_star_square_integral(f, 0.5) == pytest.approx(np.trapezoid(np.exp(2 * g.nodes), g.nodes))


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_adjoint_of_constant_has_variance_norm(H):
    # ∫_0^1 (K_H^* 1)^2 ds = Var(B^H_1) = 1
    g = TimeGrid(1.0, 1025)
    assert kh_star_square_integral(g.sample(lambda t: np.ones_like(t)), H) == pytest.approx(1.0, rel=5e-3)


def test_young_integral_left_point():
    g = TimeGrid(1.0, 5)
    f = g.sample(lambda t: t)
    out = young_integral(f, f).values
    assert out[-1] == pytest.approx(sum(g.nodes[:-1] * g.h))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("H", [0.3, 0.7])
@pytest.mark.parametrize("kind", [PathKind.FbmPaths, PathKind.IntegralPaths])
def test_sampled_covariance(H, kind):
    g = TimeGrid(1.0, 129)
    ens = sample_paths(NoiseModel(H, Sigma.constant(1.0)), g, 20000, seed=2, kind=kind)
    idx = [32, 64, 128]
    t = g.nodes[idx]
    C = np.cov(ens.samples[:, idx].T)
    # sampling error of a covariance entry is about sqrt(2/N) ≈ 0.01
    assert np.max(np.abs(C - covariance_RH(H, t[:, None], t[None, :]))) < 0.05
    assert np.all(ens.samples[:, 0] == 0.0)


def test_sampling_is_deterministic_and_blockwise():
    nm = NoiseModel(0.3, Sigma.sinusoidal(1.0, 1))
    g = TimeGrid(1.0, 33)
    a = sample_paths(nm, g, BLOCK_SIZE + 10, seed=5).samples
    b = sample_paths(nm, g, BLOCK_SIZE + 10, seed=5).samples
    np.testing.assert_array_equal(a, b)
    # a prefix of the ensemble does not depend on how many paths follow
    # (up to BLAS blocking in the matrix product)
    c = sample_paths(nm, g, 7, seed=5).samples
    np.testing.assert_allclose(a[:7], c, rtol=0, atol=1e-13)
    blocks = np.concatenate(list(iter_path_blocks(nm, g, BLOCK_SIZE + 10, seed=5)))
    np.testing.assert_array_equal(a, blocks)
    assert not np.array_equal(a, sample_paths(nm, g, BLOCK_SIZE + 10, seed=6).samples)


def test_antithetic_pairs():
    nm = NoiseModel(0.7, Sigma.constant(1.0))
    g = TimeGrid(1.0, 17)
    s = sample_paths(nm, g, 10, seed=1, antithetic=True).samples
    np.testing.assert_array_equal(s[:5], -s[5:])
    z = gaussian_increments(3, 5, 4, antithetic=True)
    np.testing.assert_array_equal(z[:2], -z[3:5])


def test_sampling_limits():
    nm = NoiseModel(0.5, Sigma.constant(1.0))
    with pytest.raises(ValueError):
        sample_paths(nm, TimeGrid(1.0, 4097), 1)
    with pytest.raises(ValueError):
        sample_paths(nm, TimeGrid(1.0, 9), 0)


def test_integral_path_variance_matches_adjoint_norm():
    nm = NoiseModel(0.7, Sigma.sinusoidal(1.0, 1))
    g = TimeGrid(1.0, 257)
    A = integral_path_matrix(nm, g)
    var_T = g.h * np.sum(A[-1] ** 2)
    assert var_T == pytest.approx(frozen.ISOMETRY[0.7], rel=5e-3)


def test_write_ensemble(tmp_path):
    nm = NoiseModel(0.5, Sigma.constant(1.0))
    ens = sample_paths(nm, TimeGrid(1.0, 5), 3, seed=9)
    csv_path, side = write_ensemble(ens, tmp_path / "ens.csv")
    raw = csv_path.read_bytes()
    assert b"\r\n" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "t,path_0,path_1,path_2"
    assert len(lines) == 6
    meta = json.loads(side.read_text())
    assert meta["seed"] == 9 and meta["n_paths"] == 3 and meta["kind"] == "integral"
    assert float(lines[-1].split(",")[1]) == pytest.approx(ens.samples[0, -1], rel=1e-15)
    assert math.isclose(float(lines[-1].split(",")[0]), 1.0)
