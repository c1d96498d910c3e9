r"""Fractional Brownian motion: covariance, Volterra kernel and derived operators.

With ``alpha = |H - 1/2|`` the kernel ``K_H(t, s)`` represents fBm as
``B^H_t = ∫_0^t K_H(t, s) dW_s`` so that ``Var B^H_t = t^{2H}``. The operators
built on it are

* ``K_H h(t) = ∫_0^t K_H(t, s) h(s) ds`` and its inverse,
* the adjoint ``K_H^*`` mapping Wiener integrands to Brownian integrands,
* ``K_H^σ u = ∫ σ d(K_H u)`` and its inverse, which carry a control ``u`` to
  the path increment ``φ - x0``.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate, linalg, special

from . import fracops
from .fracops import WeightMode
from .grid import SampledPath, TimeGrid, power_weight_quadrature_weights, trapezoid_weights

H_MIN, H_MAX = 0.25, 1.0
MAX_SAMPLING_NODES = 4096
_GAUSS_POINTS = 8


class Regime(enum.Enum):
    Singular = "singular"  # 1/4 < H < 1/2
    Standard = "standard"  # H = 1/2
    Regular = "regular"  # 1/2 < H < 1


@dataclass(frozen=True)
class HurstParam:
    """Hurst index with its regime tag and ``alpha = |H - 1/2|``."""

    H: float

    def __post_init__(self) -> None:
        H = float(self.H)
        if not (H_MIN < H < H_MAX):
            raise ValueError(f"Hurst index must lie in (1/4, 1), got {self.H}")
        object.__setattr__(self, "H", H)

    @property
    def alpha(self) -> float:
        return abs(self.H - 0.5)

    @property
    def regime(self) -> Regime:
        if self.H < 0.5:
            return Regime.Singular
        if self.H > 0.5:
            return Regime.Regular
        return Regime.Standard


def as_hurst(H: float | HurstParam) -> HurstParam:
    return H if isinstance(H, HurstParam) else HurstParam(H)


# ---------------------------------------------------------------------------
# Diffusion coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sigma:
    """Diffusion coefficient ``σ(t)`` with derivative and bounds on ``[0, T]``.

    Use one of the constructors :meth:`constant`, :meth:`sinusoidal` or
    :meth:`tabulated`.
    """

    family: str
    params: tuple
    value: Callable[[np.ndarray], np.ndarray] = field(compare=False, repr=False)
    deriv: Callable[[np.ndarray], np.ndarray] = field(compare=False, repr=False)
    gamma: float = 1.0

    @classmethod
    def constant(cls, c: float = 1.0) -> "Sigma":
        c = float(c)
        return cls(
            "constant",
            (c,),
            lambda t: np.full_like(np.asarray(t, dtype=float), c),
            lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        )

    @classmethod
    def sinusoidal(cls, c: float = 1.0, n: int = 1) -> "Sigma":
        """``σ(t) = c (2 + sin(2nπt))``."""
        c, w = float(c), 2.0 * math.pi * n
        return cls(
            "sinusoidal",
            (c, int(n)),
            lambda t: c * (2.0 + np.sin(w * np.asarray(t, dtype=float))),
            lambda t: c * w * np.cos(w * np.asarray(t, dtype=float)),
        )

    @classmethod
    def tabulated(cls, times, values) -> "Sigma":
        """Linear interpolation of tabulated values; ``σ'`` by central differences.

        A piecewise-linear function is Lipschitz, so the recorded Hölder
        exponent is 1 only in the sense of a Lipschitz bound; it is stored as
        ``gamma = 1``.
        """
        tt = np.asarray(times, dtype=float)
        vv = np.asarray(values, dtype=float)
        if tt.ndim != 1 or tt.shape != vv.shape or tt.size < 2 or np.any(np.diff(tt) <= 0):
            raise ValueError("tabulated sigma needs increasing times and matching values")
        dv = np.gradient(vv, tt)
        return cls(
            "tabulated",
            (tuple(tt), tuple(vv)),
            lambda t: np.interp(np.asarray(t, dtype=float), tt, vv),
            lambda t: np.interp(np.asarray(t, dtype=float), tt, dv),
        )

    def bounds(self, T: float = 1.0, n: int = 4097) -> tuple[float, float]:
        """``(m, M)`` on ``[0, T]``; closed form for the analytic families."""
        if self.family == "constant":
            return self.params[0], self.params[0]
        if self.family == "sinusoidal":
            c, k = self.params
            s = np.linspace(0.0, T, n)
            # the extrema are attained when the horizon covers a quarter period
            lo = c * (2.0 + np.sin(2 * math.pi * k * s)).min()
            hi = c * (2.0 + np.sin(2 * math.pi * k * s)).max()
            if T * k >= 0.75:
                lo, hi = c, 3.0 * c
            return float(lo), float(hi)
        v = self.value(np.linspace(0.0, T, n))
        return float(v.min()), float(v.max())

    def to_dict(self) -> dict:
        if self.family == "tabulated":
            return {"family": "tabulated", "times": list(self.params[0]), "values": list(self.params[1])}
        if self.family == "constant":
            return {"family": "constant", "c": self.params[0]}
        return {"family": "sinusoidal", "c": self.params[0], "n": self.params[1]}


@dataclass(frozen=True)
class NoiseModel:
    """Hurst index plus diffusion coefficient, with bound checks.

    Requires ``0 < m <= σ <= M`` on ``[0, T]`` and ``gamma + H > 1``. With
    ``strict=False`` these checks are skipped so that a violating model can
    still be passed to the assumption report.
    """

    hurst: HurstParam
    sigma: Sigma
    T: float = 1.0
    strict: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "hurst", as_hurst(self.hurst))
        if not self.strict:
            return
        m, _ = self.sigma.bounds(self.T)
        if not m > 0:
            raise ValueError(f"diffusion coefficient must be bounded below by m > 0, got m={m}")
        if self.sigma.gamma + self.hurst.H <= 1.0:
            raise ValueError("Hölder exponent of sigma must satisfy gamma + H > 1")

    @property
    def H(self) -> float:
        return self.hurst.H

    @property
    def alpha(self) -> float:
        return self.hurst.alpha

    @property
    def regime(self) -> Regime:
        return self.hurst.regime

    @property
    def m(self) -> float:
        return self.sigma.bounds(self.T)[0]

    @property
    def M(self) -> float:
        return self.sigma.bounds(self.T)[1]

    @property
    def gamma(self) -> float:
        return self.sigma.gamma

    def sigma_on(self, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
        t = grid.nodes
        return np.asarray(self.sigma.value(t), dtype=float), np.asarray(self.sigma.deriv(t), dtype=float)

    def to_dict(self) -> dict:
        return {"H": self.H, "sigma": self.sigma.to_dict(), "T": self.T}


# ---------------------------------------------------------------------------
# Covariance, constants and kernel
# ---------------------------------------------------------------------------


def covariance_RH(H: float | HurstParam, t, s):
    """``R_H(t, s) = ½(t^{2H} + s^{2H} - |t - s|^{2H})``."""
    h2 = 2.0 * as_hurst(H).H
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t < 0) or np.any(s < 0):
        raise ValueError("covariance is defined for nonnegative times")
    out = 0.5 * (t**h2 + s**h2 - np.abs(t - s) ** h2)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class KernelConstants:
    """``c_H`` (H > 1/2) or ``b_H`` (H < 1/2), plus ``Γ(alpha)`` or ``Γ(1 - alpha)``.

    The product ``coefficient * gamma_factor`` equals ``d_H``.
    """

    H: float
    name: str
    coefficient: float
    gamma_factor: float


def c_H(H: float) -> float:
    """``sqrt(H(2H-1) / B(2-2H, H-1/2))`` for ``H > 1/2``."""
    if not (0.5 < H < 1.0):
        raise ValueError("c_H is defined for 1/2 < H < 1")
    return math.sqrt(H * (2 * H - 1) / special.beta(2 - 2 * H, H - 0.5))


def b_H(H: float) -> float:
    """``sqrt(2H / ((1-2H) B(1-2H, H+1/2)))`` for ``H < 1/2``."""
    if not (0.0 < H < 0.5):
        raise ValueError("b_H is defined for 0 < H < 1/2")
    return math.sqrt(2 * H / ((1 - 2 * H) * special.beta(1 - 2 * H, H + 0.5)))


def constants_cb(H: float | HurstParam) -> KernelConstants:
    hp = as_hurst(H)
    if hp.regime is Regime.Regular:
        return KernelConstants(hp.H, "c_H", c_H(hp.H), math.gamma(hp.alpha))
    if hp.regime is Regime.Singular:
        return KernelConstants(hp.H, "b_H", b_H(hp.H), math.gamma(1 - hp.alpha))
    raise ValueError("kernel constants are undefined at H = 1/2")


def compute_dH(H: float | HurstParam) -> float:
    """``d_H = sqrt(2H Γ(H+1/2) Γ(3/2-H) / Γ(2-2H))``; equals 1 at ``H = 1/2``."""
    H = as_hurst(H).H
    if H == 0.5:
        return 1.0
    return math.sqrt(2 * H * math.gamma(H + 0.5) * math.gamma(1.5 - H) / math.gamma(2 - 2 * H))


def _kernel_values(H: float, t: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Closed form of ``K_H(t, s)`` for ``0 < s < t`` through ``2F1``."""
    a = abs(H - 0.5)
    z = -(t - s) / s
    if H > 0.5:
        return c_H(H) * (t - s) ** a / a * special.hyp2f1(-a, a, 1 + a, z)
    if H < 0.5:
        first = (s / t) ** a * (t - s) ** (-a)
        second = a / (1 - a) * (t - s) ** (1 - a) / s * special.hyp2f1(1 + a, 1 - a, 2 - a, z)
        return b_H(H) * (first + second)
    return np.ones_like(t)


def kernel_KH(H: float | HurstParam, t, s):
    r"""Volterra kernel ``K_H(t, s)`` for ``0 < s < t``.

    ``H > 1/2``: ``c_H s^{-a} ∫_s^t (u-s)^{a-1} u^a du``;
    ``H < 1/2``: ``b_H [(t/s)^{-a}(t-s)^{-a} + a s^a ∫_s^t (u-s)^{-a} u^{-a-1} du]``.
    The inner integrals are evaluated in closed form by a Gauss hypergeometric
    function, which is exact up to rounding.
    """
    hp = as_hurst(H)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0) or np.any(s >= t):
        raise ValueError("kernel requires 0 < s < t")
    out = _kernel_values(hp.H, *np.broadcast_arrays(t, s))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Product integration of the kernel
# ---------------------------------------------------------------------------


def _end_exponents(H: float, power: int = 1) -> tuple[float, float]:
    """Algebraic behaviour of ``K_H(t, s)^power`` at ``s -> 0`` and ``s -> t``."""
    a = abs(H - 0.5)
    left = -a
    right = -a if H < 0.5 else a
    return power * left, power * right


@lru_cache(maxsize=32)
def _jacobi(q: int, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights for ``∫_{-1}^{1} (1-x)^a (1+x)^b f(x) dx``."""
    x, w = special.roots_jacobi(q, a, b)
    return x, w


@lru_cache(maxsize=32)
def _graded_rule(q: int, e: float, levels: int = 14, ratio: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Rule on ``[0, 1]`` for integrands ``x^e g(x)`` with ``g`` merely Hölder at 0.

    Gauss–Legendre on the geometric pieces ``[r^{i+1}, r^i]`` and a
    Gauss–Jacobi piece with weight ``x^e`` on ``[0, r^levels]``. Returned
    weights act on values of the full integrand.
    """
    xg, wg = special.roots_legendre(q)
    xs, ws = [], []
    for i in range(levels):
        lo, hi = ratio ** (i + 1), ratio**i
        xs.append(lo + 0.5 * (xg + 1.0) * (hi - lo))
        ws.append(0.5 * (hi - lo) * wg)
    c = ratio**levels
    xj, wj = _jacobi(q, 0.0, e)
    y = 0.5 * (xj + 1.0)
    xs.append(c * y)
    ws.append(c * 0.5 ** (1.0 + e) * wj / y**e)
    return np.concatenate(xs), np.concatenate(ws)


def _cell_integrals(j: np.ndarray, k: np.ndarray, H: float, power: int, q: int, weights) -> list[np.ndarray]:
    """``∫_j^{j+1} K(k, s)^power g(s) ds`` for each ``g`` in ``weights`` (grid units).

    ``weights`` are callables ``g(s, j)``. Cells touching ``s = t`` use
    Gauss–Jacobi with the kernel's end exponent; the cell at ``s = 0`` uses a
    graded rule since ``s^a K(t, s)`` contains a non-smooth ``s^{2a}`` part.
    """
    el, er = _end_exponents(H, power)
    out = [np.empty(j.size) for _ in weights]
    first = j == 0
    last = j == k - 1
    xg, wg = special.roots_legendre(q)
    xr, wr = _jacobi(q, er, 0.0)
    xz, wz = _graded_rule(q, el)
    groups = [
        (~first & ~last, 0.5 * (xg + 1.0), 0.5 * wg),
        (~first & last, 0.5 * (xr + 1.0), 0.5 ** (1.0 + er) * wr / (0.5 * (1.0 - xr)) ** er),
        (first & ~last, xz, wz),
        (
            first & last,
            np.concatenate([0.5 * xz, 0.5 + 0.25 * (xr + 1.0)]),
            np.concatenate([0.5 * wz, 0.25 ** (1.0 + er) * wr / (0.25 * (1.0 - xr)) ** er]),
        ),
    ]
    for mask, x, w in groups:
        if not np.any(mask):
            continue
        jj = j[mask][:, None]
        kk = k[mask][:, None]
        s = jj + x[None, :]
        kern = _kernel_values(H, np.broadcast_to(kk, s.shape), s) ** power * w[None, :]
        for o, g in zip(out, weights):
            o[mask] = np.sum(kern * g(s, jj), axis=1)
    return out


@lru_cache(maxsize=16)
def _kh_moments_unit(H: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Left/right hat moments of ``K_H(t_k, ·)`` in grid units.

    ``left[k, j] = ∫_j^{j+1} K(k, s)(j+1-s) ds`` and
    ``right[k, j] = ∫_j^{j+1} K(k, s)(s-j) ds``.
    """
    k, j = np.tril_indices(n, -1)
    ml, mr = _cell_integrals(
        j.astype(float), k.astype(float), H, 1, _GAUSS_POINTS,
        [lambda s, jj: jj + 1.0 - s, lambda s, jj: s - jj],
    )
    left = np.zeros((n, n))
    right = np.zeros((n, n))
    left[k, j] = ml
    right[k, j] = mr
    return left, right


@lru_cache(maxsize=16)
def kh_matrix(H: float, grid: TimeGrid) -> np.ndarray:
    """Matrix of ``h -> K_H h`` at the nodes (kernel route, product integration)."""
    n = grid.n
    if H == 0.5:
        mat = np.zeros((n, n))
        mat[1:] = np.tril(np.ones((n - 1, n)), 0) * grid.h
        mat[1:, 0] *= 0.5
        idx = np.arange(1, n)
        mat[idx, idx] = 0.5 * grid.h
        return fracops._readonly(mat)
    left, right = _kh_moments_unit(H, n)
    mat = np.zeros((n, n))
    mat[:, :-1] += left[:, :-1]
    mat[:, 1:] += right[:, :-1]
    return fracops._readonly(grid.h ** (H + 0.5) * mat)


@lru_cache(maxsize=16)
def kh_cell_average_matrix(H: float, grid: TimeGrid) -> np.ndarray:
    """``Kbar[k, j] = (1/h) ∫_{t_j}^{t_{j+1}} K_H(t_k, s) ds``; shape ``(n, n-1)``."""
    n = grid.n
    if H == 0.5:
        return fracops._readonly(np.tril(np.ones((n, n - 1)), -1))
    left, right = _kh_moments_unit(H, n)
    return fracops._readonly(grid.h ** (H - 0.5) * (left + right)[:, :-1])


def kernel_square_integral(H: float | HurstParam, t: float, n: int = 1024, q: int = 16) -> float:
    """``∫_0^t K_H(t, s)^2 ds`` on ``n`` uniform cells with Gauss–Jacobi end cells."""
    hp = as_hurst(H)
    if hp.regime is Regime.Standard:
        return float(t)
    j = np.arange(n, dtype=float)
    k = np.full(n, float(n))
    (m0,) = _cell_integrals(j, k, hp.H, 2, q, [lambda s, jj: np.ones_like(s)])
    h = t / n
    # K(λt, λs)^2 = λ^{2H-1} K(t, s)^2
    return float(h ** (2 * hp.H) * m0.sum())


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


def _hurst_and_grid(f: SampledPath, H) -> tuple[HurstParam, TimeGrid]:
    return as_hurst(H), f.grid


def apply_KH(h: SampledPath, H: float | HurstParam) -> SampledPath:
    """``(K_H h)(t) = ∫_0^t K_H(t, s) h(s) ds`` by product integration."""
    hp, grid = _hurst_and_grid(h, H)
    return h.with_values(kh_matrix(hp.H, grid) @ h.values)


def apply_KH_factored(h: SampledPath, H: float | HurstParam) -> SampledPath:
    r"""``K_H h`` through fractional operators instead of the kernel.

    ``H > 1/2``: ``d_H I^1 s^a I^a s^{-a} h``;
    ``H < 1/2``: ``d_H I^{2H} s^a I^a s^{-a} h``.
    Serves as an independent cross-check of :func:`apply_KH`.
    """
    hp, grid = _hurst_and_grid(h, H)
    return h.with_values(_factored_matrix(hp.H, grid) @ h.values)


@lru_cache(maxsize=16)
def _factored_matrix(H: float, grid: TimeGrid) -> np.ndarray:
    a = abs(H - 0.5)
    t = grid.nodes
    if H == 0.5:
        return kh_matrix(H, grid)
    dh = compute_dH(H)
    inner = t[:, None] ** a * fracops.weighted_integral_left_matrix(grid, a, -a)
    if H > 0.5:
        outer = _cumtrapz_matrix(grid)
    else:
        outer = fracops.integral_left_matrix(grid, 2.0 * H, ())
    return fracops._readonly(dh * outer @ inner)


def _cumtrapz_matrix(grid: TimeGrid) -> np.ndarray:
    n = grid.n
    mat = np.tril(np.ones((n, n)), 0) * grid.h
    mat[:, 0] *= 0.5
    idx = np.arange(n)
    mat[idx, idx] = 0.5 * grid.h
    mat[0] = 0.0
    return mat


def _central_difference_matrix(grid: TimeGrid) -> np.ndarray:
    n, h = grid.n, grid.h
    d = np.zeros((n, n))
    idx = np.arange(1, n - 1)
    d[idx, idx + 1] = 0.5 / h
    d[idx, idx - 1] = -0.5 / h
    d[0, :3] = np.array([-1.5, 2.0, -0.5]) / h
    d[-1, -3:] = np.array([0.5, -2.0, 1.5]) / h
    return d


def kh_inverse_start_exponents(H: float) -> tuple[float, ...]:
    return (H + 0.5, H + 1.5)


def _kh_inverse_power_image(H: float):
    a = abs(H - 0.5)
    dh = compute_dH(H)

    def image(nu: float, t: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            if H > 0.5:
                return nu / dh * special.gamma(nu - a) / special.gamma(nu - 2 * a) * t ** (nu - 1 - a)
            return nu / dh * special.gamma(nu + a) / special.gamma(nu + 2 * a) * t ** (nu - 1 + a)

    return image


@lru_cache(maxsize=16)
def kh_inverse_matrix(H: float, grid: TimeGrid) -> np.ndarray:
    r"""Matrix of ``(K_H)^{-1}`` acting on node values of ``h`` with ``h(0) = 0``.

    ``H > 1/2``: ``d_H^{-1} s^{a} D^{a} s^{-a} h'``;
    ``H < 1/2``: ``d_H^{-1} s^{-a} I^{a} s^{a} h'``, with ``h'`` by central
    differences. Starting weights make the map exact on ``t^{H+1/2}`` and
    ``t^{H+3/2}``, the leading terms of ``K_H u`` for smooth ``u``.
    """
    diff = _central_difference_matrix(grid)
    if H == 0.5:
        return fracops._readonly(diff)
    a = abs(H - 0.5)
    t = grid.nodes
    mode = WeightMode.RegularComposite if H > 0.5 else WeightMode.SingularComposite
    fac, q = fracops.composite_factor_matrix(grid, a, mode)
    comp = np.zeros_like(fac)
    comp[1:] = t[1:, None] ** q * fac[1:]
    mat = comp @ diff / compute_dH(H)
    mat = fracops.start_corrected(mat, t, kh_inverse_start_exponents(H), _kh_inverse_power_image(H))
    return fracops._readonly(fracops._extrapolate_row0(mat))


def _require_zero_start(h: SampledPath, what: str) -> None:
    if abs(h.values[0]) > 1e-12:
        raise ValueError(f"{what} requires input[0] = 0, got {h.values[0]!r}")


def apply_KH_inverse(h: SampledPath, H: float | HurstParam) -> SampledPath:
    """Inverse of :func:`apply_KH`; see :func:`kh_inverse_matrix`."""
    _require_zero_start(h, "apply_KH_inverse")
    hp, grid = _hurst_and_grid(h, H)
    return h.with_values(kh_inverse_matrix(hp.H, grid) @ h.values)


def kh_star_factor(f: SampledPath, H: float | HurstParam) -> tuple[SampledPath, float, float]:
    r"""Return ``(v, p, q)`` with ``K_H^* f = s^p (T - s)^q v`` and ``v`` bounded.

    ``H > 1/2``: ``K_H^* f = c_H Γ(a) s^{-a} I^a_{T-}(s^a f)``, so ``p = -a``.
    ``H < 1/2``: ``K_H^* f = b_H Γ(1-a) s^{a} D^a_{T-}(s^{-a} f)``; the right
    derivative behaves like ``(T-s)^{-a}`` at ``T`` when ``f(T) != 0``, so
    ``q = -a``. Inside each right-sided operator the power weight is folded
    into the linear interpolant; the singular value of ``s^{-a} f`` at ``s = 0``
    never enters the nodes ``t_k >= t_1``, and node 0 is extrapolated.
    """
    hp, grid = _hurst_and_grid(f, H)
    a = hp.alpha
    t = grid.nodes
    if hp.regime is Regime.Standard:
        return f, 0.0, 0.0
    dh = compute_dH(hp.H)
    if hp.regime is Regime.Regular:
        g = fracops.integral_right_matrix(grid, a, ()) @ (t**a * f.values)
        return f.with_values(dh * g), -a, 0.0
    with np.errstate(divide="ignore"):
        w = t ** (-a) * f.values
    w[0] = 0.0
    mat = fracops.derivative_right_matrix(grid, a, (a, 1.0))
    d = np.zeros(grid.n)
    d[1:] = mat[1:, 1:] @ w[1:]
    # D^a_{T-} at node k only uses nodes >= k; column 0 only feeds row 0
    v = fracops.extrapolate_first(dh * t**a * (grid.T - t) ** a * d)
    v[-1] = 2.0 * v[-2] - v[-3]
    return f.with_values(v), 0.0, -a


def apply_KH_star(f: SampledPath, H: float | HurstParam) -> SampledPath:
    """``K_H^* f`` at the nodes; infinite endpoint values are extrapolated."""
    v, p, q = kh_star_factor(f, H)
    t = f.grid.nodes
    out = np.array(v.values)
    inner = slice(1, -1)
    out[inner] = t[inner] ** p * (f.grid.T - t[inner]) ** q * v.values[inner]
    if p == 0.0:
        out[0] = v.values[0] * f.grid.T**q
    else:
        out[0] = 2 * out[1] - out[2]
    if q == 0.0:
        out[-1] = v.values[-1] * f.grid.T**p
    else:
        out[-1] = 2 * out[-2] - out[-3]
    return f.with_values(out)


def kh_star_square_integral(f: SampledPath, H: float | HurstParam) -> float:
    """``∫_0^T (K_H^* f)^2 ds`` with the endpoint singularities integrated exactly."""
    v, p, q = kh_star_factor(f, H)
    if q == 0.0:
        w = power_weight_quadrature_weights(f.grid, 2 * p)
    else:
        w = power_weight_quadrature_weights(f.grid, 2 * q)[::-1]
    return float(np.dot(w, v.values**2))


@lru_cache(maxsize=16)
def _sigma_operator(noise_key, grid: TimeGrid) -> np.ndarray:
    """``diag(σ) - Q`` with ``(Q g)_k = ∫_0^{t_k} σ' g`` by the trapezoid rule."""
    noise = _NOISE_REGISTRY[noise_key]
    sig, dsig = noise.sigma_on(grid)
    return fracops._readonly(np.diag(sig) - _cumtrapz_matrix(grid) * dsig[None, :])


_NOISE_REGISTRY: dict = {}


def _noise_key(noise: NoiseModel):
    key = (noise.H, noise.T, repr(noise.sigma.family), noise.sigma.params)
    _NOISE_REGISTRY[key] = noise
    return key


def kh_sigma_matrix(noise: NoiseModel, grid: TimeGrid) -> np.ndarray:
    r"""Matrix of ``u -> K_H^σ u = σ K_H u - ∫ (K_H u) σ' ds`` (integration by parts)."""
    return _sigma_operator(_noise_key(noise), grid) @ kh_matrix(noise.H, grid)


def apply_KH_sigma(u: SampledPath, noise: NoiseModel) -> SampledPath:
    """``(K_H^σ u)(t) = ∫_0^t σ_s d(K_H u)(s)`` via integration by parts."""
    return u.with_values(kh_sigma_matrix(noise, u.grid) @ u.values)


def sigma_inverse_integral(f: SampledPath, noise: NoiseModel) -> SampledPath:
    """``g(t) = ∫_0^t σ^{-1} df = f/σ + ∫_0^t f σ'/σ^2 ds`` for ``f(0) = 0``."""
    sig, dsig = noise.sigma_on(f.grid)
    g = f.values / sig + _cumtrapz_matrix(f.grid) @ (f.values * dsig / sig**2)
    return f.with_values(g)


def apply_KH_sigma_inverse(phi_minus_x0: SampledPath, noise: NoiseModel) -> SampledPath:
    """``(K_H^σ)^{-1} f = (K_H)^{-1}(∫_0^· σ^{-1} df)``."""
    _require_zero_start(phi_minus_x0, "apply_KH_sigma_inverse")
    g = sigma_inverse_integral(phi_minus_x0, noise)
    g = g.with_values(np.concatenate([[0.0], g.values[1:]]))
    return apply_KH_inverse(g, noise.hurst)


def young_integral(f: SampledPath, g: SampledPath) -> SampledPath:
    """Left-point Riemann–Stieltjes sums ``Σ_{j<k} f_j (g_{j+1} - g_j)``."""
    if f.grid != g.grid:
        raise ValueError("integrand and integrator must share a grid")
    inc = f.values[:-1] * np.diff(g.values)
    return f.with_values(np.concatenate([[0.0], np.cumsum(inc)]))


def isometry_double_integral(noise: NoiseModel, t: float = 1.0) -> float:
    r"""``H(2H-1) ∫_0^t ∫_0^t σ_u σ_v |u-v|^{2H-2} du dv`` for ``H > 1/2``.

    The inner integral is done by QUADPACK with an algebraic end weight.
    """
    H = noise.H
    if not H > 0.5:
        raise ValueError("the double-integral form requires H > 1/2")
    e = 2 * H - 2
    sig = noise.sigma.value

    def inner(u: float) -> float:
        left = integrate.quad(lambda v: float(sig(v)), 0.0, u, weight="alg", wvar=(0.0, e))[0] if u > 0 else 0.0
        right = integrate.quad(lambda v: float(sig(v)), u, t, weight="alg", wvar=(e, 0.0))[0] if u < t else 0.0
        return float(sig(u)) * (left + right)

    val = integrate.quad(inner, 0.0, t, limit=200)[0]
    return H * (2 * H - 1) * val


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


class PathKind(enum.Enum):
    FbmPaths = "fbm"
    IntegralPaths = "integral"


@dataclass(frozen=True, eq=False)
class GaussianEnsemble:
    """Sampled Gaussian paths (rows) on a grid; every path starts at 0."""

    grid: TimeGrid
    samples: np.ndarray = field(repr=False)
    seed: int
    kind: PathKind
    noise: NoiseModel | None = None
    jitter: float = 0.0

    @property
    def n_paths(self) -> int:
        return self.samples.shape[0]

    def manifest(self) -> dict:
        return {
            "H": None if self.noise is None else self.noise.H,
            "sigma": None if self.noise is None else self.noise.sigma.to_dict(),
            "seed": self.seed,
            "n": self.grid.n,
            "T": self.grid.T,
            "n_paths": self.n_paths,
            "kind": self.kind.value,
            "jitter": self.jitter,
        }


#: Paths are generated in fixed-size blocks, each with its own RNG stream, so
#: results do not depend on how blocks are scheduled.
BLOCK_SIZE = 1024


def block_rng(seed: int, stream: str, block: int) -> np.random.Generator:
    """Independent generator for block ``block`` of the named substream."""
    tag = int.from_bytes(stream.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(tag, int(block))))


def gaussian_increments(seed: int, n_paths: int, m: int, stream: str = "noise", antithetic: bool = False) -> np.ndarray:
    """``(n_paths, m)`` standard normals from blockwise streams.

    With ``antithetic`` the second half of the rows is the negation of the
    first half (an odd ``n_paths`` gets one extra unpaired row at the end).
    """
    base = (n_paths + 1) // 2 if antithetic else n_paths
    rows = []
    for b in range(0, base, BLOCK_SIZE):
        rows.append(block_rng(seed, stream, b // BLOCK_SIZE).standard_normal((min(BLOCK_SIZE, base - b), m)))
    z = np.concatenate(rows, axis=0) if rows else np.zeros((0, m))
    if antithetic:
        z = np.concatenate([z, -z], axis=0)[:n_paths]
    return z


@lru_cache(maxsize=8)
def covariance_factor(H: float, grid: TimeGrid) -> tuple[np.ndarray, float]:
    """Cholesky factor of ``[R_H(t_i, t_j)]`` on ``t > 0`` and the jitter used."""
    t = grid.nodes[1:]
    cov = covariance_RH(H, t[:, None], t[None, :])
    try:
        return linalg.cholesky(cov, lower=True), 0.0
    except linalg.LinAlgError:
        jitter = 1e-12 * float(np.max(np.diag(cov)))
        return linalg.cholesky(cov + jitter * np.eye(t.size), lower=True), jitter


def integral_path_matrix(noise: NoiseModel, grid: TimeGrid) -> np.ndarray:
    r"""``A`` with ``U(t_k) = Σ_j A[k, j] ΔW_j`` for ``U_t = ∫_0^t σ dB^H``.

    Rows discretize ``K_H^*(σ 1_{[0,t_k]})(s) = σ_{t_k} K_H(t_k, s) - ∫_s^{t_k}
    σ'_r K_H(r, s) dr`` with cell-averaged kernels.
    """
    return _sigma_operator(_noise_key(noise), grid) @ kh_cell_average_matrix(noise.H, grid)


def iter_path_blocks(
    noise: NoiseModel,
    grid: TimeGrid,
    n_paths: int,
    seed: int = 0,
    kind: PathKind | str = PathKind.IntegralPaths,
    antithetic: bool = False,
):
    """Yield consecutive row blocks of :func:`sample_paths` without storing them all.

    Concatenating the blocks reproduces ``sample_paths(...).samples`` exactly.
    """
    kind = PathKind(kind)
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if grid.n > MAX_SAMPLING_NODES:
        raise ValueError(f"sampling is limited to n <= {MAX_SAMPLING_NODES}")
    if kind is PathKind.FbmPaths:
        chol, _ = covariance_factor(noise.H, grid)
        op = chol.T
    else:
        op = np.sqrt(grid.h) * integral_path_matrix(noise, grid)[1:].T
    z = None
    if antithetic:
        z = gaussian_increments(seed, n_paths, grid.n - 1, kind.value, True)
    for b in range(0, n_paths, BLOCK_SIZE):
        m = min(BLOCK_SIZE, n_paths - b)
        zb = z[b : b + m] if z is not None else block_rng(seed, kind.value, b // BLOCK_SIZE).standard_normal((m, grid.n - 1))
        yield np.concatenate([np.zeros((m, 1)), zb @ op], axis=1)


def sample_paths(
    noise: NoiseModel,
    grid: TimeGrid,
    n_paths: int,
    seed: int = 0,
    kind: PathKind | str = PathKind.IntegralPaths,
    antithetic: bool = False,
) -> GaussianEnsemble:
    """Exact joint Gaussian samples of ``B^H`` or of ``U_t = ∫_0^t σ dB^H``.

    ``FbmPaths`` uses the Cholesky factor of the covariance matrix on the
    nodes ``t > 0`` (with diagonal jitter ``1e-12 max diag`` if the plain
    factorization fails); ``IntegralPaths`` applies the kernel matrix of
    :func:`integral_path_matrix` to Brownian increments. With ``antithetic``
    the second half of the paths are the negatives of the first half.
    """
    kind = PathKind(kind)
    jitter = covariance_factor(noise.H, grid)[1] if kind is PathKind.FbmPaths else 0.0
    samples = np.concatenate(list(iter_path_blocks(noise, grid, n_paths, seed, kind, antithetic)), axis=0)
    return GaussianEnsemble(grid, samples, int(seed), kind, noise, jitter)


def write_ensemble(ens: GaussianEnsemble, path: str | Path) -> tuple[Path, Path]:
    """CSV ``t,path_0,...`` plus a JSON sidecar with the run parameters."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"path_{i}" for i in range(ens.n_paths)])
        for k, tk in enumerate(ens.grid.nodes):
            w.writerow([repr(float(tk))] + [repr(float(x)) for x in ens.samples[:, k]])
    side = path.with_suffix(".json")
    side.write_text(json.dumps(ens.manifest(), indent=2) + "\n")
    return path, side
