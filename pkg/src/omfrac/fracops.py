r"""Discrete Riemann–Liouville fractional integrals and Weyl derivatives.

All operators are assembled as dense matrices acting on node values of a
uniform grid and cached per ``(n, alpha, ...)``. Integrals use product
integration: the input is replaced by its piecewise-linear interpolant and the
kernel moments against the hat functions are computed exactly, so weakly
singular kernels and the power weights ``s^{\pm\alpha}`` are handled without
any regularization parameter.

Because most operators are scale invariant, the matrices are built in grid
units (``h = 1``) and rescaled by ``h^{order}``.

Functions of the form ``t^\nu`` with non-integer ``\nu`` are poorly resolved by
piecewise-linear interpolation near the origin. Operators therefore accept
``start_exponents``: a short list of exponents on which the discrete operator
is made exact by adding weights on the first few nodes (starting weights in
the sense of Lubich's convolution quadrature). Linear and constant data stay
exact.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .grid import SampledPath, TimeGrid

__all__ = [
    "FracOrder",
    "WeightMode",
    "frac_integral_left",
    "frac_integral_right",
    "weyl_derivative_left",
    "weyl_derivative_right",
    "weighted_frac_op",
    "weighted_frac_factor",
]


@dataclass(frozen=True)
class FracOrder:
    """Order of a fractional operator, restricted to ``0 < alpha < 1``."""

    alpha: float

    def __post_init__(self) -> None:
        a = float(self.alpha)
        if not (0.0 < a < 1.0):
            raise ValueError(f"fractional order must lie in (0, 1), got {self.alpha}")
        object.__setattr__(self, "alpha", a)


class WeightMode(enum.Enum):
    SingularComposite = "singular"  # s^{-a} I^a_{0+} s^{a}
    RegularComposite = "regular"  # s^{a} D^a_{0+} s^{-a}


def _order(alpha: float | FracOrder) -> float:
    return alpha.alpha if isinstance(alpha, FracOrder) else FracOrder(alpha).alpha


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """All index pairs ``(k, j)`` with ``0 <= j < k <= n - 1``."""
    k, j = np.tril_indices(n, -1)
    return k.astype(float), j.astype(float)


def _inc_beta(x: np.ndarray, a: float, b: float) -> np.ndarray:
    r"""Unregularized incomplete beta ``∫_0^x u^{a-1}(1-u)^{b-1} du``.

    ``a > 0``; ``b`` may lie in ``(-1, 0)``, in which case ``x < 1`` is
    required and the value follows from the recurrence in ``b``.
    """
    x = np.asarray(x, dtype=float)
    if b > 0:
        return special.betainc(a, b, x) * special.beta(a, b)
    if not (-1.0 < b < 0.0):
        raise ValueError("second beta parameter must exceed -1")
    lower = special.betainc(a, b + 1.0, x) * special.beta(a, b + 1.0)
    return ((a + b) * lower - x**a * (1.0 - x) ** b) / b


def extrapolate_first(values: np.ndarray) -> np.ndarray:
    """Replace the entry at node 0 by linear extrapolation from nodes 1, 2."""
    v = np.array(values, dtype=float)
    v[..., 0] = 2.0 * v[..., 1] - v[..., 2]
    return v


def _extrapolate_row0(mat: np.ndarray) -> np.ndarray:
    mat = np.array(mat)
    mat[0] = 2.0 * mat[1] - mat[2]
    return mat


# ---------------------------------------------------------------------------
# Matrices in grid units
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _rl_matrix_unit(n: int, alpha: float) -> np.ndarray:
    """Product-trapezoid matrix for ``I^a_{0+}`` with ``h = 1``."""
    m = np.arange(1, n, dtype=float)
    c1, c = alpha + 1.0, alpha
    p1 = m**c1 - (m - 1.0) ** c1
    p0 = m**c - (m - 1.0) ** c
    # weights of the left and right node of the cell at distance m from t_k
    wl = (p1 / c1 - (m - 1.0) * p0 / c) / math.gamma(alpha)
    wr = (m * p0 / c - p1 / c1) / math.gamma(alpha)
    k, j = np.tril_indices(n, -1)
    mat = np.zeros((n, n))
    mat[k, j] += wl[k - j - 1]
    mat[k, j + 1] += wr[k - j - 1]
    return _readonly(mat)


@lru_cache(maxsize=64)
def _weighted_rl_matrix_unit(n: int, alpha: float, p: float) -> np.ndarray:
    """``I^a_{0+}(s^p f)`` against piecewise-linear ``f`` with ``h = 1``."""
    if p == 0.0:
        return _rl_matrix_unit(n, alpha)
    k, j = _pairs(n)
    x1, x2 = j / k, (j + 1.0) / k
    mom = []
    for mm in (0, 1):
        a = p + mm + 1.0
        mom.append(k ** (alpha + p + mm) * (_inc_beta(x2, a, alpha) - _inc_beta(x1, a, alpha)))
    m0, m1 = mom
    ki, ji = k.astype(int), j.astype(int)
    mat = np.zeros((n, n))
    mat[ki, ji] += ((j + 1.0) * m0 - m1) / math.gamma(alpha)
    mat[ki, ji + 1] += (m1 - j * m0) / math.gamma(alpha)
    return _readonly(mat)


@lru_cache(maxsize=64)
def _weyl_matrix_unit(n: int, alpha: float) -> np.ndarray:
    """Weyl-form ``D^a_{0+}`` on the piecewise-linear interpolant, ``h = 1``.

    Inserting the interpolant in the Weyl integral and integrating the kernel
    ``(t - y)^{-a-1}`` exactly cell by cell gives, after summation by parts,
    ``(1/Γ(1-a)) [f_0 t_k^{-a} + Σ_j (f_{j+1} - f_j) c_{k-j} / (1-a)]`` with
    ``c_m = m^{1-a} - (m-1)^{1-a}``. Row 0 is left as zero.
    """
    m = np.arange(1, n, dtype=float)
    c = (m ** (1.0 - alpha) - (m - 1.0) ** (1.0 - alpha)) / (1.0 - alpha)
    k, j = np.tril_indices(n, -1)
    mat = np.zeros((n, n))
    mat[k, j] -= c[k - j - 1]
    mat[k, j + 1] += c[k - j - 1]
    mat[1:, 0] += m ** (-alpha)
    return _readonly(mat / math.gamma(1.0 - alpha))


@lru_cache(maxsize=64)
def _singular_factor_unit(n: int, alpha: float) -> np.ndarray:
    r"""Bounded factor ``t^{-2a} I^a_{0+}(s^a f)``; scale free.

    The singular composite equals ``t^{a}`` times this factor, whose value at
    the origin is the analytic limit ``f_0 Γ(1+a)/Γ(1+2a)``.
    """
    mat = np.array(_weighted_rl_matrix_unit(n, alpha, alpha))
    k = np.arange(1, n, dtype=float)
    mat[1:] *= (k ** (-2.0 * alpha))[:, None]
    mat[0, 0] = math.gamma(1.0 + alpha) / math.gamma(1.0 + 2.0 * alpha)
    return _readonly(mat)


@lru_cache(maxsize=64)
def _regular_factor_unit(n: int, alpha: float) -> np.ndarray:
    r"""Bounded factor ``t^{2a} D^a_{0+}(s^{-a} f)``; scale free.

    With ``g = s^{-a} f`` the Weyl form splits into
    ``f(t) D^a(s^{-a})(t) + (a/Γ(1-a)) ∫_0^t y^{-a}(f(t)-f(y))(t-y)^{-a-1} dy``.
    The first term is a closed-form power; the second is integrated exactly
    against the interpolant of ``f``. On the cell next to ``t`` the difference
    ``f(t) - f(y)`` is linear and vanishes at ``y = t``, which leaves the finite
    moment ``∫ y^{-a}(t-y)^{-a} dy``.
    """
    a = alpha
    lead = math.gamma(1.0 - a) / math.gamma(1.0 - 2.0 * a)
    mat = np.zeros((n, n))
    mat[np.arange(n), np.arange(n)] = lead
    k, j = _pairs(n)
    inner = j <= k - 2
    k_i, j_i = k[inner], j[inner]
    x1, x2 = j_i / k_i, (j_i + 1.0) / k_i
    n0 = k_i ** (-2.0 * a) * (_inc_beta(x2, 1.0 - a, -a) - _inc_beta(x1, 1.0 - a, -a))
    n1 = k_i ** (1.0 - 2.0 * a) * (_inc_beta(x2, 2.0 - a, -a) - _inc_beta(x1, 2.0 - a, -a))
    scale = a / math.gamma(1.0 - a) * k_i ** (2.0 * a)
    ki, ji = k_i.astype(int), j_i.astype(int)
    np.add.at(mat, (ki, ki), scale * n0)
    mat[ki, ji] -= scale * ((j_i + 1.0) * n0 - n1)
    mat[ki, ji + 1] -= scale * (n1 - j_i * n0)
    # last cell
    kk = np.arange(1, n, dtype=float)
    full = special.beta(1.0 - a, 1.0 - a)
    tail = full - special.betainc(1.0 - a, 1.0 - a, (kk - 1.0) / kk) * full
    last = a / math.gamma(1.0 - a) * kk ** (2.0 * a) * kk ** (1.0 - 2.0 * a) * tail
    idx = np.arange(1, n)
    mat[idx, idx] += last
    mat[idx, idx - 1] -= last
    # row 0 is the analytic limit f_0 Γ(1-a)/Γ(1-2a), already on the diagonal
    return _readonly(mat)


# ---------------------------------------------------------------------------
# Starting-weight corrections
# ---------------------------------------------------------------------------


def start_corrected(
    mat: np.ndarray,
    nodes: np.ndarray,
    exponents: Sequence[float],
    exact: Callable[[float, np.ndarray], np.ndarray],
) -> np.ndarray:
    """Add weights on nodes ``1..m`` so that ``mat`` is exact on ``t^nu``.

    ``exact(nu, t)`` returns the exact image of ``t^nu`` at the nodes. The
    correction acts on ``f_i - f_0`` so constants keep their original image.
    Row 0 is not touched.
    """
    exps = sorted({float(e) for e in exponents})
    if not exps:
        return mat
    m = len(exps)
    t = nodes
    basis = np.stack([t**nu for nu in exps], axis=1)  # (n, m)
    err = np.stack([exact(nu, t) for nu in exps], axis=1) - mat @ basis
    vand = basis[1 : m + 1, :]  # (m, m)
    corr = np.linalg.solve(vand.T, err.T).T  # (n, m): corr @ vand = err
    out = np.array(mat)
    out[1:, 1 : m + 1] += corr[1:]
    out[1:, 0] -= corr[1:].sum(axis=1)
    return out


def _power_integral_image(alpha: float) -> Callable[[float, np.ndarray], np.ndarray]:
    def image(nu: float, t: np.ndarray) -> np.ndarray:
        return math.gamma(1.0 + nu) / math.gamma(1.0 + nu + alpha) * t ** (nu + alpha)

    return image


def _power_derivative_image(alpha: float) -> Callable[[float, np.ndarray], np.ndarray]:
    def image(nu: float, t: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return math.gamma(1.0 + nu) / math.gamma(1.0 + nu - alpha) * t ** (nu - alpha)

    return image


def default_derivative_exponents(alpha: float) -> tuple[float, ...]:
    return (alpha, 1.0, 1.0 + alpha)


# ---------------------------------------------------------------------------
# Matrices on a grid
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def integral_left_matrix(
    grid: TimeGrid, alpha: float, start_exponents: tuple[float, ...] = ()
) -> np.ndarray:
    mat = grid.h**alpha * np.array(_rl_matrix_unit(grid.n, alpha))
    mat = start_corrected(mat, grid.nodes, start_exponents, _power_integral_image(alpha))
    return _readonly(mat)


@lru_cache(maxsize=64)
def derivative_left_matrix(
    grid: TimeGrid, alpha: float, start_exponents: tuple[float, ...] | None = None
) -> np.ndarray:
    if start_exponents is None:
        start_exponents = default_derivative_exponents(alpha)
    mat = grid.h ** (-alpha) * np.array(_weyl_matrix_unit(grid.n, alpha))
    mat = start_corrected(mat, grid.nodes, start_exponents, _power_derivative_image(alpha))
    return _readonly(_extrapolate_row0(mat))


def _reflect(mat: np.ndarray) -> np.ndarray:
    return _readonly(np.ascontiguousarray(mat[::-1, ::-1]))


@lru_cache(maxsize=64)
def integral_right_matrix(
    grid: TimeGrid, alpha: float, start_exponents: tuple[float, ...] = ()
) -> np.ndarray:
    return _reflect(integral_left_matrix(grid, alpha, start_exponents))


@lru_cache(maxsize=64)
def derivative_right_matrix(
    grid: TimeGrid, alpha: float, start_exponents: tuple[float, ...] | None = None
) -> np.ndarray:
    return _reflect(derivative_left_matrix(grid, alpha, start_exponents))


@lru_cache(maxsize=64)
def weighted_integral_left_matrix(grid: TimeGrid, alpha: float, p: float) -> np.ndarray:
    """``I^a_{0+}(s^p f)`` with the weight integrated exactly."""
    return _readonly(grid.h ** (alpha + p) * np.array(_weighted_rl_matrix_unit(grid.n, alpha, p)))


def composite_factor_matrix(grid: TimeGrid, alpha: float, mode: WeightMode) -> tuple[np.ndarray, float]:
    """Matrix ``F`` and exponent ``q`` with ``composite(f) = s^q (F f)``.

    ``F f`` is bounded on ``[0, T]`` and takes its analytic limit at 0.
    """
    if mode is WeightMode.SingularComposite:
        return _singular_factor_unit(grid.n, alpha), alpha
    return _regular_factor_unit(grid.n, alpha), -alpha


# ---------------------------------------------------------------------------
# Public operators on sampled paths
# ---------------------------------------------------------------------------


def frac_integral_left(
    f: SampledPath, alpha: float | FracOrder, start_exponents: Sequence[float] = ()
) -> SampledPath:
    r"""``(I^a_{0+} f)(t_k) = Γ(a)^{-1} ∫_0^{t_k} (t_k - y)^{a-1} f(y) dy``.

    Product trapezoid rule; ``output[0] = 0``. ``start_exponents`` lists
    exponents ``nu`` for which inputs ``t^nu`` are integrated exactly.
    """
    a = _order(alpha)
    mat = integral_left_matrix(f.grid, a, tuple(start_exponents))
    return f.with_values(mat @ f.values)


def frac_integral_right(
    f: SampledPath, alpha: float | FracOrder, start_exponents: Sequence[float] = ()
) -> SampledPath:
    r"""``(I^a_{T-} f)(t_k) = Γ(a)^{-1} ∫_{t_k}^T (y - t_k)^{a-1} f(y) dy``; ``output[-1] = 0``."""
    a = _order(alpha)
    mat = integral_right_matrix(f.grid, a, tuple(start_exponents))
    return f.with_values(mat @ f.values)


def weyl_derivative_left(
    f: SampledPath, alpha: float | FracOrder, start_exponents: Sequence[float] | None = None
) -> SampledPath:
    r"""Weyl form of ``D^a_{0+} f``.

    ``(1/Γ(1-a)) [f(t)/t^a + a ∫_0^t (f(t) - f(y)) (t - y)^{-a-1} dy]`` evaluated
    exactly on the interpolant, with starting weights for ``t^a``, ``t`` and
    ``t^{1+a}`` by default. The value at ``t = 0`` is extrapolated.
    """
    a = _order(alpha)
    exps = None if start_exponents is None else tuple(start_exponents)
    mat = derivative_left_matrix(f.grid, a, exps)
    return f.with_values(mat @ f.values)


def weyl_derivative_right(
    f: SampledPath, alpha: float | FracOrder, start_exponents: Sequence[float] | None = None
) -> SampledPath:
    r"""``D^a_{T-} f(s) = (1/Γ(1-a)) [f(s)/(T-s)^a - a ∫_s^T (f(u) - f(s))(u - s)^{-a-1} du]``.

    The mirror image of :func:`weyl_derivative_left`; the value at ``T`` is
    extrapolated.
    """
    a = _order(alpha)
    exps = None if start_exponents is None else tuple(start_exponents)
    mat = derivative_right_matrix(f.grid, a, exps)
    return f.with_values(mat @ f.values)


def weighted_frac_factor(
    f: SampledPath, alpha: float | FracOrder, mode: WeightMode
) -> tuple[SampledPath, float]:
    """Return ``(v, q)`` with ``weighted_frac_op(f) = s^q v`` and ``v`` bounded."""
    a = _order(alpha)
    mat, q = composite_factor_matrix(f.grid, a, WeightMode(mode))
    return f.with_values(mat @ f.values), q


def weighted_frac_op(f: SampledPath, alpha: float | FracOrder, mode: WeightMode) -> SampledPath:
    r"""Weighted composites ``s^{-a} I^a_{0+} s^{a}`` and ``s^{a} D^a_{0+} s^{-a}``.

    The power weights are integrated exactly. The singular composite vanishes
    at ``t = 0`` (its analytic limit); the regular composite blows up like
    ``t^{-a}`` there, so its node-0 value is extrapolated from nodes 1 and 2.
    """
    v, q = weighted_frac_factor(f, alpha, mode)
    t = f.grid.nodes
    out = np.zeros(f.grid.n)
    out[1:] = t[1:] ** q * v.values[1:]
    if q < 0:
        out = extrapolate_first(out)
    return f.with_values(out)
