r"""Onsager–Machlup functionals for ``dX = b(t, X) dt + σ_t dB^H_t``.

For a control ``φ̇`` the path is ``φ = x0 + K_H^σ φ̇`` and

* ``1/4 < H < 1/2``: ``J = -½ ∫ (φ̇ - s^{-a} I^a s^{a} σ^{-1} b(φ))^2 + d_H ∂_x b(φ) ds``,
* ``1/2 < H < 1``:  ``J = -½ ∫ (φ̇ - s^{a} D^a s^{-a} σ^{-1} b(φ))^2 + d_H ∂_x b(φ) ds``,
* ``H = 1/2``:      ``J = -½ ∫ ((φ' - b(φ))/σ)^2 + ∂_x b(φ) ds`` in terms of ``φ``.

The drift image ``s^q χ`` of each fractional composite is kept in factored
form with ``χ`` bounded, and the power weights ``s^q``, ``s^{2q}`` are
integrated exactly. This keeps the quadrature second order at the singular
origin and continuous as ``H -> 1/2``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from . import fracops
from .fbm import (
    NoiseModel,
    Regime,
    _cumtrapz_matrix,
    apply_KH_sigma_inverse,
    as_hurst,
    compute_dH,
    kh_sigma_matrix,
)
from .fracops import WeightMode
from .grid import SampledPath, TimeGrid, power_weight_quadrature_weights, trapezoid_weights

__all__ = [
    "DriftSpec",
    "OMEvaluation",
    "AssumptionReport",
    "compute_dH",
    "om_singular",
    "om_regular",
    "om_standard",
    "om_from_path",
    "evaluate_om",
    "check_assumption_A",
    "a2_ratio",
    "novikov_horizon",
    "default_beta",
]

DriftFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Drift
# ---------------------------------------------------------------------------


def _sampled_max(fn: DriftFn, box: tuple[float, float], T: float = 1.0, n: int = 20001) -> float:
    x = np.linspace(box[0], box[1], n)
    x = np.union1d(x, [0.0]) if box[0] < 0 < box[1] else x
    vals = [np.max(np.abs(fn(np.full_like(x, t), x))) for t in np.linspace(0.0, T, 5)]
    return float(max(vals))


@dataclass(frozen=True)
class DriftSpec:
    """Drift ``b(t, x)`` with closed-form ``∂_x b`` and ``∂_xx b``.

    ``lipschitz`` bounds ``|∂_x b|``; ``sup_bound`` bounds ``|b|`` (``inf`` if
    unbounded); ``smoothness`` is the number of continuous x-derivatives.
    """

    family: str
    params: tuple
    b: DriftFn = field(compare=False, repr=False)
    db_dx: DriftFn = field(compare=False, repr=False)
    d2b_dx2: DriftFn = field(compare=False, repr=False)
    lipschitz: float = math.inf
    sup_bound: float = math.inf
    smoothness: float = math.inf

    @classmethod
    def double_well(cls, a: float = 1.0) -> "DriftSpec":
        """``b(x) = -x (x^2 - a^2) / (1 + x^2)^2`` with stable states ``±a``."""
        a2 = float(a) ** 2

        def b(t, x):
            x = np.asarray(x, dtype=float)
            return -x * (x * x - a2) / (1.0 + x * x) ** 2

        def db(t, x):
            x = np.asarray(x, dtype=float)
            x2 = x * x
            return (x2 * x2 - 3.0 * (1.0 + a2) * x2 + a2) / (1.0 + x2) ** 3

        def d2b(t, x):
            x = np.asarray(x, dtype=float)
            x2 = x * x
            return x * (-2.0 * x2 * x2 + (16.0 + 12.0 * a2) * x2 - (6.0 + 12.0 * a2)) / (1.0 + x2) ** 4

        box = (-50.0 * max(1.0, a), 50.0 * max(1.0, a))
        return cls(
            "double_well", (float(a),), b, db, d2b,
            lipschitz=_sampled_max(db, box), sup_bound=_sampled_max(b, box),
        )

    @classmethod
    def linear(cls, k: float) -> "DriftSpec":
        """``b(x) = k x``; unbounded unless ``k = 0``."""
        k = float(k)
        return cls(
            "linear", (k,),
            lambda t, x: k * np.asarray(x, dtype=float),
            lambda t, x: np.full_like(np.asarray(x, dtype=float), k),
            lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
            lipschitz=abs(k), sup_bound=0.0 if k == 0 else math.inf,
        )

    @classmethod
    def zero(cls) -> "DriftSpec":
        z = lambda t, x: np.zeros_like(np.asarray(x, dtype=float))  # noqa: E731
        return cls("zero", (), z, z, z, lipschitz=0.0, sup_bound=0.0)

    @classmethod
    def custom(
        cls,
        b: DriftFn,
        db_dx: DriftFn,
        d2b_dx2: DriftFn,
        lipschitz: float | None = None,
        sup_bound: float | None = None,
        box: tuple[float, float] = (-10.0, 10.0),
        smoothness: float = 2,
    ) -> "DriftSpec":
        """User drift; ``L`` and ``‖b‖_∞`` default to sampled maxima over ``box``."""
        L = _sampled_max(db_dx, box) if lipschitz is None else float(lipschitz)
        S = _sampled_max(b, box) if sup_bound is None else float(sup_bound)
        return cls("custom", (tuple(box),), b, db_dx, d2b_dx2, L, S, smoothness)

    def to_dict(self) -> dict:
        out: dict = {"family": self.family}
        if self.family == "double_well":
            out["a"] = self.params[0]
        elif self.family == "linear":
            out["k"] = self.params[0]
        out["lipschitz"] = self.lipschitz
        out["sup_bound"] = self.sup_bound
        return out


# ---------------------------------------------------------------------------
# Evaluations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OMEvaluation:
    """``J = kinetic + divergence`` for one path."""

    J: float
    kinetic: float
    divergence: float
    regime: Regime
    dH: float
    assumption_report: "AssumptionReport | None" = None

    def to_dict(self) -> dict:
        return {
            "J": self.J,
            "kinetic": self.kinetic,
            "divergence": self.divergence,
            "regime": self.regime.value,
            "dH": self.dH,
            "assumption_report": None if self.assumption_report is None else self.assumption_report.to_dict(),
        }


def _require_regime(noise: NoiseModel, regime: Regime) -> None:
    if noise.regime is not regime:
        raise ValueError(f"expected {regime.value} regime, noise model is {noise.regime.value}")


@dataclass(frozen=True, eq=False)
class FractionalParts:
    """Intermediate quantities of a fractional OM evaluation (used by the optimizer)."""

    phi: np.ndarray
    chi: np.ndarray  # bounded factor of the drift image
    q: float  # drift image = s^q chi
    kinetic: float
    divergence: float


@dataclass(frozen=True, eq=False)
class FractionalOperators:
    """Matrices and weights shared by every evaluation on one (noise, grid)."""

    ksig: np.ndarray
    factor: np.ndarray
    q: float
    w0: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    sigma: np.ndarray
    dH: float

    @classmethod
    def build(cls, noise: NoiseModel, grid: TimeGrid) -> "FractionalOperators":
        mode = WeightMode.SingularComposite if noise.regime is Regime.Singular else WeightMode.RegularComposite
        factor, q = fracops.composite_factor_matrix(grid, noise.alpha, mode)
        sig, _ = noise.sigma_on(grid)
        return cls(
            kh_sigma_matrix(noise, grid), np.asarray(factor), q,
            trapezoid_weights(grid),
            power_weight_quadrature_weights(grid, q),
            power_weight_quadrature_weights(grid, 2 * q),
            sig, compute_dH(noise.H),
        )

    def evaluate(self, u: np.ndarray, x0: float, drift: DriftSpec, t: np.ndarray) -> FractionalParts:
        phi = x0 + self.ksig @ u
        chi = self.factor @ (drift.b(t, phi) / self.sigma)
        kin = -0.5 * (np.dot(self.w0, u * u) - 2.0 * np.dot(self.w1, u * chi) + np.dot(self.w2, chi * chi))
        div = -0.5 * self.dH * np.dot(self.w0, drift.db_dx(t, phi))
        return FractionalParts(phi, chi, self.q, float(kin), float(div))

    def gradient(self, u: np.ndarray, parts: FractionalParts, drift: DriftSpec, t: np.ndarray) -> np.ndarray:
        """Gradient of ``J`` with respect to the nodal control values."""
        phi, chi = parts.phi, parts.chi
        g = -(self.w0 * u - self.w1 * chi)
        adj = self.factor.T @ (self.w1 * u - self.w2 * chi)
        g += self.ksig.T @ (drift.db_dx(t, phi) / self.sigma * adj)
        g -= 0.5 * self.dH * (self.ksig.T @ (self.w0 * drift.d2b_dx2(t, phi)))
        return g


def _fractional(phi_dot: SampledPath, x0: float, drift: DriftSpec, noise: NoiseModel) -> OMEvaluation:
    ops = FractionalOperators.build(noise, phi_dot.grid)
    parts = ops.evaluate(phi_dot.values, float(x0), drift, phi_dot.grid.nodes)
    return OMEvaluation(parts.kinetic + parts.divergence, parts.kinetic, parts.divergence, noise.regime, ops.dH)


def om_singular(phi_dot: SampledPath, x0: float, drift: DriftSpec, noise: NoiseModel) -> OMEvaluation:
    """OM functional for ``1/4 < H < 1/2`` with drift image ``s^{-a} I^a s^{a} σ^{-1} b(φ)``."""
    _require_regime(noise, Regime.Singular)
    return _fractional(phi_dot, x0, drift, noise)


def om_regular(phi_dot: SampledPath, x0: float, drift: DriftSpec, noise: NoiseModel) -> OMEvaluation:
    """OM functional for ``1/2 < H < 1`` with drift image ``s^{a} D^a s^{-a} σ^{-1} b(φ)``."""
    _require_regime(noise, Regime.Regular)
    return _fractional(phi_dot, x0, drift, noise)


def reconstruct_path(phi_dot: SampledPath, x0: float, noise: NoiseModel) -> SampledPath:
    """``φ = x0 + K_H^σ φ̇``."""
    return phi_dot.with_values(float(x0) + kh_sigma_matrix(noise, phi_dot.grid) @ phi_dot.values)


def standard_action_cells(phi: np.ndarray, grid: TimeGrid, drift: DriftSpec, noise: NoiseModel) -> tuple[float, float]:
    """Kinetic and divergence terms with cell-midpoint velocities.

    Kinetic: ``-½ Σ_j h ((Δφ_j/h - b(m_j, φ̄_j)) / σ(m_j))^2`` over cells;
    divergence: ``-½ ∫ ∂_x b(φ)`` by the trapezoid rule on the nodes.
    """
    t, h = grid.nodes, grid.h
    mid = 0.5 * (t[:-1] + t[1:])
    pbar = 0.5 * (phi[:-1] + phi[1:])
    r = (np.diff(phi) / h - drift.b(mid, pbar)) / noise.sigma.value(mid)
    kin = -0.5 * h * float(np.dot(r, r))
    div = -0.5 * float(np.dot(trapezoid_weights(grid), drift.db_dx(t, phi)))
    return kin, div


def om_standard(
    phi: SampledPath, drift: DriftSpec, noise: NoiseModel, phi_prime: SampledPath | None = None
) -> OMEvaluation:
    """Classical OM functional for ``H = 1/2``, parameterized by the path ``φ``.

    Without ``phi_prime`` the velocity is the cell difference quotient and the
    kinetic term uses cell midpoints (the form minimized by the path solver).
    With an analytic ``phi_prime`` the kinetic integrand is evaluated at the
    nodes and integrated by the trapezoid rule.
    """
    _require_regime(noise, Regime.Standard)
    grid = phi.grid
    if phi_prime is None:
        kin, div = standard_action_cells(phi.values, grid, drift, noise)
    else:
        t = grid.nodes
        sig, _ = noise.sigma_on(grid)
        w = trapezoid_weights(grid)
        r = (phi_prime.values - drift.b(t, phi.values)) / sig
        kin = -0.5 * float(np.dot(w, r * r))
        div = -0.5 * float(np.dot(w, drift.db_dx(t, phi.values)))
    return OMEvaluation(kin + div, kin, div, Regime.Standard, 1.0)


def om_from_path(phi: SampledPath, x0: float, drift: DriftSpec, noise: NoiseModel) -> OMEvaluation:
    """Evaluate ``J`` from a path; fractional regimes recover ``φ̇ = (K_H^σ)^{-1}(φ - x0)``.

    Recovering the control differentiates the path, which is ill-posed for
    ``H > 1/2`` unless ``φ`` is smooth. Prefer passing ``φ̇`` directly.
    """
    if noise.regime is Regime.Standard:
        return om_standard(phi, drift, noise)
    inc = phi.with_values(np.concatenate([[0.0], phi.values[1:] - float(x0)]))
    return evaluate_om(noise, drift, x0, phi_dot=apply_KH_sigma_inverse(inc, noise))


def evaluate_om(
    noise: NoiseModel,
    drift: DriftSpec,
    x0: float,
    phi_dot: SampledPath | None = None,
    phi: SampledPath | None = None,
    phi_prime: SampledPath | None = None,
) -> OMEvaluation:
    """Dispatch to the regime's functional.

    In the standard regime a supplied control fixes ``φ' = σ φ̇`` exactly, so
    the kinetic term is integrated on the nodes like in the fractional
    regimes; this keeps ``J`` continuous across ``H = 1/2`` at fixed grid.
    """
    if noise.regime is Regime.Standard:
        if phi is None:
            if phi_dot is None:
                raise ValueError("standard regime needs a path")
            phi = reconstruct_path(phi_dot, x0, noise)
            if phi_prime is None:
                phi_prime = phi_dot.with_values(noise.sigma_on(phi_dot.grid)[0] * phi_dot.values)
        return om_standard(phi, drift, noise, phi_prime)
    if phi_dot is None:
        if phi is None:
            raise ValueError("fractional regimes need a control or a path")
        return om_from_path(phi, x0, drift, noise)
    fn = om_singular if noise.regime is Regime.Singular else om_regular
    return fn(phi_dot, x0, drift, noise)


# ---------------------------------------------------------------------------
# Assumption (A)
# ---------------------------------------------------------------------------


def a2_ratio(m: float, M: float, L: float, H: float, beta: float) -> float:
    """``m^2 (2β+1) Γ(1+β)^2 / (M^2 a^2 L^2 Γ(β-a)^2)`` with ``a = |H - 1/2|``."""
    a = abs(H - 0.5)
    if min(m, M, L, a) <= 0:
        raise ValueError("m, M, L and |H - 1/2| must be positive")
    if beta <= a:
        raise ValueError("the ratio needs beta > |H - 1/2|")
    if math.isinf(L):
        return 0.0
    return m**2 * (2 * beta + 1) * special.gamma(1 + beta) ** 2 / (M**2 * a**2 * L**2 * special.gamma(beta - a) ** 2)


def novikov_horizon(m: float, M: float, L: float, H: float, beta: float) -> float:
    """Largest ``T`` with ``T^{2H+1}`` below the A2 ratio."""
    return a2_ratio(m, M, L, H, beta) ** (1.0 / (2 * H + 1))


def default_beta(H: float) -> float:
    """Hölder exponent used when none is given: inside the admissible window."""
    hp = as_hurst(H)
    if hp.regime is Regime.Singular:
        return 0.5 * (H - 0.25)
    if hp.regime is Regime.Regular:
        return 0.5 * ((H - 0.5) + (H - 0.25))
    return 0.45


def beta_window(H: float, smoothness: float = math.inf) -> tuple[float, float]:
    """Open interval of admissible Hölder exponents for the regime of ``H``."""
    hp = as_hurst(H)
    if hp.regime is Regime.Singular:
        return 0.0, H - 0.25
    if hp.regime is Regime.Regular:
        return H - 0.5, H - 0.25
    return 0.0, 0.5 - (0.0 if math.isinf(smoothness) else 0.5 / smoothness)


@dataclass(frozen=True)
class Condition:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class AssumptionReport:
    regime: Regime
    beta: float
    conditions: tuple[Condition, ...]
    ratio: float | None = None
    horizon: float | None = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def failures(self) -> list[Condition]:
        return [c for c in self.conditions if not c.passed]

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "beta": self.beta,
            "passed": self.passed,
            "ratio": self.ratio,
            "horizon": self.horizon,
            "conditions": [asdict(c) for c in self.conditions],
        }


def check_assumption_A(
    drift: DriftSpec,
    noise: NoiseModel,
    beta: float | None = None,
    smoothness: float | None = None,
    n_check: int = 2049,
) -> AssumptionReport:
    """Check the general conditions and the regime block A1/A2/A3.

    Never raises on a violated condition; every check is listed in the report.
    """
    H = noise.H
    regime = noise.regime
    beta = default_beta(H) if beta is None else float(beta)
    order = drift.smoothness if smoothness is None else smoothness
    t = np.linspace(0.0, noise.T, n_check)
    sig = np.asarray(noise.sigma.value(t), dtype=float)
    m, M = noise.m, noise.M
    conds = [
        Condition("sigma_positive", bool(m > 0), f"m = {m:.6g}"),
        Condition(
            "sigma_bounds",
            bool(np.all(sig >= m - 1e-12) and np.all(sig <= M + 1e-12)),
            f"{sig.min():.6g} <= sigma <= {sig.max():.6g} within [m, M] = [{m:.6g}, {M:.6g}]",
        ),
        Condition("holder_gamma_plus_H", noise.gamma + H > 1, f"gamma + H = {noise.gamma + H:.6g}"),
        Condition("drift_bounded", bool(np.isfinite(drift.sup_bound)), f"sup|b| = {drift.sup_bound:.6g}"),
        Condition("drift_C2_in_x", order >= 2, f"x-derivatives available: {order}"),
    ]
    lo, hi = beta_window(H, order)
    conds.append(Condition("beta_window", lo < beta < hi, f"beta = {beta:.6g} must lie in ({lo:.6g}, {hi:.6g})"))
    ratio = horizon = None
    if regime is Regime.Regular:
        L = drift.lipschitz
        conds.append(Condition("lipschitz_finite", bool(np.isfinite(L)), f"L = {L:.6g}"))
        if m > 0 and beta > noise.alpha and np.isfinite(L) and L > 0:
            ratio = float(a2_ratio(m, M, L, H, beta))
            horizon = float(ratio ** (1.0 / (2 * H + 1)))
            ok = ratio > noise.T ** (2 * H + 1)
            conds.append(
                Condition("A2_ratio", ok, f"ratio = {ratio:.6g} must exceed T^(2H+1) = {noise.T ** (2 * H + 1):.6g}")
            )
        elif np.isfinite(L) and L == 0:
            ratio = horizon = math.inf
            conds.append(Condition("A2_ratio", True, "L = 0: ratio is infinite"))
        else:
            conds.append(Condition("A2_ratio", False, "ratio undefined for the given inputs"))
    elif regime is Regime.Standard:
        conds.append(Condition("A3_smoothness", order >= 2, f"order n = {order} must be at least 2"))
    return AssumptionReport(regime, beta, tuple(conds), ratio, horizon)


# ---------------------------------------------------------------------------
# Euler–Lagrange residuals
# ---------------------------------------------------------------------------


def _d_ds(v: np.ndarray, h: float) -> np.ndarray:
    return np.gradient(v, h, edge_order=2)


def el_residual_standard(phi: SampledPath, drift: DriftSpec, noise: NoiseModel) -> SampledPath:
    """``2(d/ds + ∂_x b)[(φ' - b)/σ^2] - ∂_xx b`` on the interior nodes.

    Compact central differences: ``q = (φ' - b)/σ^2`` is formed at cell
    midpoints from the difference quotients, then ``dq/ds`` at node ``k`` is
    ``(q_{k+1/2} - q_{k-1/2})/h`` and ``q_k`` the mean of its two neighbours.
    The stencil is second order up to the first interior node. The returned
    path holds NaN at the two endpoints.
    """
    grid = phi.grid
    t, h = grid.nodes, grid.h
    p = phi.values
    mid = 0.5 * (t[:-1] + t[1:])
    pbar = 0.5 * (p[:-1] + p[1:])
    q = (np.diff(p) / h - drift.b(mid, pbar)) / noise.sigma.value(mid) ** 2
    dq = np.diff(q) / h
    qk = 0.5 * (q[:-1] + q[1:])
    ti, pi = t[1:-1], p[1:-1]
    r = np.full(grid.n, np.nan)
    r[1:-1] = 2.0 * (dq + drift.db_dx(ti, pi) * qk) - drift.d2b_dx2(ti, pi)
    return phi.with_values(r)


def _right_operator(v: np.ndarray, grid: TimeGrid, noise: NoiseModel) -> np.ndarray:
    """``s^{a} I^a_{T-} s^{-a}`` (singular) or ``s^{-a} D^a_{T-} s^{a}`` (regular)."""
    a = noise.alpha
    t = grid.nodes
    out = np.zeros(grid.n)
    if noise.regime is Regime.Singular:
        w = np.zeros(grid.n)
        w[1:] = t[1:] ** (-a) * v[1:]
        mat = fracops.integral_right_matrix(grid, a, ())
        out[1:] = t[1:] ** a * (mat[1:, 1:] @ w[1:])
        return out
    mat = fracops.derivative_right_matrix(grid, a, None)
    out[1:] = t[1:] ** (-a) * (mat[1:] @ (t**a * v))
    return fracops.extrapolate_first(out)


def _el_bracket(phi_dot: SampledPath, x0: float, drift: DriftSpec, noise: NoiseModel):
    grid = phi_dot.grid
    t = grid.nodes
    ops = FractionalOperators.build(noise, grid)
    parts = ops.evaluate(phi_dot.values, float(x0), drift, t)
    image = np.zeros(grid.n)
    image[1:] = t[1:] ** parts.q * parts.chi[1:]
    if parts.q < 0:
        image = fracops.extrapolate_first(image)
    bracket = _right_operator(phi_dot.values - image, grid, noise) / ops.sigma
    return bracket, parts, ops


def el_bracket_fractional(phi_dot: SampledPath, x0: float, drift: DriftSpec, noise: NoiseModel) -> SampledPath:
    """The bracket ``σ^{-1} R(φ̇ - image)`` inside the fractional EL equation."""
    if noise.regime is Regime.Standard:
        raise ValueError("the fractional bracket needs H != 1/2")
    return phi_dot.with_values(_el_bracket(phi_dot, x0, drift, noise)[0])


def el_residual_fractional(
    phi_dot: SampledPath, x0: float, drift: DriftSpec, noise: NoiseModel
) -> SampledPath:
    r"""Residual of the fractional Euler–Lagrange equation (diagnostic).

    ``2(d/ds + ∂_x b(φ))[σ^{-1} R(φ̇ - image)] - d_H ∂_xx b(φ)`` with ``R`` the
    weighted right-sided operator of the regime and ``φ = x0 + K_H^σ φ̇``.
    Endpoints hold NaN.
    """
    if noise.regime is Regime.Standard:
        raise ValueError("use el_residual_standard for H = 1/2")
    t, h = phi_dot.grid.nodes, phi_dot.grid.h
    bracket, parts, ops = _el_bracket(phi_dot, x0, drift, noise)
    phi = parts.phi
    r = 2.0 * (_d_ds(bracket, h) + drift.db_dx(t, phi) * bracket) - ops.dH * drift.d2b_dx2(t, phi)
    r[0] = r[-1] = np.nan
    return phi_dot.with_values(r)


# re-exported for convenience
cumulative_trapezoid_matrix = _cumtrapz_matrix
