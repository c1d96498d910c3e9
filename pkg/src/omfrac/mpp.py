"""Most probable transition paths by direct maximization of the OM functional.

The problem is discretized first and then optimized:

* ``H = 1/2``: the unknowns are the interior node values of ``φ``; the
  endpoints are pinned and the cell-midpoint action of :mod:`omfrac.om` is
  maximized.
* ``H != 1/2``: the unknown is the control ``u = φ̇`` on all nodes with
  ``φ = x0 + K_H^σ u``. The terminal condition ``φ(T) = x1`` is enforced by an
  augmented Lagrangian whose penalty weight doubles every outer round.

Each inner problem is solved by BFGS with analytic gradients, followed by a
few Newton steps on a finite-difference Hessian of that gradient, which
drives the gradient to rounding level. The Euler–Lagrange residual of the
standard case is then available as an independent optimality certificate.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, optimize

from .fbm import NoiseModel, Regime, apply_KH_sigma_inverse, kh_sigma_matrix
from .grid import SampledPath, TimeGrid, trapezoid_weights
from .om import (
    DriftSpec,
    FractionalOperators,
    check_assumption_A,
    el_residual_standard,
    standard_action_cells,
)

SEED_NAMES = ("linear", "zero", "tanh")


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 2000
    grad_tol: float = 1e-9
    newton_steps: int = 8
    max_rounds: int = 20
    gap_tol: float = 1e-6


@dataclass(frozen=True)
class MPPProblem:
    """Boundary-value data for the most probable path from ``x0`` to ``x1``."""

    x0: float
    x1: float
    drift: DriftSpec
    noise: NoiseModel
    grid: TimeGrid
    penalty: float = 100.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    beta: float | None = None

    def __post_init__(self) -> None:
        if not self.penalty > 0:
            raise ValueError("penalty weight must be positive")
        if abs(self.grid.T - self.noise.T) > 1e-12:
            raise ValueError("grid horizon and noise horizon differ")


@dataclass(frozen=True, eq=False)
class MPPResult:
    phi: SampledPath
    phi_dot: SampledPath | None
    J: float
    kinetic: float
    divergence: float
    boundary_gap: float
    grad_norm: float
    iterations: int
    converged: bool
    seed: str
    seed_J: dict
    candidates: dict = field(default_factory=dict, repr=False)

    def diagnostics(self) -> dict:
        return {
            "J": self.J,
            "kinetic": self.kinetic,
            "divergence": self.divergence,
            "boundary_gap": self.boundary_gap,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "seed": self.seed,
            "seed_J": self.seed_J,
            "candidates": self.candidates,
        }


class AssumptionError(ValueError):
    """Raised when Assumption (A) fails for a requested computation."""

    def __init__(self, report):
        self.report = report
        names = ", ".join(f"{c.name} ({c.detail})" for c in report.failures())
        super().__init__(f"assumption check failed: {names}")


def _seed_paths(problem: MPPProblem) -> dict[str, np.ndarray]:
    t = problem.grid.nodes / problem.grid.T
    x0, x1 = problem.x0, problem.x1
    k = 8.0
    ramp = (np.tanh(k * (t - 0.5)) + math.tanh(k / 2)) / (2.0 * math.tanh(k / 2))
    zero = np.full_like(t, x0)
    zero[-1] = x1
    return {"linear": x0 + (x1 - x0) * t, "zero": zero, "tanh": x0 + (x1 - x0) * ramp}


def _newton_polish(fun_grad, x: np.ndarray, steps: int, tol: float) -> tuple[np.ndarray, int]:
    """Newton iterations with a symmetric finite-difference Hessian and backtracking."""
    it = 0
    f, g = fun_grad(x)
    for it in range(1, steps + 1):
        if np.max(np.abs(g)) <= tol:
            break
        eps = 1e-6 * (1.0 + np.abs(x))
        hess = np.empty((x.size, x.size))
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = eps[i]
            hess[:, i] = (fun_grad(x + e)[1] - fun_grad(x - e)[1]) / (2 * eps[i])
        hess = 0.5 * (hess + hess.T)
        try:
            step = -linalg.solve(hess, g, assume_a="sym")
        except linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or np.dot(step, g) >= 0:
            break
        lam = 1.0
        while lam > 1e-8:
            fn, gn = fun_grad(x + lam * step)
            if fn <= f + 1e-4 * lam * np.dot(g, step) or np.max(np.abs(gn)) < np.max(np.abs(g)):
                break
            lam *= 0.5
        else:
            break
        x, f, g = x + lam * step, fn, gn
    return x, it


def _minimize(fun_grad, x0: np.ndarray, cfg: OptimizerConfig) -> tuple[np.ndarray, int]:
    res = optimize.minimize(
        fun_grad, x0, jac=True, method="BFGS",
        options={"maxiter": cfg.max_iters, "gtol": cfg.grad_tol},
    )
    x = res.x
    polish_steps = cfg.newton_steps if x.size <= 1200 else 0
    x, extra = _newton_polish(fun_grad, x, polish_steps, cfg.grad_tol * 1e-3)
    return x, int(res.nit) + extra


# ---------------------------------------------------------------------------
# Standard regime
# ---------------------------------------------------------------------------


def _standard_objective(problem: MPPProblem):
    grid, drift, noise = problem.grid, problem.drift, problem.noise
    t, h = grid.nodes, grid.h
    mid = 0.5 * (t[:-1] + t[1:])
    smid = noise.sigma.value(mid)
    w = trapezoid_weights(grid)

    def full(interior: np.ndarray) -> np.ndarray:
        return np.concatenate([[problem.x0], interior, [problem.x1]])

    def fun_grad(interior: np.ndarray) -> tuple[float, np.ndarray]:
        phi = full(interior)
        pbar = 0.5 * (phi[:-1] + phi[1:])
        r = (np.diff(phi) / h - drift.b(mid, pbar)) / smid
        db = drift.db_dx(mid, pbar)
        val = 0.5 * h * np.dot(r, r) + 0.5 * np.dot(w, drift.db_dx(t, phi))
        g = np.zeros_like(phi)
        g[1:] += h * r * (1.0 / h - 0.5 * db) / smid
        g[:-1] += h * r * (-1.0 / h - 0.5 * db) / smid
        g += 0.5 * w * drift.d2b_dx2(t, phi)
        return float(val), g[1:-1]

    return fun_grad, full


def _solve_standard(problem: MPPProblem) -> MPPResult:
    fun_grad, full = _standard_objective(problem)
    cands: dict = {}
    seed_J = {}
    for name, path in _seed_paths(problem).items():
        kin, div = standard_action_cells(path, problem.grid, problem.drift, problem.noise)
        seed_J[name] = kin + div
        x, its = _minimize(fun_grad, path[1:-1].copy(), problem.optimizer)
        f, g = fun_grad(x)
        cands[name] = (-f, float(np.max(np.abs(g))), x, its)
    name = _pick(cands)
    Jv, gnorm, x, its = cands[name]
    phi = full(x)
    kin, div = standard_action_cells(phi, problem.grid, problem.drift, problem.noise)
    return MPPResult(
        SampledPath(problem.grid, phi), None, kin + div, kin, div,
        abs(phi[-1] - problem.x1), gnorm, its,
        bool(gnorm <= problem.optimizer.grad_tol), name, seed_J,
        {k: {"J": v[0], "grad_norm": v[1]} for k, v in cands.items()},
    )


def _pick(cands: dict) -> str:
    """Highest ``J`` wins; ties within 1e-10 go to the smallest gradient norm."""
    best = max(v[0] for v in cands.values())
    tied = [k for k, v in cands.items() if v[0] >= best - 1e-10]
    return min(tied, key=lambda k: (cands[k][1], SEED_NAMES.index(k) if k in SEED_NAMES else 99))


# ---------------------------------------------------------------------------
# Fractional regimes
# ---------------------------------------------------------------------------


def _solve_fractional(problem: MPPProblem) -> MPPResult:
    grid, drift, noise = problem.grid, problem.drift, problem.noise
    t = grid.nodes
    ops = FractionalOperators.build(noise, grid)
    row = ops.ksig[-1]
    w0 = ops.w0
    target = problem.x1 - problem.x0
    cfg = problem.optimizer

    def J_parts(u):
        p = ops.evaluate(u, problem.x0, drift, t)
        return p, p.kinetic + p.divergence

    def project(u: np.ndarray) -> np.ndarray:
        """Least-norm correction onto ``row @ u = x1 - x0``."""
        d = row / w0
        return u + (target - row @ u) / (row @ d) * d

    seeds = {}
    for name, path in _seed_paths(problem).items():
        if name == "zero":
            u = np.zeros(grid.n)
        else:
            inc = SampledPath(grid, np.concatenate([[0.0], path[1:] - problem.x0]))
            u = apply_KH_sigma_inverse(inc, noise).values
        seeds[name] = project(u)

    cands: dict = {}
    seed_J = {}
    for name, u in seeds.items():
        seed_J[name] = J_parts(u)[1]
        lam, rho = 0.0, problem.penalty
        its = 0
        for _ in range(cfg.max_rounds):
            def fun_grad(v, lam=lam, rho=rho):
                p, Jv = J_parts(v)
                gap = row @ v - target
                val = -Jv + lam * gap + 0.5 * rho * gap * gap
                grad = -ops.gradient(v, p, drift, t) + (lam + rho * gap) * row
                return float(val), grad

            u, k = _minimize(fun_grad, u, cfg)
            its += k
            gap = row @ u - target
            lam += rho * gap
            rho *= 2.0
            if abs(gap) <= cfg.gap_tol:
                break
        p, Jv = J_parts(u)
        kkt = -ops.gradient(u, p, drift, t) + lam * row
        cands[name] = (Jv, float(np.max(np.abs(kkt))), u, its, abs(row @ u - target))
    name = _pick(cands)
    Jv, gnorm, u, its, gap = cands[name]
    p, _ = J_parts(u)
    return MPPResult(
        SampledPath(grid, p.phi), SampledPath(grid, u), Jv, p.kinetic, p.divergence,
        float(abs(p.phi[-1] - problem.x1)), gnorm, its,
        bool(gap <= cfg.gap_tol and gnorm <= max(cfg.grad_tol, 1e-7)),
        name, seed_J,
        {k: {"J": v[0], "grad_norm": v[1], "boundary_gap": v[4]} for k, v in cands.items()},
    )


def solve_mpp(problem: MPPProblem, check_assumptions: bool = True) -> MPPResult:
    """Maximize ``J`` over paths from ``x0`` to ``x1``.

    Raises :class:`AssumptionError` if Assumption (A) fails (unless
    ``check_assumptions`` is false). Non-convergence is reported through
    ``converged`` rather than raised.
    """
    if check_assumptions:
        report = check_assumption_A(problem.drift, problem.noise, problem.beta)
        if not report.passed:
            raise AssumptionError(report)
    if problem.noise.regime is Regime.Standard:
        return _solve_standard(problem)
    return _solve_fractional(problem)


def least_norm_control(noise: NoiseModel, grid: TimeGrid, x0: float, x1: float) -> np.ndarray:
    """Minimizer of ``∫ u^2`` (trapezoid) subject to ``(K_H^σ u)(T) = x1 - x0``."""
    row = kh_sigma_matrix(noise, grid)[-1]
    sw = np.sqrt(trapezoid_weights(grid))
    # substitute v = sqrt(w) u: minimal Euclidean norm solution of (row/sw) v = Δx
    v = np.linalg.lstsq((row / sw)[None, :], np.array([x1 - x0]), rcond=None)[0]
    return v / sw


def write_result(result: MPPResult, path: str | Path, noise: NoiseModel | None = None, drift: DriftSpec | None = None) -> tuple[Path, Path]:
    """CSV ``t,phi[,phi_dot][,el_residual]`` plus JSON diagnostics."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = {"t": result.phi.t, "phi": result.phi.values}
    if result.phi_dot is not None:
        cols["phi_dot"] = result.phi_dot.values
    elif noise is not None and drift is not None:
        cols["el_residual"] = el_residual_standard(result.phi, drift, noise).values
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(cols))
        for k in range(result.phi.grid.n):
            w.writerow([repr(float(v[k])) for v in cols.values()])
    side = path.with_suffix(".json")
    side.write_text(json.dumps(result.diagnostics(), indent=2, default=float) + "\n")
    return path, side
