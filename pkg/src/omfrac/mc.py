"""Monte Carlo ensembles of the SDE and empirical small-ball probabilities."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fbm import NoiseModel, PathKind, iter_path_blocks, sample_paths
from .grid import NormKind, NormSpec, SampledPath, TimeGrid, batch_path_norm, quadrature
from .om import DriftSpec, check_assumption_A


@dataclass(frozen=True)
class SDEConfig:
    drift: DriftSpec
    noise: NoiseModel
    x0: float
    grid: TimeGrid
    n_paths: int
    seed: int = 0
    antithetic: bool = False
    beta: float | None = None

    def __post_init__(self) -> None:
        if int(self.n_paths) < 1:
            raise ValueError("n_paths must be at least 1")


@dataclass(frozen=True, eq=False)
class SDEEnsemble:
    """Trajectories of ``X`` (rows) together with the driving noise paths."""

    grid: TimeGrid
    samples: np.ndarray = field(repr=False)
    noise_samples: np.ndarray = field(repr=False)
    seed: int
    x0: float

    @property
    def n_paths(self) -> int:
        return self.samples.shape[0]


def simulate_sde_ensemble(cfg: SDEConfig) -> SDEEnsemble:
    """Euler drift with exact noise increments.

    ``X_{k+1} = X_k + b(t_k, X_k) Δ + (U_{t_{k+1}} - U_{t_k})`` where ``U`` are
    exact samples of ``∫ σ dB^H``. The state is stored as ``x0 + U + D`` with
    ``D`` the accumulated drift, so a zero drift reproduces ``x0 + U`` exactly.
    A failing Assumption (A) only warns: the simulation remains meaningful.
    """
    report = check_assumption_A(cfg.drift, cfg.noise, cfg.beta)
    if not report.passed:
        names = ", ".join(c.name for c in report.failures())
        warnings.warn(f"Assumption (A) fails ({names}); the OM functional does not apply", stacklevel=2)
    ens = sample_paths(cfg.noise, cfg.grid, int(cfg.n_paths), cfg.seed, PathKind.IntegralPaths, cfg.antithetic)
    U = ens.samples
    t, h = cfg.grid.nodes, cfg.grid.h
    X = np.empty_like(U)
    D = np.zeros(U.shape[0])
    X[:, 0] = cfg.x0 + U[:, 0]
    for k in range(cfg.grid.n - 1):
        D = D + cfg.drift.b(t[k], X[:, k]) * h
        X[:, k + 1] = cfg.x0 + U[:, k + 1] + D
    return SDEEnsemble(cfg.grid, X, U, int(cfg.seed), float(cfg.x0))


def _rows(ensemble) -> tuple[TimeGrid, np.ndarray]:
    samples = np.atleast_2d(ensemble.samples)
    if samples.shape[0] == 0:
        raise ValueError("empty ensemble")
    return ensemble.grid, samples


def empirical_mean_path(ensemble, mask: np.ndarray | None = None) -> SampledPath:
    """Nodewise arithmetic mean of the rows selected by ``mask`` (default all).

    The reduction runs in a fixed order, so the result does not depend on how
    the paths were produced.
    """
    grid, s = _rows(ensemble)
    if mask is not None:
        s = s[np.asarray(mask, dtype=bool)]
        if s.shape[0] == 0:
            raise ValueError("no paths selected")
    return SampledPath(grid, s.mean(axis=0))


def transition_fraction(ensemble, threshold: float = 0.0) -> float:
    """Fraction of paths whose terminal value exceeds ``threshold``."""
    _, s = _rows(ensemble)
    return float(np.mean(s[:, -1] > threshold))


def conditioned_mean_path(ensemble, threshold: float = 0.0) -> SampledPath:
    """Mean of the paths that end above ``threshold``."""
    _, s = _rows(ensemble)
    return empirical_mean_path(ensemble, s[:, -1] > threshold)


def endpoint_window_mean_path(ensemble, target: float, halfwidth: float) -> SampledPath:
    """Mean of the paths whose terminal value lies within ``halfwidth`` of ``target``.

    Conditioning on ``X_T > threshold`` concentrates the surviving paths near
    the threshold as the noise shrinks; this window comparator instead pins
    the endpoint near the MPP's terminal state.
    """
    _, s = _rows(ensemble)
    return empirical_mean_path(ensemble, np.abs(s[:, -1] - target) < halfwidth)


def l2_distance(a: SampledPath, b: SampledPath) -> float:
    return math.sqrt(quadrature(a.with_values((a.values - b.values) ** 2)))


# ---------------------------------------------------------------------------
# Small balls
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmallBallConfig:
    noise: NoiseModel
    norm: NormSpec
    epsilons: tuple[float, ...] | None
    n_samples: int
    seed: int = 0
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(1.0, 257))

    def __post_init__(self) -> None:
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be at least 1")
        if self.epsilons is not None:
            eps = tuple(float(e) for e in self.epsilons)
            if not eps or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
                raise ValueError("epsilons must be positive and strictly decreasing")
            object.__setattr__(self, "epsilons", eps)
        if self.norm.kind is NormKind.Holder and not self.norm.beta < self.noise.H:
            raise ValueError("the Hölder exponent must be below H")


@dataclass(frozen=True)
class SmallBallRow:
    epsilon: float
    p_hat: float
    stderr: float
    reliable: bool


@dataclass(frozen=True)
class SmallBallTable:
    rows: tuple[SmallBallRow, ...]
    n_samples: int

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.array([r.epsilon for r in self.rows]),
            np.array([r.p_hat for r in self.rows]),
            np.array([r.stderr for r in self.rows]),
        )


def wilson_stderr(p: float, n: int) -> float:
    """Half-width of the one-sigma Wilson score interval."""
    return math.sqrt(p * (1 - p) / n + 1.0 / (4 * n * n)) / (1.0 + 1.0 / n)


def sample_norms(noise: NoiseModel, grid: TimeGrid, norm: NormSpec, n_samples: int, seed: int) -> np.ndarray:
    """Norms of ``n_samples`` exact paths of ``∫ σ dB^H``, computed blockwise."""
    out = [batch_path_norm(block, grid, norm) for block in iter_path_blocks(noise, grid, n_samples, seed)]
    return np.concatenate(out)


def auto_epsilons(
    noise: NoiseModel,
    norm: NormSpec,
    grid: TimeGrid,
    seed: int = 0,
    n_pilot: int = 1000,
    n_points: int = 8,
    p_range: tuple[float, float] = (1e-3, 0.5),
) -> tuple[float, ...]:
    """Geometric schedule whose pilot probabilities span ``p_range``."""
    pilot = sample_norms(noise, grid, norm, n_pilot, seed + 7919)
    lo, hi = np.quantile(pilot, [p_range[0], p_range[1]])
    return tuple(float(e) for e in np.geomspace(hi, lo, n_points))


def small_ball_estimate(cfg: SmallBallConfig) -> SmallBallTable:
    """``P̂(ε)``: fraction of sampled paths with norm at most ``ε``.

    All epsilons share one sample set, so ``P̂`` is nondecreasing in ``ε``.
    Rows with fewer than 10 hits are flagged unreliable (and warned about).
    """
    eps = cfg.epsilons or auto_epsilons(cfg.noise, cfg.norm, cfg.grid, cfg.seed)
    norms = np.sort(sample_norms(cfg.noise, cfg.grid, cfg.norm, int(cfg.n_samples), cfg.seed))
    n = norms.size
    rows = []
    for e in eps:
        hits = int(np.searchsorted(norms, e, side="right"))
        p = hits / n
        ok = hits >= 10
        if not ok:
            warnings.warn(f"P̂({e:.4g}) = {p:.3g} rests on {hits} hits; unreliable", stacklevel=2)
        rows.append(SmallBallRow(float(e), p, wilson_stderr(p, n), ok))
    return SmallBallTable(tuple(rows), n)


@dataclass(frozen=True)
class ExponentFit:
    slope: float
    intercept: float
    r2: float
    n_rows: int


def small_ball_exponent_fit(table: SmallBallTable | Sequence[tuple[float, float]]) -> ExponentFit:
    """Least-squares fit of ``ln(-ln P̂) = slope ln(1/ε) + intercept`` over reliable rows.

    Accepts a :class:`SmallBallTable` or plain ``(ε, P̂)`` pairs (all treated as
    reliable). Rows with ``P̂`` equal to 0 or 1 carry no information and are
    dropped.
    """
    if isinstance(table, SmallBallTable):
        pts = [(r.epsilon, r.p_hat) for r in table.rows if r.reliable]
    else:
        pts = [(float(e), float(p)) for e, p in table]
    pts = [(e, p) for e, p in pts if 0.0 < p < 1.0]
    if len(pts) < 4:
        raise ValueError(f"need at least 4 reliable rows, got {len(pts)}")
    e, p = np.array(pts).T
    x = np.log(1.0 / e)
    y = np.log(-np.log(p))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return ExponentFit(float(slope), float(intercept), float(r2), len(pts))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def write_columns(path: str | Path, columns: dict[str, Sequence[float]]) -> Path:
    """CSV with a header row, ``.`` decimals and LF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(len(cols[0])):
            w.writerow([repr(float(c[i])) for c in cols])
    return path
