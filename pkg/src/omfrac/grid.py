"""Uniform time grids, sampled paths, quadrature and path norms.

Every operator in the package acts on values sampled at the nodes of a
uniform grid ``t_k = k * T / (n - 1)`` on ``[0, T]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

#: Largest grid on which the Hölder seminorm scans every pair of nodes.
EXHAUSTIVE_HOLDER_LIMIT = 4096


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[0, T]`` with ``n`` nodes."""

    T: float = 1.0
    n: int = 129

    def __post_init__(self) -> None:
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"grid horizon must be positive, got T={self.T}")
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"grid needs at least 3 nodes, got n={self.n}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n", int(self.n))

    @property
    def t0(self) -> float:
        return 0.0

    @property
    def h(self) -> float:
        """Grid spacing."""
        return self.T / (self.n - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n, dtype=float) * self.h
        t[-1] = self.T
        t.setflags(write=False)
        return t

    def sample(self, fn: Callable[[np.ndarray], np.ndarray]) -> "SampledPath":
        """Evaluate a vectorized function on the nodes."""
        return SampledPath(self, np.broadcast_to(fn(self.nodes), (self.n,)).astype(float))

    def zeros(self) -> "SampledPath":
        return SampledPath(self, np.zeros(self.n))


def make_uniform_grid(T: float = 1.0, n: int = 129) -> TimeGrid:
    """Build a uniform grid, rejecting ``T <= 0`` and ``n < 3``."""
    return TimeGrid(T=T, n=n)


@dataclass(frozen=True, eq=False)
class SampledPath:
    """A real function sampled on the nodes of a :class:`TimeGrid`."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float, copy=True)
        if v.shape != (self.grid.n,):
            raise ValueError(
                f"path has shape {v.shape}, grid expects ({self.grid.n},)"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def t(self) -> np.ndarray:
        return self.grid.nodes

    def __len__(self) -> int:
        return self.grid.n

    def with_values(self, values: np.ndarray) -> "SampledPath":
        return SampledPath(self.grid, values)


class NormKind(enum.Enum):
    Sup = "sup"
    Holder = "holder"


@dataclass(frozen=True)
class NormSpec:
    """Either the sup norm or the full β-Hölder norm ``|f_0| + [f]_β``."""

    kind: NormKind = NormKind.Sup
    beta: float | None = None

    def __post_init__(self) -> None:
        kind = NormKind(self.kind) if not isinstance(self.kind, NormKind) else self.kind
        object.__setattr__(self, "kind", kind)
        if kind is NormKind.Holder:
            if self.beta is None or not (0.0 < self.beta < 1.0):
                raise ValueError(f"Hölder norm needs 0 < beta < 1, got {self.beta}")
        elif self.beta is not None:
            raise ValueError("sup norm takes no exponent")

    @classmethod
    def sup(cls) -> "NormSpec":
        return cls(NormKind.Sup)

    @classmethod
    def holder(cls, beta: float) -> "NormSpec":
        return cls(NormKind.Holder, beta)


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.n, grid.h)
    w[0] = w[-1] = 0.5 * grid.h
    return w


def quadrature(f: SampledPath) -> float:
    """Composite trapezoid approximation of ``∫_0^T f dt``."""
    return float(np.dot(trapezoid_weights(f.grid), f.values))


def power_weight_quadrature_weights(grid: TimeGrid, p: float) -> np.ndarray:
    """Weights ``w`` with ``Σ w_k v_k = ∫_0^T s^p v(s) ds`` for piecewise-linear ``v``.

    The power weight is integrated exactly against the hat functions, so the
    rule stays second order when ``s^p`` is singular at the origin (``p > -1``).
    """
    if p <= -1.0:
        raise ValueError("power weight must be integrable (p > -1)")
    if p == 0.0:
        return trapezoid_weights(grid)
    t = grid.nodes
    a, b = t[:-1], t[1:]
    m0 = (b ** (p + 1) - a ** (p + 1)) / (p + 1)
    m1 = (b ** (p + 2) - a ** (p + 2)) / (p + 2)
    w = np.zeros(grid.n)
    w[:-1] += (b * m0 - m1) / grid.h
    w[1:] += (m1 - a * m0) / grid.h
    return w


def weighted_quadrature(f: SampledPath, p: float) -> float:
    """``∫_0^T s^p f(s) ds`` with ``f`` piecewise linear and ``s^p`` exact."""
    return float(np.dot(power_weight_quadrature_weights(f.grid, p), f.values))


def holder_seminorm(values: np.ndarray, h: float, beta: float) -> np.ndarray:
    """β-Hölder seminorm of sampled paths along the last axis.

    Accepts a single path or a stack of paths (one per row). Every lag is
    scanned up to :data:`EXHAUSTIVE_HOLDER_LIMIT` nodes; larger grids use
    dyadic lags only.
    """
    v = np.asarray(values, dtype=float)
    n = v.shape[-1]
    if n <= EXHAUSTIVE_HOLDER_LIMIT:
        lags = range(1, n)
    else:
        lags = [1 << j for j in range(int(np.log2(n - 1)) + 1)]
    out = np.zeros(v.shape[:-1])
    for lag in lags:
        d = np.abs(v[..., lag:] - v[..., :-lag]).max(axis=-1)
        np.maximum(out, d / (lag * h) ** beta, out=out)
    return out


def path_norm(f: SampledPath, spec: NormSpec) -> float:
    """Sup norm, or full Hölder norm ``|f_0| + [f]_β``."""
    if spec.kind is NormKind.Sup:
        return float(np.max(np.abs(f.values)))
    semi = holder_seminorm(f.values, f.grid.h, spec.beta)
    return float(abs(f.values[0]) + semi)


def batch_path_norm(values: np.ndarray, grid: TimeGrid, spec: NormSpec) -> np.ndarray:
    """:func:`path_norm` applied to every row of ``values``."""
    v = np.atleast_2d(values)
    if spec.kind is NormKind.Sup:
        return np.abs(v).max(axis=-1)
    return np.abs(v[:, 0]) + holder_seminorm(v, grid.h, spec.beta)
