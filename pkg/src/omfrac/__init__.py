"""Onsager–Machlup functionals and most probable paths for SDEs driven by
fractional Brownian motion with a time-varying diffusion coefficient."""

from importlib.metadata import PackageNotFoundError, version

from .fbm import GaussianEnsemble, HurstParam, NoiseModel, PathKind, Regime, Sigma, compute_dH, sample_paths
from .grid import NormKind, NormSpec, SampledPath, TimeGrid, path_norm
from .mc import (
    SDEConfig,
    SmallBallConfig,
    conditioned_mean_path,
    empirical_mean_path,
    simulate_sde_ensemble,
    small_ball_estimate,
    small_ball_exponent_fit,
    transition_fraction,
)
from .mpp import MPPProblem, MPPResult, OptimizerConfig, solve_mpp
from .om import DriftSpec, OMEvaluation, check_assumption_A, evaluate_om, om_regular, om_singular, om_standard

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover - source checkout without install
    __version__ = "0.1.0"

__all__ = [
    "DriftSpec",
    "GaussianEnsemble",
    "HurstParam",
    "MPPProblem",
    "MPPResult",
    "NoiseModel",
    "NormKind",
    "NormSpec",
    "OMEvaluation",
    "OptimizerConfig",
    "PathKind",
    "Regime",
    "SDEConfig",
    "SampledPath",
    "Sigma",
    "SmallBallConfig",
    "TimeGrid",
    "check_assumption_A",
    "compute_dH",
    "conditioned_mean_path",
    "empirical_mean_path",
    "evaluate_om",
    "om_regular",
    "om_singular",
    "om_standard",
    "path_norm",
    "sample_paths",
    "simulate_sde_ensemble",
    "small_ball_estimate",
    "small_ball_exponent_fit",
    "solve_mpp",
    "transition_fraction",
    "__version__",
]
