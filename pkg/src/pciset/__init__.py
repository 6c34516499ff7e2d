"""Probabilistic invariant sets and state-feedback design for Gaussian-process state-space models."""

from .ellipsoid import Ellipsoid, chebyshev_region, contains, minkowski_outer_bound
from .gpssm import Dataset, GpssmModel, UncertaintyBounds, fit_gpssm, posterior, theta, uncertainty_bounds
from .invariance import (
    DisturbedLinearSystem,
    PolytopeConstraints,
    build_ris_lmi,
    sampled_invariance_oracle,
    solve_invariance,
    verify_controller,
)
from .simulator import RolloutConfig, ground_truth_quadrotor, monte_carlo, rollout
from .synthesis import PciResult, SynthesisConfig, build_design_sdp, synthesize

__all__ = [
    "Dataset",
    "DisturbedLinearSystem",
    "Ellipsoid",
    "GpssmModel",
    "PciResult",
    "PolytopeConstraints",
    "RolloutConfig",
    "SynthesisConfig",
    "UncertaintyBounds",
    "build_design_sdp",
    "build_ris_lmi",
    "chebyshev_region",
    "contains",
    "fit_gpssm",
    "ground_truth_quadrotor",
    "minkowski_outer_bound",
    "monte_carlo",
    "posterior",
    "rollout",
    "sampled_invariance_oracle",
    "solve_invariance",
    "synthesize",
    "theta",
    "uncertainty_bounds",
    "verify_controller",
]
