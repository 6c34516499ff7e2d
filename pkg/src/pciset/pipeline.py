"""End-to-end run on the synthetic planar quadrotor: collect data, fit, design, validate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .gpssm import Dataset, GpssmModel, UncertaintyBounds, fit_gpssm, uncertainty_bounds
from .invariance import PolytopeConstraints
from .simulator import GroundTruth, McReport, QuadrotorParams, RolloutConfig, ground_truth_quadrotor, monte_carlo
from .synthesis import PciResult, SynthesisConfig, synthesize

log = logging.getLogger(__name__)

# stabilizing per-axis feedback used while collecting data
COLLECTION_GAIN = np.kron(np.eye(2), np.array([[-1.0, -1.5]]))


@dataclass
class QuadrotorDemoConfig:
    n_samples: int = 500
    params: QuadrotorParams = field(default_factory=lambda: QuadrotorParams(dt=0.1, drag=0.05, gain=1.0))
    # process noise variances of (x_x, v_x, x_y, v_y)
    noise: tuple = (1e-6, 1e-5, 1e-6, 1e-5)
    exploration_std: float = 1.0
    initial_spread: float = 2.0
    state_box: tuple = (5.0, 7.0, 5.0, 7.0)
    input_box: tuple = (5.0, 5.0)
    restarts: int = 5
    seed: int = 0
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    n_rollouts: int = 10_000
    horizon: int = 100

    def constraints(self):
        s, u = np.asarray(self.state_box), np.asarray(self.input_box)
        return PolytopeConstraints.box(-s, s, -u, u)

    def truth(self):
        return GroundTruth(ground_truth_quadrotor, np.asarray(self.noise), self.params)


@dataclass
class QuadrotorDemoResult:
    data: Dataset
    model: GpssmModel
    bounds: UncertaintyBounds
    pci: PciResult
    report: McReport | None
    constraints: PolytopeConstraints


def collect_quadrotor_data(config: QuadrotorDemoConfig) -> Dataset:
    """One closed-loop trajectory under a stabilizing gain plus Gaussian exploration inputs."""
    rng = np.random.default_rng(config.seed)
    truth = config.truth()
    N = config.n_samples
    X = np.empty((N + 1, 4))
    U = np.empty((N, 2))
    X[0] = rng.uniform(-config.initial_spread, config.initial_spread, 4)
    for k in range(N):
        U[k] = COLLECTION_GAIN @ X[k] + config.exploration_std * rng.standard_normal(2)
        X[k + 1] = truth.advance(X[k][None], U[k][None], rng.standard_normal((1, 4)))[0]
    return Dataset.from_trajectory(X, U)


def run_quadrotor_demo(config: QuadrotorDemoConfig | None = None, simulate: bool = True) -> QuadrotorDemoResult:
    config = config or QuadrotorDemoConfig()
    data = collect_quadrotor_data(config)
    model = fit_gpssm(data, restarts=config.restarts, seed=config.seed)
    bounds = uncertainty_bounds(model)
    log.info("phi=%.3g sigma_hat=%s Q=%s", bounds.phi, bounds.sigma_hat, bounds.noise)
    cons = config.constraints()
    pci = synthesize(model.A, model.B, bounds, cons, config.synthesis)
    report = None
    if simulate:
        rc = RolloutConfig(horizon=config.horizon, n_rollouts=config.n_rollouts, seed=config.seed,
                           jobs=config.synthesis.jobs)
        report = monte_carlo(config.truth(), pci.P, pci.L, cons, rc)
    return QuadrotorDemoResult(data, model, bounds, pci, report, cons)
