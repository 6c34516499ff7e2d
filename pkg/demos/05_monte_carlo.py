"""Monte Carlo validation of a design on the true system.

Closed-loop rollouts start uniformly inside the designed ellipsoid. The report
gives the fraction that stay inside at every step, the fraction that respect
the state and input constraints, and Wilson confidence intervals for each.
"""

import numpy as np

from pciset.gpssm import UncertaintyBounds
from pciset.invariance import PolytopeConstraints
from pciset.simulator import LinearTruth, RolloutConfig, monte_carlo
from pciset.synthesis import SynthesisConfig, synthesize

dt = 0.1
A = np.array([[1.0, dt], [0.0, 1.0]])
B = np.array([[0.5 * dt**2], [dt]])
noise = np.array([1e-5, 1e-5])
bounds = UncertaintyBounds(1e-5, noise, noise)
cons = PolytopeConstraints.box([-5, -5], [5, 5], [-10], [10])
design = synthesize(A, B, bounds, cons, SynthesisConfig(eta_grid=np.linspace(0.5, 0.95, 6), delta=1e-2))

truth = LinearTruth(A, B, noise)
report = monte_carlo(truth, design.P, design.L, cons, RolloutConfig(horizon=100, n_rollouts=5000, seed=0))
for name in ("min_k_containment", "all_time_containment", "all_time_safety", "input_admissibility"):
    e = getattr(report, name)
    print(f"{name:22s} {e.value:.4f}  [{e.ci_low:.4f}, {e.ci_high:.4f}]")
print(f"design level p* = {design.p_star:.4f}")

# Noise a thousand times larger than the design assumed.
report = monte_carlo(LinearTruth(A, B, 1e3 * noise), design.P, design.L, cons,
                     RolloutConfig(horizon=100, n_rollouts=5000, seed=0))
print(f"noise x1000: min_k containment {report.min_k_containment.value:.4f}")
