"""Designing a probabilistically invariant set and a state-feedback gain.

For a double integrator with small model uncertainty, the design searches the
largest confidence level p for which some contraction rate eta admits an
ellipsoid inside the state box and a gain respecting the input box. Within the
final level the ellipsoid of largest volume wins.
"""

import numpy as np

from pciset.gpssm import UncertaintyBounds
from pciset.invariance import PolytopeConstraints, verify_controller
from pciset.synthesis import SynthesisConfig, certificate_margins, synthesize

dt = 0.1
A = np.array([[1.0, dt], [0.0, 1.0]])
B = np.array([[0.5 * dt**2], [dt]])
bounds = UncertaintyBounds(phi=1e-5, sigma_hat=[1e-5, 1e-5], noise=[1e-5, 1e-5])
cons = PolytopeConstraints.box([-5, -5], [5, 5], [-10], [10])

result = synthesize(A, B, bounds, cons, SynthesisConfig(eta_grid=np.linspace(0.5, 0.95, 10)))
print(f"confidence level p* = {result.p_star:.4f} (bracket [{result.p_low:.4f}, {result.p_up:.4f}])")
print(f"contraction rate eta* = {result.eta_star:.3f}, log det P^-1 = {result.logdet:.3f}")
print("P =\n", result.P)
print("L =", result.L)

# Cells the solver reports as inaccurate count as infeasible, so a level can
# show a stray failure even below p*.
print("\nbisection path:")
levels = {}
for e in result.feasibility_log:
    levels.setdefault(e["p"], []).append(e["status"])
for p, statuses in levels.items():
    print(f"  p = {p:.4f}: {statuses.count('Feasible')} of {len(statuses)} eta cells feasible, "
          f"{statuses.count('Inaccurate')} inaccurate")

print("\nresiduals of the returned certificate:", certificate_margins(result, A, B, bounds, cons))
check = verify_controller(bounds, A, B, result.L, result.p_star, constraints=cons, P=result.P)
print("independent verification:", check.certified, check.message)
