"""Robust invariant ellipsoids for a linear system with bounded disturbances.

For z+ = A z + B d + C v with d, v in ellipsoids, the S-procedure turns the
requirement "outside E(0, P^-1) the quadratic form decreases" into an LMI in P.
Every certificate is then checked by brute-force sampling.
"""

import numpy as np

from pciset.ellipsoid import Ellipsoid
from pciset.invariance import DisturbedLinearSystem, sampled_invariance_oracle, solve_invariance

A = np.array([[0.8, 0.3], [-0.2, 0.7]])
sys = DisturbedLinearSystem(A, [[1.0], [0.0]], [[0.0], [1.0]], Ellipsoid([0.0], [[0.04]]), Ellipsoid([0.0], [[0.01]]))

rng = np.random.default_rng(0)
for alpha in (0.05, 0.2, 0.4, 0.6):
    out = solve_invariance(sys, alpha=alpha)
    if not out.feasible:
        print(f"alpha = {alpha}: {out.status.value} ({out.message or out.backend_status})")
        continue
    P = out.point["P"]
    area = np.pi / np.sqrt(np.linalg.det(P))
    ok = sampled_invariance_oracle(sys, None, P, 10_000, rng)
    print(f"alpha = {alpha}: invariant ellipse of area {area:.3f}, sampled check passed: {ok}")

# An expanding mode can never be contained.
unstable = DisturbedLinearSystem([[1.5]], [[1.0]], [[1.0]], Ellipsoid([0.0], [[0.01]]), Ellipsoid([0.0], [[1e-9]]))
print("unstable scalar system:", solve_invariance(unstable, alpha=0.3).status.value)
