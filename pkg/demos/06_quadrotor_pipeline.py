"""Synthetic planar quadrotor, end to end.

Collect 500 noisy transitions of a drag-affected double integrator in each
axis, fit the GP model, design the invariant set and gain, and validate with
10^4 rollouts of 100 steps on the ground truth. Pass --quick for a smaller run.
"""

import logging
import sys
import time
import warnings

from pciset.pipeline import QuadrotorDemoConfig, run_quadrotor_demo

logging.basicConfig(level=logging.INFO, format="%(message)s")
quick = "--quick" in sys.argv
config = QuadrotorDemoConfig(n_rollouts=1000, horizon=50) if quick else QuadrotorDemoConfig()

t0 = time.perf_counter()
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    run = run_quadrotor_demo(config)
elapsed = time.perf_counter() - t0

print(f"p* = {run.pci.p_star:.4f}, eta* = {run.pci.eta_star:.3f}")
print("P =\n", run.pci.P.round(4))
print("L =\n", run.pci.L.round(4))
r = run.report
print(f"min_k containment {r.min_k_containment.value:.4f}, all-time safety {r.all_time_safety.value:.4f}, "
      f"input admissibility {r.input_admissibility.value:.4f}")
print(f"wall time {elapsed:.1f} s")
