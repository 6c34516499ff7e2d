"""Ellipsoid calculus: Chebyshev confidence regions and Minkowski sums.

A random vector with mean mu and covariance Sigma lies in E(mu, n / (1 - p) Sigma)
with probability at least p, whatever its distribution. This script checks that
on a heavy-tailed sample and then bounds the sum of two ellipsoidal sets.
"""

import numpy as np

from pciset.ellipsoid import Ellipsoid, chebyshev_region, contains, minkowski_outer_bound, sample_uniform

rng = np.random.default_rng(0)
mu = np.array([1.0, -1.0])
F = np.array([[1.0, 0.0], [0.5, 0.5]])
Sigma = F @ F.T

# Student-t with 3 degrees of freedom, scaled to unit variance
X = mu + (rng.standard_t(3, (50_000, 2)) / np.sqrt(3.0)) @ F.T
for p in (0.5, 0.9, 0.99):
    region = chebyshev_region(mu, Sigma, p)
    inside = np.mean([contains(region, x) for x in X[:5000]])
    print(f"p = {p:.2f}: empirical coverage {inside:.3f}")

# The sum of two ellipsoids is not an ellipsoid; E(0, 2 (S1 + S2)) contains it.
e1 = Ellipsoid([0.0, 0.0], np.diag([1.0, 0.1]))
e2 = Ellipsoid([0.0, 0.0], np.diag([0.1, 1.0]))
outer = minkowski_outer_bound(e1, e2)
pts = sample_uniform(e1, 2000, rng, boundary=True) + sample_uniform(e2, 2000, rng, boundary=True)
print("outer bound shape:\n", outer.shape)
print("all boundary sums inside the bound:", all(contains(outer, x) for x in pts))
