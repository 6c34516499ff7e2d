"""Fitting a GP state-space model and bounding its uncertainty.

A damped pendulum is linearized by least squares; the residual nonlinearity is
learned by one squared-exponential GP per state. The fitted model then yields
the scalars and matrices that drive controller design: the mean-error bound
phi, the posterior variance ceiling and the process noise.
"""

import warnings

import numpy as np

from pciset.gpssm import Dataset, compute_phi, fit_gpssm, posterior, theta, uncertainty_bounds

dt = 0.05
rng = np.random.default_rng(1)


def pendulum(x, u):
    th, om = x[..., 0], x[..., 1]
    return np.stack([th + dt * om, om + dt * (-9.81 * np.sin(th) - 0.2 * om + u[..., 0])], axis=-1)


X = rng.uniform(-0.5, 0.5, (80, 2))
U = rng.uniform(-2, 2, (80, 1))
Xp = pendulum(X, U) + 1e-3 * rng.standard_normal((80, 2))

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    model = fit_gpssm(Dataset(X, U, Xp), restarts=3, seed=0)

print("linear part A:\n", np.round(model.A, 4))
print("linear part B:\n", np.round(model.B, 4))
for i, k in enumerate(model.kernels):
    print(f"state {i}: signal variance {k.signal_variance:.3g}, lengthscales {np.round(k.lengthscales, 3)}")

# Inside the data the posterior tracks the pendulum. Far outside it falls back on the
# linear part, which misses the swing, while the variance rises to the prior.
for x in ([0.3, 0.0], [3.0, 0.0]):
    mom = posterior(model, np.array(x), np.zeros(1))
    print(f"x = {x}: true {pendulum(np.array(x), np.zeros(1))}, mean {mom.mean}, var {mom.variance}")

for rule in ("rkhs", "bounded", "signed"):
    print(f"phi ({rule}): {compute_phi(model, rule):.3e}")

bounds = uncertainty_bounds(model)
for p in (0.5, 0.9, 0.99):
    print(f"Theta({p}) eigenvalues: {np.linalg.eigvalsh(theta(bounds, p))}")
