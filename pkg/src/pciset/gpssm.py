"""Gaussian process state space models with a linear prior mean.

Each output ``i`` of the transition ``x+ = g(x, u) + w`` is a GP with mean
``A_i x + B_i u`` and squared-exponential covariance

    k_i(a, b) = s_i * exp(-(a - b)^T diag(l_i)^-2 (a - b)),

over the stacked input ``a = [x; u]``, with i.i.d. observation noise
``w ~ N(0, diag(q))``. Fitting is two-stage: ordinary least squares for
``(A, B)``, then per-output maximization of the log marginal likelihood of the
residuals.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

LOG_SIGNAL_BOUNDS = (-20.0, 5.0)
LOG_LENGTHSCALE_BOUNDS = (-5.0, 12.0)
LOG_NOISE_BOUNDS = (-20.0, 5.0)


class RankDeficientError(ValueError):
    """The regressors ``[x, u]`` do not span all input directions."""


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    """``N`` transitions ``(x_j, u_j) -> x_j^+``, stored row-wise."""

    X: np.ndarray
    U: np.ndarray
    Xplus: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        U = np.asarray(self.U, dtype=float)
        U = U.reshape(X.shape[0], -1) if U.size else np.zeros((X.shape[0], 0))
        Xp = np.atleast_2d(np.asarray(self.Xplus, dtype=float))
        if X.shape[0] < 1:
            raise ValueError("dataset needs at least one transition")
        if U.shape[0] != X.shape[0] or Xp.shape != X.shape:
            raise ValueError(f"inconsistent dataset shapes X{X.shape} U{U.shape} Xplus{Xp.shape}")
        if not (np.isfinite(X).all() and np.isfinite(U).all() and np.isfinite(Xp).all()):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "Xplus", Xp)

    @property
    def n(self):
        return self.X.shape[1]

    @property
    def m(self):
        return self.U.shape[1]

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def inputs(self):
        """Stacked GP inputs ``[x_j, u_j]``, shape ``(N, n + m)``."""
        return np.hstack([self.X, self.U])

    @classmethod
    def from_trajectory(cls, X, U):
        """Transitions of a single trajectory: ``X`` holds states ``x_0..x_k``, ``U`` inputs ``u_0..u_{k-1}``
        (a trailing extra input row is ignored)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.asarray(U, dtype=float).reshape(len(U), -1)
        k = min(len(U), len(X) - 1)
        return cls(X[:k], U[:k], X[1 : k + 1])


@dataclass(frozen=True)
class SquaredExpKernel:
    """Stationary ARD squared-exponential kernel ``s exp(-sum_d (a_d - b_d)^2 / l_d^2)``."""

    signal_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).ravel()
        s = float(self.signal_variance)
        if not s > 0 or not np.isfinite(s):
            raise ValueError(f"signal variance must be positive, got {s}")
        if np.any(~(ls > 0)) or not np.isfinite(ls).all():
            raise ValueError("lengthscales must be positive and finite")
        object.__setattr__(self, "signal_variance", s)
        object.__setattr__(self, "lengthscales", ls)

    def __call__(self, A, B=None):
        A = np.atleast_2d(A) / self.lengthscales
        B = A if B is None else np.atleast_2d(B) / self.lengthscales
        return self.signal_variance * np.exp(-cdist(A, B, "sqeuclidean"))

    def diag(self, A):
        return np.full(np.atleast_2d(A).shape[0], self.signal_variance)


def _cholesky_with_jitter(K):
    """Cholesky of ``K`` with escalating diagonal jitter (3 retries, x10 growth)."""
    try:
        return linalg.cho_factor(K, lower=True, check_finite=False), 0.0
    except linalg.LinAlgError:
        pass
    jitter = 1e-10 * np.trace(K) / K.shape[0]
    for _ in range(3):
        try:
            Kj = K + jitter * np.eye(K.shape[0])
            return linalg.cho_factor(Kj, lower=True, check_finite=False), jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise linalg.LinAlgError("kernel matrix not positive definite even with jitter")


@dataclass
class PosteriorMoments:
    mean: np.ndarray
    variance: np.ndarray  # diagonal entries xi_i

    @property
    def cov(self):
        return np.diag(self.variance)


@dataclass
class GpssmModel:
    """Fitted GPSSM. Treat as immutable; factorizations are cached on construction."""

    A: np.ndarray
    B: np.ndarray
    noise: np.ndarray  # diagonal of Q
    kernels: list
    data: Dataset
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=float).reshape(n, -1)
        self.noise = np.asarray(self.noise, dtype=float).ravel()
        if self.A.shape != (n, n) or self.noise.size != n or len(self.kernels) != n:
            raise ValueError("inconsistent model dimensions")
        if np.any(self.noise < 0):
            raise ValueError("noise variances must be nonnegative")
        if self.data.n != n or self.data.m != self.B.shape[1]:
            raise ValueError("dataset dimensions do not match (A, B)")
        for k in self.kernels:
            if not isinstance(k, SquaredExpKernel):
                raise TypeError("only stationary SquaredExpKernel kernels are supported")
            if k.lengthscales.size not in (1, n + self.m):
                raise ValueError(f"kernel needs {n + self.m} lengthscales")
        Z = self.data.inputs
        R = self.residuals
        self._chol, self._alpha, self._jitter = [], [], []
        for i, k in enumerate(self.kernels):
            cf, jit = _cholesky_with_jitter(k(Z) + self.noise[i] * np.eye(self.data.N))
            self._chol.append(cf)
            self._alpha.append(linalg.cho_solve(cf, R[:, i], check_finite=False))
            self._jitter.append(jit)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def Q(self):
        return np.diag(self.noise)

    @property
    def residuals(self):
        """``y_i - ybar_i`` for every output, shape ``(N, n)``."""
        d = self.data
        return d.Xplus - d.X @ self.A.T - d.U @ self.B.T

    @property
    def weights(self):
        """``(K_i + sigma_i^2 I)^-1 (y_i - ybar_i)`` per output, shape ``(N, n)``."""
        return np.column_stack(self._alpha)

    def prior_mean(self, X, U):
        return np.atleast_2d(X) @ self.A.T + np.atleast_2d(U).reshape(len(np.atleast_2d(X)), -1) @ self.B.T

    def posterior_batch(self, X, U, full_variance=True):
        """Posterior moments at ``R`` query points; returns ``(mean, var)`` each ``(R, n)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.asarray(U, dtype=float).reshape(X.shape[0], -1)
        Zq = np.hstack([X, U])
        Z = self.data.inputs
        mean = self.prior_mean(X, U)
        var = np.empty_like(mean)
        for i, k in enumerate(self.kernels):
            Kq = k(Z, Zq)  # (N, R)
            mean[:, i] += Kq.T @ self._alpha[i]
            if full_variance:
                V = linalg.solve_triangular(self._chol[i][0], Kq, lower=True, check_finite=False)
                var[:, i] = k.diag(Zq) - (V**2).sum(0)
            else:
                var[:, i] = k.signal_variance
        return mean, np.clip(var, 0.0, None)

    def mean_correction(self, X, U):
        """GP part of the posterior mean, ``mu(x, u) - (A x + B u)``."""
        mean, _ = self.posterior_batch(X, U, full_variance=False)
        return mean - self.prior_mean(X, U)


def posterior(model: GpssmModel, x, u) -> PosteriorMoments:
    """Exact posterior moments of ``g(x, u)`` given the training data."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if x.size != model.n or u.size != model.m:
        raise ValueError(f"expected x in R^{model.n} and u in R^{model.m}")
    mean, var = model.posterior_batch(x[None], u[None])
    return PosteriorMoments(mean[0], var[0])


def sample_posterior_step(model: GpssmModel, x, u, rng) -> np.ndarray:
    """Draw ``g(x, u) | D ~ N(mu, Sigma)`` and add process noise ``w ~ N(0, Q)``."""
    rng = np.random.default_rng(rng)
    mom = posterior(model, x, u)
    z = rng.standard_normal((2, model.n))
    return mom.mean + np.sqrt(mom.variance) * z[0] + np.sqrt(model.noise) * z[1]


# ---------------------------------------------------------------- fitting


def fit_mean(data: Dataset):
    """Least-squares linear mean ``x+ ~ A x + B u``; returns ``(A, B, residuals)``."""
    Z = data.inputs
    if data.N < Z.shape[1]:
        raise RankDeficientError(f"need at least n + m = {Z.shape[1]} transitions, got {data.N}")
    _, sv, Vt = np.linalg.svd(Z, full_matrices=False)
    deficient = sv <= sv.max() * max(Z.shape) * np.finfo(float).eps
    if np.any(deficient):
        dirs = "; ".join(np.array2string(v, precision=3) for v in Vt[deficient])
        raise RankDeficientError(f"regressors [x, u] are rank deficient along direction(s): {dirs}")
    theta, *_ = np.linalg.lstsq(Z, data.Xplus, rcond=None)
    A = theta[: data.n].T
    B = theta[data.n :].T
    return A, B, data.Xplus - Z @ theta


def _neg_log_marginal(theta, Z, y, D2):
    """Negative log marginal likelihood and gradient in log parameters."""
    N, dim = Z.shape
    s = np.exp(theta[0])
    ell2 = np.exp(2.0 * theta[1 : 1 + dim])
    noise = np.exp(theta[-1])
    scaled = D2 @ (1.0 / ell2)
    Kf = s * np.exp(-scaled)
    K = Kf + noise * np.eye(N)
    c, info = linalg.lapack.dpotrf(K, lower=1)
    if info != 0:
        return np.inf, np.zeros_like(theta)
    alpha = linalg.cho_solve((c, True), y, check_finite=False)
    nll = 0.5 * y @ alpha + np.log(np.diag(c)).sum() + 0.5 * N * np.log(2 * np.pi)
    Kinv, info = linalg.lapack.dpotri(c, lower=1)
    if info != 0:
        return np.inf, np.zeros_like(theta)
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    W = Kinv - np.outer(alpha, alpha)
    WK = W * Kf
    grad = np.empty_like(theta)
    grad[0] = 0.5 * WK.sum()
    grad[1 : 1 + dim] = np.einsum("ij,ijd->d", WK, D2) / ell2
    grad[-1] = 0.5 * noise * np.trace(W)
    return nll, grad


@dataclass
class KernelFit:
    kernels: list
    noise: np.ndarray
    log_marginal_likelihood: np.ndarray
    diagnostics: dict


def fit_kernels(data: Dataset, residuals, restarts: int = 5, seed: int = 0) -> KernelFit:
    """Per-output marginal-likelihood fit of ``(s_i, l_i, sigma_i^2)`` to the residuals.

    Uses L-BFGS-B in log space from ``restarts`` starting points (the first is
    data-driven, the rest random); the best local optimum wins. Deterministic
    for a given ``seed``.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    Z = data.inputs
    R = np.asarray(residuals, dtype=float).reshape(data.N, data.n)
    N, dim = Z.shape
    D2 = (Z[:, None, :] - Z[None, :, :]) ** 2
    bounds = [LOG_SIGNAL_BOUNDS] + [LOG_LENGTHSCALE_BOUNDS] * dim + [LOG_NOISE_BOUNDS]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    span = Z.std(0)
    span[span == 0] = 1.0
    streams = np.random.SeedSequence(seed).spawn(data.n)

    kernels, noise, lml = [], np.empty(data.n), np.empty(data.n)
    diag = {"rejected_restarts": [], "degenerate_outputs": [], "restart_values": []}
    for i in range(data.n):
        y = R[:, i]
        rng = np.random.default_rng(streams[i])
        v = y.var()
        if np.abs(y).max(initial=0.0) < 1e-12:
            diag["degenerate_outputs"].append(i)
            warnings.warn(f"output {i}: residuals are identically zero; hyperparameters pushed to the noise floor")
        v = max(v, 1e-12)
        starts = [np.r_[np.log(v), np.log(span), np.log(0.1 * v)]]
        for _ in range(restarts - 1):
            starts.append(np.r_[rng.uniform(np.log(v) - 6, np.log(v) + 1), np.log(span) + rng.uniform(-2, 4, dim),
                                rng.uniform(np.log(v) - 6, np.log(v))])
        best, values = None, []
        for r, x0 in enumerate(starts):
            x0 = np.clip(x0, lo, hi)
            f0, _ = _neg_log_marginal(x0, Z, y, D2)
            if not np.isfinite(f0):
                diag["rejected_restarts"].append({"output": i, "restart": r, "reason": "non-finite start"})
                continue
            res = optimize.minimize(_neg_log_marginal, x0, args=(Z, y, D2), jac=True, method="L-BFGS-B", bounds=bounds)
            if not np.isfinite(res.fun):
                diag["rejected_restarts"].append({"output": i, "restart": r, "reason": "non-finite optimum"})
                continue
            values.append(float(-res.fun))
            if best is None or res.fun < best.fun:
                best = res
        diag["restart_values"].append(values)
        if best is None:
            raise FitError(f"output {i}: every restart produced a non-finite likelihood")
        th = best.x
        kernels.append(SquaredExpKernel(np.exp(th[0]), np.exp(th[1 : 1 + dim])))
        noise[i] = np.exp(th[-1])
        lml[i] = -best.fun
        log.debug("output %d: log marginal likelihood %.4f", i, lml[i])
    return KernelFit(kernels, noise, lml, diag)


def fit_gpssm(data: Dataset, restarts: int = 5, seed: int = 0) -> GpssmModel:
    A, B, R = fit_mean(data)
    kf = fit_kernels(data, R, restarts=restarts, seed=seed)
    diag = dict(kf.diagnostics)
    diag["log_marginal_likelihood"] = kf.log_marginal_likelihood.tolist()
    return GpssmModel(A, B, kf.noise, kf.kernels, data, diag)


# ---------------------------------------------------------------- bounds


@dataclass(frozen=True)
class UncertaintyBounds:
    """Constants bounding the GP uncertainty.

    ``phi`` bounds the squared norm of the mean correction; ``sigma_hat`` holds
    the prior (stationary) variances ``s_i`` dominating every posterior
    variance; ``noise`` is the diagonal of ``Q``.
    """

    phi: float
    sigma_hat: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        sh = np.atleast_1d(np.asarray(self.sigma_hat, dtype=float)).ravel()
        q = np.atleast_1d(np.asarray(self.noise, dtype=float)).ravel()
        if sh.size != q.size:
            raise ValueError("sigma_hat and noise must have the same length")
        if self.phi < 0 or np.any(sh < 0) or np.any(q < 0):
            raise ValueError("bounds must be nonnegative")
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "sigma_hat", sh)
        object.__setattr__(self, "noise", q)

    @property
    def n(self):
        return self.sigma_hat.size

    @property
    def q_bar(self):
        """``BlkDiag(Sigma_hat, Q)``, shape ``(2n, 2n)``."""
        return np.diag(np.r_[self.sigma_hat, self.noise])


PHI_RULES = ("rkhs", "bounded", "signed")


def compute_phi(model: GpssmModel, rule: str = "rkhs", check_samples: int = 256, seed: int = 0) -> float:
    """Bound ``phi`` with ``||mu_hat(x, u)||^2 <= phi`` for every query point.

    ``rule="rkhs"`` (default) uses ``sum_i s_i alpha_i^T K_i alpha_i``: the
    correction ``mu_hat_i = sum_j alpha_ij k_i(., z_j)`` has squared RKHS norm
    ``alpha_i^T K_i alpha_i`` and the reproducing property gives
    ``|mu_hat_i(z)| <= sqrt(k_i(z, z)) ||mu_hat_i||``. ``rule="bounded"`` uses ``sum_i (s_i max(sum alpha_i^+, sum alpha_i^-))^2``,
    which holds for any kernel with ``0 <= k_i <= s_i``. ``rule="signed"``
    uses ``sum_i (s_i 1^T alpha_i)^2``; the two agree whenever each weight
    vector ``alpha_i`` has a single sign, but the signed form is not a bound
    in general.

    With ``check_samples > 0`` the bound is checked at random query points
    spread over (and beyond) the data's bounding box, raising on violation.
    """
    W = model.weights
    s = np.array([k.signal_variance for k in model.kernels])
    if rule == "rkhs":
        Z = model.data.inputs
        per = np.sqrt(np.clip([s[i] * W[:, i] @ k(Z) @ W[:, i] for i, k in enumerate(model.kernels)], 0, None))
    elif rule == "signed":
        per = s * W.sum(0)
    elif rule == "bounded":
        per = s * np.maximum(np.clip(W, 0, None).sum(0), np.clip(-W, 0, None).sum(0))
    else:
        raise ValueError(f"unknown rule {rule!r}")
    phi = float(np.sum(per**2))
    if check_samples and rule != "signed":
        Z = model.data.inputs
        lo, hi = Z.min(0), Z.max(0)
        pad = 0.5 * (hi - lo) + 1e-6
        rng = np.random.default_rng(seed)
        Zq = np.vstack([rng.uniform(lo - pad, hi + pad, (check_samples, Z.shape[1])),
                        Z[rng.integers(0, len(Z), min(check_samples, len(Z)))]])
        mh = model.mean_correction(Zq[:, : model.n], Zq[:, model.n :])
        worst = (mh**2).sum(1).max()
        if worst > phi * (1 + 1e-9) + 1e-300:
            raise AssertionError(f"mean-correction bound violated: {worst:.6e} > phi = {phi:.6e}")
    return phi


def uncertainty_bounds(model: GpssmModel, rule: str = "rkhs", **kw) -> UncertaintyBounds:
    return UncertaintyBounds(
        compute_phi(model, rule=rule, **kw),
        np.array([k.signal_variance for k in model.kernels]),
        model.noise.copy(),
    )


def theta(bounds: UncertaintyBounds, p: float, n: int | None = None) -> np.ndarray:
    """Outer shape ``2 phi I + 2n/(1-p) (Sigma_hat + Q)`` of the one-step disturbance set."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"probability level must lie in [0, 1), got {p}")
    n = bounds.n if n is None else n
    if n != bounds.n:
        raise ValueError(f"state dimension {n} does not match bounds ({bounds.n})")
    return 2.0 * bounds.phi * np.eye(n) + (2.0 * n / (1.0 - p)) * np.diag(bounds.sigma_hat + bounds.noise)
