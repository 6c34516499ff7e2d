"""Monte Carlo validation of a designed invariant set and gain.

Closed-loop rollouts ``x_{k+1} = f(x_k, L x_k) + noise`` are run either under a
user-supplied ground truth or by sampling the GPSSM posterior independently at
every step. Each rollout draws its initial state and all of its noise from its
own seed stream (spawned from the run seed), so results do not depend on how
rollouts are batched or distributed over workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .ellipsoid import Ellipsoid, sample_uniform
from .gpssm import GpssmModel
from .invariance import PolytopeConstraints

DIVERGENCE_NORM = 1e9
CONTAINMENT_TOL = 1e-9
CHUNK = 5000


# ---------------------------------------------------------------- dynamics


@dataclass(frozen=True)
class QuadrotorParams:
    """Planar double integrator with quadratic drag and an actuator gain."""

    dt: float = 0.1
    drag: float = 0.0
    gain: float = 1.0


def ground_truth_quadrotor(x, u, params: QuadrotorParams = QuadrotorParams()) -> np.ndarray:
    """One noise-free step for states ``(x_x, v_x, x_y, v_y)`` and inputs ``(u_x, u_y)``.

    Acceleration ``a = gain u - drag v |v|`` is held over the step and integrated
    exactly: ``v+ = v + dt a`` and ``p+ = p + dt v + dt^2 a / 2``. Accepts single
    vectors or ``(R, 4)`` / ``(R, 2)`` batches.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    X, U = np.atleast_2d(x), np.atleast_2d(u)
    pos, vel = X[:, [0, 2]], X[:, [1, 3]]
    acc = params.gain * U - params.drag * vel * np.abs(vel)
    dt = params.dt
    out = np.empty_like(X)
    out[:, [0, 2]] = pos + dt * vel + 0.5 * dt**2 * acc
    out[:, [1, 3]] = vel + dt * acc
    return out[0] if single else out


def quadrotor_linear_model(dt: float = 0.1):
    """``(A, B)`` of :func:`ground_truth_quadrotor` with zero drag and unit gain."""
    a = np.array([[1.0, dt], [0.0, 1.0]])
    b = np.array([[0.5 * dt**2], [dt]])
    return np.kron(np.eye(2), a), np.kron(np.eye(2), b)


@dataclass
class GroundTruth:
    """``x+ = step(x, u) + w`` with ``w ~ N(0, diag(noise))``; ``step`` must be picklable for ``jobs > 1``."""

    step: Callable
    noise: np.ndarray
    params: object = None

    def __post_init__(self):
        self.noise = np.atleast_1d(np.asarray(self.noise, dtype=float)).ravel()
        if np.any(self.noise < 0):
            raise ValueError("noise variances must be nonnegative")

    @property
    def n(self):
        return self.noise.size

    def advance(self, X, U, Z):
        nxt = self.step(X, U) if self.params is None else self.step(X, U, self.params)
        return nxt + np.sqrt(self.noise) * Z


@dataclass
class LinearTruth:
    """``x+ = A x + B u + w`` with ``w ~ N(0, diag(noise))``."""

    A: np.ndarray
    B: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float).reshape(self.A.shape[0], -1)
        self.noise = np.broadcast_to(np.asarray(self.noise, dtype=float), (self.A.shape[0],)).copy()

    @property
    def n(self):
        return self.A.shape[0]

    def advance(self, X, U, Z):
        return X @ self.A.T + U @ self.B.T + np.sqrt(self.noise) * Z


@dataclass
class PosteriorDynamics:
    """Independent posterior draw at every step: ``x+ ~ N(mu(x, u), diag(var(x, u) + Q))``."""

    model: GpssmModel

    @property
    def n(self):
        return self.model.n

    def advance(self, X, U, Z):
        mean, var = self.model.posterior_batch(X, U)
        return mean + np.sqrt(var + self.model.noise) * Z


# ---------------------------------------------------------------- rollouts


@dataclass
class RolloutConfig:
    horizon: int = 100
    n_rollouts: int = 10_000
    # "uniform" samples E(0, P^-1); "fixed" uses x0
    initial_state_mode: str = "uniform"
    x0: np.ndarray | None = None
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.horizon < 1 or self.n_rollouts < 1:
            raise ValueError("horizon and n_rollouts must be at least 1")
        if self.initial_state_mode not in ("uniform", "fixed"):
            raise ValueError("initial_state_mode must be 'uniform' or 'fixed'")
        if self.initial_state_mode == "fixed":
            if self.x0 is None:
                raise ValueError("fixed initial state mode needs x0")
            self.x0 = np.asarray(self.x0, dtype=float).ravel()

    def to_dict(self):
        d = asdict(self)
        d["x0"] = None if self.x0 is None else self.x0.tolist()
        return d


def _simulate(dynamics, L, X0, noise):
    """Vectorized closed loop; ``noise`` has shape ``(R, T, n)``. Returns states ``(R, T+1, n)``."""
    R, T, n = noise.shape
    X = np.empty((R, T + 1, n))
    X[:, 0] = X0
    alive = np.isfinite(X0).all(1)
    for k in range(T):
        x = X[:, k]
        nxt = np.full((R, n), np.nan)
        if alive.any():
            xa = x[alive]
            nxt[alive] = dynamics.advance(xa, xa @ L.T, noise[alive, k])
        alive &= np.isfinite(nxt).all(1) & (np.linalg.norm(np.nan_to_num(nxt, nan=np.inf), axis=1) <= DIVERGENCE_NORM)
        nxt[~alive] = np.nan
        X[:, k + 1] = nxt
    return X


def rollout(dynamics, L, x0, T: int, rng=None) -> np.ndarray:
    """Closed-loop trajectory ``(T+1, n)`` under ``u = L x``, starting at ``x0``.

    Divergent states (non-finite or norm above 1e9) become NaN from that step on.
    """
    rng = np.random.default_rng(rng)
    L = np.atleast_2d(np.asarray(L, dtype=float))
    x0 = np.asarray(x0, dtype=float).ravel()
    noise = rng.standard_normal((T, x0.size))
    return _simulate(dynamics, L, x0[None], noise[None])[0]


def _draw(seeds, T, n, P, config: RolloutConfig):
    X0 = np.empty((len(seeds), n))
    noise = np.empty((len(seeds), T, n))
    region = Ellipsoid.from_precision(P) if config.initial_state_mode == "uniform" else None
    for r, s in enumerate(seeds):
        g = np.random.default_rng(s)
        X0[r] = sample_uniform(region, 1, g)[0] if region is not None else config.x0
        noise[r] = g.standard_normal((T, n))
    return X0, noise


def _inside(X, P):
    q = np.einsum("rkn,nm,rkm->rk", np.nan_to_num(X, nan=np.inf), P, np.nan_to_num(X, nan=np.inf))
    return np.isfinite(X).all(-1) & (q <= 1.0 + CONTAINMENT_TOL)


def _chunk(args):
    dynamics, P, L, constraints, seeds, config, keep = args
    n = P.shape[0]
    X0, noise = _draw(seeds, config.horizon, n, P, config)
    X = _simulate(dynamics, L, X0, noise)
    R, K, _ = X.shape
    inE = _inside(X, P)
    flat = X.reshape(-1, n)
    finite = np.isfinite(flat).all(1)
    inX = (constraints.state_ok(np.nan_to_num(flat)) & finite).reshape(R, K)
    U = np.einsum("rkn,mn->rkm", X, L)
    inU = (constraints.input_ok(np.nan_to_num(U.reshape(-1, L.shape[0]))) & finite).reshape(R, K)
    counts = {
        "in_E": inE.sum(0),
        "in_E_and_U": (inE & inU)[:, :-1].sum(0),
        "in_E_inputs": inE[:, :-1].sum(0),
        "always_X": int(inX.all(1).sum()),
        "always_E": int(inE.all(1).sum()),
    }
    dump = None
    if keep:
        dump = (X[:keep], U[:keep], inE[:keep], inX[:keep], inU[:keep])
    return counts, dump


@dataclass
class Estimate:
    value: float
    ci_low: float
    ci_high: float
    successes: int
    trials: int
    step: int | None = None


def wilson(successes: int, trials: int, step=None) -> Estimate:
    if trials == 0:
        return Estimate(1.0, 0.0, 1.0, 0, 0, step)
    ci = stats.binomtest(int(successes), int(trials)).proportion_ci(0.95, method="wilson")
    return Estimate(successes / trials, float(ci.low), float(ci.high), int(successes), int(trials), step)


@dataclass
class McReport:
    min_k_containment: Estimate
    input_admissibility: Estimate
    all_time_safety: Estimate
    all_time_containment: Estimate
    per_step_containment: np.ndarray
    n_rollouts: int
    horizon: int
    config: dict = field(default_factory=dict)
    trajectories: tuple | None = None

    def __post_init__(self):
        if not self.all_time_containment.value <= self.min_k_containment.value <= 1.0:
            raise AssertionError("metric ordering violated")

    def to_dict(self):
        def est(e):
            return asdict(e)

        return {
            "min_k_containment": est(self.min_k_containment),
            "input_admissibility": est(self.input_admissibility),
            "all_time_safety": est(self.all_time_safety),
            "all_time_containment": est(self.all_time_containment),
            "per_step_containment": self.per_step_containment.tolist(),
            "n_rollouts": self.n_rollouts,
            "horizon": self.horizon,
            "config": self.config,
        }


def monte_carlo(dynamics, P, L, constraints: PolytopeConstraints, config: RolloutConfig,
                keep_trajectories: int = 0) -> McReport:
    """Estimate the containment and safety metrics of ``E(0, P^-1)`` under ``u = L x``.

    Metrics, each with a Wilson 95% interval: the minimum over ``k`` of the
    fraction of rollouts with ``x_k`` in the ellipsoid; the minimum over ``k``
    of the fraction with ``L x_k`` admissible among rollouts whose ``x_k`` is
    in the ellipsoid; the fraction that stay in the state polytope for all
    ``k``; the fraction that stay in the ellipsoid for all ``k``. Steps run
    from 0 to ``T`` inclusive. Divergent rollouts count as violations.
    """
    P = np.asarray(P, dtype=float)
    L = np.atleast_2d(np.asarray(L, dtype=float))
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_rollouts)
    batches = [seeds[i : i + CHUNK] for i in range(0, len(seeds), CHUNK)]
    tasks = [(dynamics, P, L, constraints, b, config, keep_trajectories if i == 0 else 0)
             for i, b in enumerate(batches)]
    if config.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_chunk, tasks))
    else:
        results = [_chunk(t) for t in tasks]

    tot = {k: sum(r[0][k] for r in results) for k in results[0][0]}
    R = config.n_rollouts
    per_step = tot["in_E"] / R
    k_min = int(np.argmin(tot["in_E"]))
    cond = np.where(tot["in_E_inputs"] > 0, tot["in_E_and_U"] / np.maximum(tot["in_E_inputs"], 1), np.inf)
    if np.isfinite(cond).any():
        j = int(np.argmin(cond))
        admiss = wilson(tot["in_E_and_U"][j], tot["in_E_inputs"][j], j)
    else:
        admiss = wilson(0, 0)
    return McReport(
        min_k_containment=wilson(tot["in_E"][k_min], R, k_min),
        input_admissibility=admiss,
        all_time_safety=wilson(tot["always_X"], R),
        all_time_containment=wilson(tot["always_E"], R),
        per_step_containment=per_step,
        n_rollouts=R,
        horizon=config.horizon,
        config=config.to_dict(),
        trajectories=results[0][1],
    )


def write_trajectory_csv(path, trajectories) -> None:
    """Columns ``rollout_id, k, x1..xn, u1..um, in_pci, in_X, in_U``."""
    X, U, inE, inX, inU = trajectories
    R, K, n = X.shape
    m = U.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rollout_id", "k", *[f"x{i + 1}" for i in range(n)], *[f"u{j + 1}" for j in range(m)],
                    "in_pci", "in_X", "in_U"])
        for r in range(R):
            for k in range(K):
                w.writerow([r, k, *map(repr, X[r, k].tolist()), *map(repr, U[r, k].tolist()),
                            int(inE[r, k]), int(inX[r, k]), int(inU[r, k])])


def stationary_containment_1d(a: float, q: float, radius: float) -> float:
    """``Pr(|x| <= radius)`` for the stationary law of ``x+ = a x + w``, ``w ~ N(0, q)``."""
    var = q / (1.0 - a * a)
    return float(math.erf(radius / math.sqrt(2.0 * var)))
