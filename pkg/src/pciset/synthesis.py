"""Joint design of an ellipsoidal probabilistic invariant set and a state-feedback gain.

For fixed probability level ``p`` and contraction factor ``eta`` the design is
an SDP in ``W = P^-1`` and ``M = L W``:

* ``[[W, A W + B M], [., eta W]] >= 0``: the nominal closed loop maps
  ``E(0, W)`` into ``E(0, eta W)``;
* ``Theta^-1/2 W Theta^-1/2 >= (1 - sqrt(eta))^-2 I``: the shrunken ellipsoid
  plus the disturbance set ``E(0, Theta(p))`` still fits inside ``E(0, W)``;
* ``beta_i^T W beta_i <= 1``: the ellipsoid lies in the state polytope;
* ``[[W, M^T zeta_j], [., 1]] >= 0``: its image under ``L`` lies in the input
  polytope.

The largest certifiable ``p`` is found by bisection, sweeping a grid of
``eta`` at each level and keeping the largest-volume feasible cell.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import sdp
from .ellipsoid import inv_psd_sqrt
from .gpssm import UncertaintyBounds, theta
from .invariance import PolytopeConstraints, constraint_margins
from .lmi import Affine, BlockLmi, LmiProblem, ScalarIneq, rect, sym

log = logging.getLogger(__name__)

W_LOWER = 1e-8
VOLUME_TIE_RTOL = 1e-5
CERT_RTOL = 1e-7


class SynthesisInfeasible(RuntimeError):
    """No eta cell is feasible even at ``p = 0``."""

    def __init__(self, message, cells=()):
        super().__init__(message)
        self.cells = list(cells)


def default_eta_grid(count: int = 20) -> np.ndarray:
    return np.linspace(0.05, 0.95, count)


@dataclass
class SynthesisConfig:
    delta: float = 1e-3
    eta_grid: np.ndarray = field(default_factory=default_eta_grid)
    p_init: float = 0.5
    tolerance: float = sdp.DEFAULT_TOL
    max_iterations: int = sdp.DEFAULT_MAX_ITER
    solver: str = "CLARABEL"
    jobs: int = 1

    def __post_init__(self):
        self.eta_grid = np.atleast_1d(np.asarray(self.eta_grid, dtype=float)).ravel()
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.eta_grid.size == 0:
            raise ValueError("eta grid is empty")
        if np.any((self.eta_grid <= 0) | (self.eta_grid >= 1)):
            raise ValueError("every eta must lie in the open interval (0, 1)")
        if not 0.0 <= self.p_init < 1.0:
            raise ValueError("p_init must lie in [0, 1)")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")

    def to_dict(self):
        d = asdict(self)
        d["eta_grid"] = self.eta_grid.tolist()
        return d


@dataclass
class CellResult:
    p: float
    eta: float
    status: str
    solve_ms: float
    logdet: float | None = None
    W: np.ndarray | None = None
    M: np.ndarray | None = None
    residual: float | None = None

    @property
    def feasible(self):
        return self.status == sdp.Status.FEASIBLE.value

    def log_entry(self):
        return {"p": self.p, "eta": self.eta, "status": self.status, "solve_ms": self.solve_ms, "logdet": self.logdet}


@dataclass
class PciResult:
    P: np.ndarray
    L: np.ndarray
    M: np.ndarray
    W: np.ndarray
    p_star: float
    eta_star: float
    logdet: float
    p_low: float
    p_up: float
    iterations: int
    feasibility_log: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def volume_proxy(self):
        """``log det P^-1``, proportional to the log volume of ``E(0, P^-1)``."""
        return self.logdet


# ---------------------------------------------------------------- SDP cell


def build_design_sdp(A, B, bounds: UncertaintyBounds, constraints: PolytopeConstraints, p: float,
                     eta: float) -> LmiProblem:
    """Design SDP in ``W`` (n x n symmetric) and ``M`` (m x n) at fixed ``p`` and ``eta``.

    The disturbance-margin block is omitted when ``Theta(p) = 0``.

    Raises
    ------
    ValueError
        If ``eta`` is not in (0, 1), ``p`` is not in [0, 1), or ``Theta(p)`` is
        singular but nonzero.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in the open interval (0, 1), got {eta}")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    m = B.shape[1]
    Th = theta(bounds, p, n)

    prob = LmiProblem()
    W = prob.declare(sym("W", n, lower=W_LOWER))
    M = prob.declare(rect("M", m, n))
    prob.add_lmi(BlockLmi(
        (n, n),
        {(0, 0): Affine.of(W), (0, 1): Affine.of(W, A) + Affine.of(M, B), (1, 1): eta * Affine.of(W)},
        name="contraction",
    ))
    if np.any(Th != 0):
        H = inv_psd_sqrt(Th)
        gap = (1.0 - math.sqrt(eta)) ** -2
        prob.add_lmi(BlockLmi((n,), {(0, 0): Affine.of(W, H, H, const=-gap * np.eye(n))}, name="disturbance_margin"))
    for i, beta in enumerate(constraints.state_rows):
        row = beta.reshape(1, -1)
        prob.add_scalar(ScalarIneq(Affine.of(W, -row, row.T, const=1.0), name=f"state[{i}]"))
    for j, zeta in enumerate(constraints.input_rows):
        prob.add_lmi(BlockLmi(
            (n, 1),
            {(0, 0): Affine.of(W), (0, 1): Affine.of(M, None, zeta.reshape(-1, 1), transpose=True),
             (1, 1): Affine(1.0)},
            name=f"input[{j}]",
        ))
    return prob


def _solve_cell(args) -> CellResult:
    A, B, bounds, constraints, p, eta, tol, iters, solver = args
    t0 = time.perf_counter()
    try:
        prob = build_design_sdp(A, B, bounds, constraints, p, eta)
        out = sdp.maximize_logdet(prob, "W", tolerance=tol, max_iterations=iters, solver=solver)
    except np.linalg.LinAlgError as exc:
        log.warning("cell p=%.6g eta=%.4g failed: %s", p, eta, exc)
        return CellResult(p, eta, sdp.Status.INACCURATE.value, 1e3 * (time.perf_counter() - t0))
    ms = 1e3 * (time.perf_counter() - t0)
    if out.point is None:
        return CellResult(p, eta, out.status.value, ms)
    return CellResult(p, eta, out.status.value, ms, out.objective_value, out.point["W"], out.point["M"], out.residual)


def _sweep(A, B, bounds, constraints, p, config: SynthesisConfig, pool=None) -> list[CellResult]:
    tasks = [(A, B, bounds, constraints, p, float(e), config.tolerance, config.max_iterations, config.solver)
             for e in config.eta_grid]
    cells = list(pool.map(_solve_cell, tasks)) if pool is not None else [_solve_cell(t) for t in tasks]
    for c in cells:
        if c.status not in (sdp.Status.FEASIBLE.value, sdp.Status.INFEASIBLE.value):
            log.info("cell p=%.6g eta=%.4g: %s (treated as infeasible)", c.p, c.eta, c.status)
    return cells


def select_cell(cells: list[CellResult]) -> CellResult | None:
    """Largest log det among feasible cells; near-ties go to the smallest eta."""
    ok = [c for c in cells if c.feasible]
    if not ok:
        return None
    best = max(c.logdet for c in ok)
    near = [c for c in ok if c.logdet >= best - VOLUME_TIE_RTOL * max(1.0, abs(best))]
    return min(near, key=lambda c: c.eta)


# ---------------------------------------------------------------- bisection


@dataclass
class BisectionResult:
    p_low: float
    p_up: float
    iterations: int
    history: list


def bisect_probability(oracle: Callable[[float], bool], delta: float = 1e-3, p_init: float = 0.5,
                       p_low: float = 0.0, p_up: float = 1.0) -> BisectionResult:
    """Locate the feasibility boundary of a monotone (non-increasing) oracle on [p_low, p_up].

    Each iteration queries ``oracle(p)``, moves ``p_low`` up on success or
    ``p_up`` down on failure, then sets ``p`` to the midpoint. Stops once
    ``p_up - p_low <= delta``.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    p = p_init
    history = []
    while p_up - p_low > delta:
        ok = bool(oracle(p))
        history.append((p, ok))
        if ok:
            p_low = p
        else:
            p_up = p
        p = 0.5 * (p_low + p_up)
    return BisectionResult(p_low, p_up, len(history), history)


def expected_iterations(delta: float, width: float = 1.0) -> int:
    return math.ceil(math.log2(width / delta))


def synthesize(A, B, bounds: UncertaintyBounds, constraints: PolytopeConstraints,
               config: SynthesisConfig | None = None) -> PciResult:
    """Largest probability level (within ``delta``) with a feasible design, and its best cell.

    Raises
    ------
    SynthesisInfeasible
        If no cell is feasible even at ``p = 0``.
    """
    config = config or SynthesisConfig()
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    best_at: dict[float, CellResult] = {}
    log_entries: list[dict] = []

    pool = ProcessPoolExecutor(max_workers=config.jobs) if config.jobs > 1 else None
    try:
        def oracle(p):
            cells = _sweep(A, B, bounds, constraints, p, config, pool)
            log_entries.extend(c.log_entry() for c in cells)
            chosen = select_cell(cells)
            if chosen is not None:
                best_at[p] = chosen
            log.info("p=%.6f: %d/%d eta cells feasible", p, sum(c.feasible for c in cells), len(cells))
            return chosen is not None

        bis = bisect_probability(oracle, config.delta, config.p_init)
        if bis.p_low not in best_at:
            # nothing feasible during the bisection: p_low is still the floor
            cells = _sweep(A, B, bounds, constraints, bis.p_low, config, pool)
            log_entries.extend(c.log_entry() for c in cells)
            chosen = select_cell(cells)
            if chosen is None:
                nearest = sorted((c for c in cells if c.residual is not None), key=lambda c: c.residual)
                detail = ", ".join(f"eta={c.eta:.3f} residual={c.residual:.2e}" for c in nearest[:3])
                raise SynthesisInfeasible(
                    f"no eta cell is feasible at p={bis.p_low:g}" + (f" (closest: {detail})" if detail else ""), cells
                )
            best_at[bis.p_low] = chosen
    finally:
        if pool is not None:
            pool.shutdown()

    cell = best_at[bis.p_low]
    W = cell.W
    P = np.linalg.inv(W)
    P = np.triu(P) + np.triu(P, 1).T
    L = np.linalg.solve(W, cell.M.T).T
    return PciResult(P=P, L=L, M=cell.M, W=W, p_star=bis.p_low, eta_star=cell.eta, logdet=cell.logdet,
                     p_low=bis.p_low, p_up=bis.p_up, iterations=bis.iterations, feasibility_log=log_entries,
                     config=config.to_dict())


# ---------------------------------------------------------------- checks


def certificate_margins(result: PciResult, A, B, bounds: UncertaintyBounds,
                        constraints: PolytopeConstraints) -> dict:
    """Independent numpy re-evaluation of every guarantee of a design.

    Returns the contraction excess ``lambda_max(Acl^T P Acl - eta P) / ||P||``,
    the disturbance-margin ratio ``lambda_min(H W H) (1 - sqrt(eta))^2`` (``inf``
    without disturbance), and the state/input support-function values.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    P, L, eta = result.P, result.L, result.eta_star
    Acl = A + B @ L
    excess = np.linalg.eigvalsh(Acl.T @ P @ Acl - eta * P).max() / np.linalg.norm(P, 2)
    Th = theta(bounds, result.p_star, A.shape[0])
    if np.any(Th != 0):
        H = inv_psd_sqrt(Th)
        ratio = np.linalg.eigvalsh(H @ result.W @ H).min() * (1.0 - math.sqrt(eta)) ** 2
    else:
        ratio = math.inf
    state, inputs = constraint_margins(P, L, constraints)
    gain_err = np.linalg.norm(L - result.M @ P) / max(np.linalg.norm(L), 1e-300)
    return {"contraction_excess": float(excess), "margin_ratio": float(ratio), "state": state, "input": inputs,
            "gain_error": float(gain_err)}


def certificate_holds(margins: dict, rtol: float = CERT_RTOL) -> bool:
    return (
        margins["contraction_excess"] <= rtol
        and margins["margin_ratio"] >= 1.0 - rtol
        and bool(np.all(margins["state"] <= 1.0 + rtol))
        and bool(np.all(margins["input"] <= 1.0 + rtol))
    )


def feasibility_is_monotone_check(A, B, bounds: UncertaintyBounds, constraints: PolytopeConstraints, eta: float,
                                  p_samples, tolerance: float = sdp.DEFAULT_TOL) -> bool:
    """True iff the design feasibility indicator is non-increasing along ascending ``p_samples``."""
    p_samples = np.asarray(p_samples, dtype=float)
    if np.any(np.diff(p_samples) < 0):
        raise ValueError("p_samples must be sorted ascending")
    flags = [sdp.solve(build_design_sdp(A, B, bounds, constraints, float(p), eta), tolerance=tolerance).feasible
             for p in p_samples]
    return all(a >= b for a, b in zip(flags, flags[1:]))


def margin_constraint_holds(eta: float, Theta: float, W: float) -> bool:
    """Scalar form of the implemented margin: ``Theta^-1/2 W Theta^-1/2 >= (1 - sqrt(eta))^-2``."""
    return W / Theta >= (1.0 - math.sqrt(eta)) ** -2


def geometric_margin_holds(eta: float, Theta: float, W: float) -> bool:
    """``|psi| <= sqrt(eta W)`` and ``|phi| <= sqrt(Theta)`` imply ``|psi + phi| <= sqrt(W)``."""
    return math.sqrt(eta * W) + math.sqrt(Theta) <= math.sqrt(W)
