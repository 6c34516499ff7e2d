"""Robust and probabilistic invariance certificates for ellipsoids.

The core object is the S-procedure LMI certifying that ``E(c, P^-1)`` is
robustly positively invariant for ``z+ = A z + B d + C v`` with ``d`` and ``v``
confined to ellipsoids. Probabilistic certificates for GPSSMs reuse it after
replacing the stochastic channel by its Chebyshev confidence ellipsoid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import sdp
from .ellipsoid import Ellipsoid, chebyshev_region, psd_sqrt
from .gpssm import UncertaintyBounds
from .lmi import Affine, BlockLmi, LmiProblem, sym

log = logging.getLogger(__name__)

P_LOWER = 1e-8
ABSENT_CHANNEL_EPS = 1e-12


def default_alpha_grid():
    """25 log-spaced and 25 linearly spaced multipliers in [0.01, 0.99]."""
    return np.unique(np.r_[np.geomspace(0.01, 0.99, 25), np.linspace(0.01, 0.99, 25)])


@dataclass(frozen=True)
class DisturbedLinearSystem:
    """``z+ = A z + B d + C v`` with ``d in d_set`` and ``v in v_set``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    d_set: Ellipsoid
    v_set: Ellipsoid

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        nz = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(nz, -1)
        C = np.asarray(self.C, dtype=float).reshape(nz, -1)
        if A.shape != (nz, nz):
            raise ValueError("A must be square")
        if B.shape[1] != self.d_set.dim or C.shape[1] != self.v_set.dim:
            raise ValueError("disturbance set dimensions do not match B, C")
        for name, e in (("d_set", self.d_set), ("v_set", self.v_set)):
            w = np.linalg.eigvalsh(e.shape)
            if w.min() <= 0:
                raise ValueError(f"{name} shape must be positive definite (use eps*I for absent channels)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def nz(self):
        return self.A.shape[0]

    def step(self, Z, D, V):
        return Z @ self.A.T + D @ self.B.T + V @ self.C.T


def build_ris_lmi(sys: DisturbedLinearSystem, c=None, alpha: float = 0.5) -> LmiProblem:
    """LMI in ``P`` whose feasibility makes ``E(c, P^-1)`` robustly positively invariant.

    Encodes, by the S-procedure with multiplier ``alpha``, the implication
    ``q(z) >= 1, d in D, v in V  =>  q(z+) <= q(z)`` with
    ``q(z) = (z - c)^T P (z - c)``. Block rows are ``z``, ``d``, ``v`` and the
    affine coordinate.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    nz = sys.nz
    c = np.zeros(nz) if c is None else np.asarray(c, dtype=float).ravel()
    A, B, C = sys.A, sys.B, sys.C
    Sdi = np.linalg.inv(sys.d_set.shape)
    Svi = np.linalg.inv(sys.v_set.shape)
    md, mv = sys.d_set.center, sys.v_set.center
    I = np.eye(nz)

    prob = LmiProblem()
    P = prob.declare(sym("P", nz, lower=P_LOWER))
    cc = c.reshape(-1, 1)
    blocks = {
        (0, 0): (1 - alpha) * Affine.of(P) - Affine.of(P, A.T, A),
        (0, 1): -Affine.of(P, A.T, B),
        (0, 2): -Affine.of(P, A.T, C),
        (0, 3): Affine.of(P, (alpha - 1) * I + A.T, cc),
        (1, 1): Affine(0.5 * alpha * Sdi) - Affine.of(P, B.T, B),
        (1, 2): -Affine.of(P, B.T, C),
        (1, 3): Affine.of(P, B.T, cc, const=-0.5 * alpha * (Sdi @ md).reshape(-1, 1)),
        (2, 2): Affine(0.5 * alpha * Svi) - Affine.of(P, C.T, C),
        (2, 3): Affine.of(P, C.T, cc, const=-0.5 * alpha * (Svi @ mv).reshape(-1, 1)),
        # affine corner: -alpha c^T P c + alpha/2 (mu_d' Sd^-1 mu_d + mu_v' Sv^-1 mu_v)
        (3, 3): Affine.of(P, -alpha * cc.T, cc, const=0.5 * alpha * (md @ Sdi @ md + mv @ Svi @ mv)),
    }
    prob.add_lmi(BlockLmi((nz, B.shape[1], C.shape[1], 1), blocks, name="ris"))
    return prob


def contraction_rules_out(A, alpha: float) -> bool:
    """True when ``rho(A)^2 > 1 - alpha``, which makes the invariance LMI infeasible for every ``P``.

    The leading block ``(1 - alpha) P - A^T P A`` can only be PSD with ``P > 0``
    when every eigenvalue of ``A`` has modulus at most ``sqrt(1 - alpha)``.
    Checking this first spares the solver a problem whose infeasibility is only
    approached in the limit ``P -> 0`` and is hard to certify numerically.
    """
    rho = np.abs(np.linalg.eigvals(np.atleast_2d(A))).max()
    return bool(rho**2 > (1.0 - alpha) * (1.0 + 1e-9))


def solve_invariance(sys: DisturbedLinearSystem, c=None, alpha: float = 0.5,
                     tolerance: float = sdp.DEFAULT_TOL) -> sdp.SolveOutcome:
    """Solve the invariance LMI for ``P``; returns ``Infeasible`` early when the spectrum forbids it."""
    if contraction_rules_out(sys.A, alpha):
        return sdp.SolveOutcome(sdp.Status.INFEASIBLE, backend_status="spectral_precheck",
                                message=f"spectral radius of A exceeds sqrt(1 - alpha) = {np.sqrt(1 - alpha):.4g}")
    return sdp.solve(build_ris_lmi(sys, c, alpha), tolerance=tolerance)


def ris_matrix(sys: DisturbedLinearSystem, P, c=None, alpha: float = 0.5) -> np.ndarray:
    """Numeric value of the invariance LMI matrix at a given ``P``."""
    return build_ris_lmi(sys, c, alpha).lmis[0].evaluate({"P": np.asarray(P, dtype=float)})


def pis_from_ris_substitution(cov_bound, p: float, nz: int) -> Ellipsoid:
    """Bounded surrogate ``E(0, nz/(1-p) cov_bound)`` for a zero-mean stochastic channel.

    Certifying robust invariance against this set certifies probabilistic
    invariance at level ``p`` for the stochastic system.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"probability level must lie in [0, 1), got {p}")
    cov_bound = np.atleast_2d(np.asarray(cov_bound, dtype=float))
    return Ellipsoid(np.zeros(cov_bound.shape[0]), nz / (1.0 - p) * cov_bound)


def gpssm_disturbed_system(bounds: UncertaintyBounds, A, B, L, p: float) -> DisturbedLinearSystem:
    """Closed loop ``x+ = (A + B L) x + mu_hat + [I I] w_bar`` as a disturbed linear system."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    Abl = A + np.asarray(B, dtype=float).reshape(n, -1) @ np.atleast_2d(np.asarray(L, dtype=float))
    qbar = bounds.q_bar
    if np.linalg.eigvalsh(qbar).min() <= 0:
        raise ValueError("BlkDiag(Sigma_hat, Q) is singular")
    phi = bounds.phi if bounds.phi > 0 else ABSENT_CHANNEL_EPS
    d_set = Ellipsoid(np.zeros(n), phi * np.eye(n))
    v_set = pis_from_ris_substitution(qbar, p, n)
    return DisturbedLinearSystem(Abl, np.eye(n), np.hstack([np.eye(n), np.eye(n)]), d_set, v_set)


def build_gpssm_verification_lmi(bounds: UncertaintyBounds, A, B, L, p: float, alpha: float) -> LmiProblem:
    """Probabilistic invariance LMI in ``P`` for the closed loop ``u = L x``.

    Obtained from :func:`build_ris_lmi` with ``B = I`` carrying the GP mean
    correction (``E(0, phi I)``) and ``C = [I I]`` carrying the inflated
    posterior and process noise. With zero centers the affine row vanishes and
    is dropped; with ``phi = 0`` the mean-correction channel is dropped too.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"probability level must lie in [0, 1), got {p}")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    sys = gpssm_disturbed_system(bounds, A, B, L, p)
    prob = build_ris_lmi(sys, None, alpha)
    lmi = prob.lmis[0].drop(3)
    if bounds.phi == 0:
        lmi = lmi.drop(1)
    lmi.name = "gpssm"
    prob.lmis[0] = lmi
    return prob


# ---------------------------------------------------------------- constraints


@dataclass
class PolytopeConstraints:
    """``X = {x : beta_i^T x <= 1}`` and ``U = {u : zeta_j^T u <= 1}``."""

    state_rows: np.ndarray
    input_rows: np.ndarray

    def __post_init__(self):
        self.state_rows = np.atleast_2d(np.asarray(self.state_rows, dtype=float))
        self.input_rows = np.atleast_2d(np.asarray(self.input_rows, dtype=float))
        if not (np.isfinite(self.state_rows).all() and np.isfinite(self.input_rows).all()):
            raise ValueError("constraint rows must be finite")
        if self.state_rows.size == 0 or self.input_rows.size == 0:
            log.warning("empty state or input constraint set: the corresponding set is unbounded")

    @classmethod
    def box(cls, state_lower, state_upper, input_lower, input_upper):
        return cls(_box_rows(state_lower, state_upper), _box_rows(input_lower, input_upper))

    @classmethod
    def from_dict(cls, d, n=None, m=None):
        """Parse the constraints file schema (explicit rows and/or boxes)."""
        state = [np.asarray(r["beta"], dtype=float) for r in d.get("state", [])]
        inputs = [np.asarray(r["zeta"], dtype=float) for r in d.get("input", [])]
        if "box_state" in d:
            state.extend(_box_rows(d["box_state"]["lower"], d["box_state"]["upper"]))
        if "box_input" in d:
            inputs.extend(_box_rows(d["box_input"]["lower"], d["box_input"]["upper"]))
        n = n if n is not None else (len(state[0]) if state else 0)
        m = m if m is not None else (len(inputs[0]) if inputs else 0)
        S = np.array(state).reshape(-1, n) if state else np.zeros((0, n))
        U = np.array(inputs).reshape(-1, m) if inputs else np.zeros((0, m))
        return cls(S, U)

    def to_dict(self):
        return {
            "state": [{"beta": r.tolist()} for r in self.state_rows],
            "input": [{"zeta": r.tolist()} for r in self.input_rows],
        }

    def state_ok(self, X, tol=0.0):
        """Row-wise ``x in X`` for an ``(R, n)`` array; non-finite rows are outside."""
        X = np.atleast_2d(X)
        if self.state_rows.size == 0:
            return np.isfinite(X).all(1)
        return np.all(X @ self.state_rows.T <= 1.0 + tol, axis=1)

    def input_ok(self, U, tol=0.0):
        U = np.atleast_2d(U)
        if self.input_rows.size == 0:
            return np.isfinite(U).all(1)
        return np.all(U @ self.input_rows.T <= 1.0 + tol, axis=1)


def _box_rows(lower, upper):
    lower = np.asarray(lower, dtype=float).ravel()
    upper = np.asarray(upper, dtype=float).ravel()
    if lower.size != upper.size:
        raise ValueError("box bounds must have equal length")
    rows = []
    for i, (lo, hi) in enumerate(zip(lower, upper)):
        e = np.zeros(lower.size)
        e[i] = 1.0
        if np.isfinite(hi):
            if hi <= 0:
                raise ValueError("box must contain the origin strictly (upper > 0)")
            rows.append(e / hi)
        if np.isfinite(lo):
            if lo >= 0:
                raise ValueError("box must contain the origin strictly (lower < 0)")
            rows.append(-e / abs(lo))
    return np.array(rows).reshape(-1, lower.size)


def constraint_margins(P, L, constraints: PolytopeConstraints):
    """``beta_i^T P^-1 beta_i`` and ``zeta_j^T L P^-1 L^T zeta_j``; values ``<= 1`` are satisfied.

    The first equals the squared support of ``E(0, P^-1)`` along ``beta_i``, so
    ``<= 1`` is exactly ``E(0, P^-1) inside {beta_i^T x <= 1}``.
    """
    W = np.linalg.inv(np.asarray(P, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    S = constraints.state_rows
    Z = constraints.input_rows
    state = np.einsum("ij,jk,ik->i", S, W, S) if S.size else np.zeros(0)
    G = Z @ L if Z.size else np.zeros((0, W.shape[0]))
    inputs = np.einsum("ij,jk,ik->i", G, W, G) if Z.size else np.zeros(0)
    return state, inputs


def _add_constraint_lmis(prob: LmiProblem, L, constraints: PolytopeConstraints):
    P = prob.variables["P"]
    n = P.rows
    for i, beta in enumerate(constraints.state_rows):
        prob.add_lmi(BlockLmi((n, 1), {(0, 0): Affine.of(P), (0, 1): Affine(beta.reshape(-1, 1)),
                                       (1, 1): Affine(1.0)}, name=f"state[{i}]"))
    for j, zeta in enumerate(constraints.input_rows):
        g = (np.atleast_2d(L).T @ zeta).reshape(-1, 1)
        prob.add_lmi(BlockLmi((n, 1), {(0, 0): Affine.of(P), (0, 1): Affine(g), (1, 1): Affine(1.0)},
                              name=f"input[{j}]"))


@dataclass
class VerificationReport:
    certified: bool
    alpha: float | None
    P: np.ndarray | None
    state_margins: np.ndarray = field(default_factory=lambda: np.zeros(0))
    input_margins: np.ndarray = field(default_factory=lambda: np.zeros(0))
    violations: list = field(default_factory=list)
    attempts: list = field(default_factory=list)
    solver_failures: int = 0
    message: str = ""

    @property
    def invariance_certified(self):
        return self.alpha is not None


def verify_controller(
    bounds: UncertaintyBounds,
    A,
    B,
    L,
    p: float,
    alpha_grid=None,
    constraints: PolytopeConstraints | None = None,
    P=None,
    tolerance: float = sdp.DEFAULT_TOL,
) -> VerificationReport:
    """Certify that ``u = L x`` renders some ``E(0, P^-1)`` probabilistically invariant at level ``p``.

    With ``P=None`` each ``alpha`` of the grid is tried in order and the LMI is
    solved for ``P`` (jointly with the constraint LMIs when ``constraints`` is
    given). If the joint problem is infeasible at every ``alpha`` but the
    invariance LMI alone is feasible, the report carries that ``P`` and names
    the violated constraints. With a fixed ``P`` the LMI is only evaluated.

    Infeasibility means infeasible at every attempted ``alpha``, nothing more.
    """
    alpha_grid = default_alpha_grid() if alpha_grid is None else np.asarray(alpha_grid, dtype=float).ravel()
    if alpha_grid.size == 0:
        raise ValueError("alpha grid is empty")
    if np.any((alpha_grid < 0) | (alpha_grid >= 1)):
        raise ValueError("alpha grid must lie in [0, 1)")
    L = np.atleast_2d(np.asarray(L, dtype=float))
    report = VerificationReport(False, None, None)

    if P is not None:
        P = np.asarray(P, dtype=float)
        for a in alpha_grid:
            prob = build_gpssm_verification_lmi(bounds, A, B, L, p, a)
            worst = sdp.psd_violation(prob.lmis[0].evaluate({"P": P}), prob.lmis[0].diag_magnitude({"P": P}))
            report.attempts.append({"alpha": float(a), "status": "Feasible" if worst <= 1e-9 else "Infeasible",
                                    "residual": float(worst)})
            if worst <= 1e-9:
                report.alpha = float(a)
                break
        report.P = P
    else:
        modes = [True, False] if constraints is not None else [False]
        Acl = np.atleast_2d(A) + np.atleast_2d(B) @ L
        for joint in modes:
            for a in alpha_grid:
                if contraction_rules_out(Acl, a):
                    report.attempts.append({"alpha": float(a), "joint": joint, "status": "Infeasible",
                                            "reason": "spectral_precheck"})
                    continue
                prob = build_gpssm_verification_lmi(bounds, A, B, L, p, a)
                if joint:
                    _add_constraint_lmis(prob, L, constraints)
                out = sdp.solve(prob, tolerance=tolerance)
                report.attempts.append({"alpha": float(a), "joint": joint, "status": out.status.value})
                if out.status in (sdp.Status.INACCURATE, sdp.Status.ITERATION_LIMIT):
                    report.solver_failures += 1
                if out.feasible:
                    report.alpha, report.P = float(a), out.point["P"]
                    break
            if report.P is not None:
                break

    if report.alpha is None:
        report.violations.append("invariance LMI infeasible at every attempted alpha")
    if constraints is not None and report.P is not None:
        s, u = constraint_margins(report.P, L, constraints)
        report.state_margins, report.input_margins = s, u
        tol = 1e-7
        report.violations += [f"state row {i}: beta^T P^-1 beta = {v:.6g} > 1" for i, v in enumerate(s) if v > 1 + tol]
        report.violations += [
            f"input row {j}: zeta^T L P^-1 L^T zeta = {v:.6g} > 1" for j, v in enumerate(u) if v > 1 + tol
        ]
    report.certified = report.alpha is not None and not report.violations
    report.message = "certified" if report.certified else "; ".join(report.violations)
    return report


# ---------------------------------------------------------------- sampling oracle


def _ball(rng, count, dim, boundary_fraction=0.5):
    s = rng.standard_normal((count, dim))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    r = rng.uniform(size=(count, 1)) ** (1.0 / dim)
    r[: int(boundary_fraction * count)] = 1.0
    return s * r


def sampled_invariance_oracle(sys: DisturbedLinearSystem, c, P, samples: int = 10_000, rng=None,
                              rtol: float = 1e-7) -> bool:
    """Brute-force check of ``q(z) >= 1  =>  q(z+) <= q(z)`` on random samples.

    ``z`` is drawn on the boundary of ``E(c, P^-1)`` and on shells up to three
    times its size; ``d`` and ``v`` uniformly from their sets with half the
    samples on the set boundaries. A sample counts as a violation when
    ``q(z+) - q(z) > rtol * (1 + |z|^2 + |d|^2 + |v|^2)``.
    """
    rng = np.random.default_rng(rng)
    P = np.asarray(P, dtype=float)
    c = np.zeros(sys.nz) if c is None else np.asarray(c, dtype=float).ravel()
    Wh = psd_sqrt(np.linalg.inv(P))
    s = rng.standard_normal((samples, sys.nz))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    radius = np.ones((samples, 1))
    radius[samples // 2 :] = rng.uniform(1.0, 3.0, (samples - samples // 2, 1))
    Z = c + (s * radius) @ Wh
    D = sys.d_set.center + _ball(rng, samples, sys.d_set.dim) @ psd_sqrt(sys.d_set.shape)
    V = sys.v_set.center + _ball(rng, samples, sys.v_set.dim) @ psd_sqrt(sys.v_set.shape)
    Zp = sys.step(Z, D, V)

    def q(X):
        Y = X - c
        return np.einsum("ij,jk,ik->i", Y, P, Y)

    slack = rtol * (1.0 + (Z**2).sum(1) + (D**2).sum(1) + (V**2).sum(1)) * max(1.0, np.abs(P).max())
    return bool(np.all(q(Zp) - q(Z) <= slack))
