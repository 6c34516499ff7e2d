"""Small dense SDP solves for :class:`~pciset.lmi.LmiProblem`.

The conic solve is delegated to cvxpy (Clarabel by default). Whatever the
backend reports, a ``Feasible`` outcome is only returned after every
constraint has been re-evaluated with numpy and its minimum eigenvalue
checked, so the backend is never trusted on its own.
"""

from __future__ import annotations

import enum
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .lmi import LmiProblem, LmiStructureError

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
RECHECK_RTOL = 1e-7


class Status(str, enum.Enum):
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    INACCURATE = "Inaccurate"
    ITERATION_LIMIT = "IterationLimit"


@dataclass
class SolveOutcome:
    status: Status
    point: dict | None = None
    objective_value: float | None = None
    # worst scaled constraint violation at the point, <= 0 means satisfied
    residual: float | None = None
    backend_status: str = ""
    solve_seconds: float = 0.0
    message: str = ""
    info: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status is Status.FEASIBLE


def psd_violation(M, magnitude=None) -> float:
    """Scale-free PSD violation ``-lambda_min(D^-1/2 M D^-1/2)`` with ``D = diag(|M_ii|)``.

    ``magnitude`` optionally raises ``D`` entrywise, e.g. to the size of the
    parts a diagonal entry was summed from, so a cancellation to ``-1e-9`` at
    an active constraint is not mistaken for a unit violation. Zero diagonal
    entries use the matrix's largest magnitude so that a zero diagonal paired
    with a nonzero off-diagonal still registers. Values ``<= 0`` mean ``M`` is
    PSD.
    """
    M = np.atleast_2d(M)
    top = np.abs(M).max(initial=0.0)
    if top == 0.0:
        return 0.0
    d = np.abs(np.diag(M)).copy()
    if magnitude is not None:
        d = np.maximum(d, magnitude)
    d[d == 0.0] = top
    s = 1.0 / np.sqrt(d)
    return float(-np.linalg.eigvalsh(M * s[:, None] * s[None, :]).min())


def constraint_residuals(problem: LmiProblem, point) -> list[tuple[str, float]]:
    """Scale-free violation of each constraint at ``point`` (see :func:`psd_violation`)."""
    out = []
    for k, lmi in enumerate(problem.lmis):
        out.append((lmi.name or f"lmi[{k}]", psd_violation(lmi.evaluate(point), lmi.diag_magnitude(point))))
    for k, s in enumerate(problem.scalars):
        v = s.evaluate(point)
        scale = max(1.0, np.abs(s.expr.const).max())
        out.append((s.name or f"scalar[{k}]", -v / scale))
    for v in problem.variables.values():
        if v.symmetric and v.lower is not None:
            X = point[v.name]
            out.append((f"{v.name} >= {v.lower:g} I", -(np.linalg.eigvalsh(X).min() - v.lower) / max(v.lower, 1e-300)))
    return out


def recheck(problem: LmiProblem, point, rtol: float = RECHECK_RTOL) -> tuple[bool, float]:
    """Independent eigenvalue check of every constraint; returns (ok, worst residual)."""
    res = constraint_residuals(problem, point)
    worst = max((r for _, r in res), default=0.0)
    return worst <= rtol, worst


def _solver_kwargs(solver, tolerance, max_iterations):
    if solver == "CLARABEL":
        return dict(
            tol_gap_abs=tolerance,
            tol_gap_rel=tolerance,
            tol_feas=tolerance,
            tol_infeas_abs=tolerance,
            tol_infeas_rel=tolerance,
            max_iter=max_iterations,
        )
    if solver == "SCS":
        return dict(eps_abs=tolerance, eps_rel=tolerance, max_iters=max(max_iterations, 2500))
    if solver == "CVXOPT":
        return dict(abstol=tolerance, reltol=tolerance, feastol=tolerance, max_iters=max_iterations)
    return {}


def solve(
    problem: LmiProblem,
    tolerance: float = DEFAULT_TOL,
    max_iterations: int = DEFAULT_MAX_ITER,
    solver: str = "CLARABEL",
) -> SolveOutcome:
    """Decide feasibility of ``problem`` or optimize its objective.

    Raises
    ------
    LmiStructureError
        If the problem is malformed; checked before any solver call.
    """
    import cvxpy as cp

    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    problem.validate()

    cvars = {v.name: cp.Variable(v.shape, symmetric=v.symmetric, name=v.name) for v in problem.variables.values()}
    cons = []
    for lmi in problem.lmis:
        cons.append(lmi.to_cvxpy(cvars) >> 0)
    for s in problem.scalars:
        cons.append(s.expr.to_cvxpy(cvars) >= 0)
    for v in problem.variables.values():
        if v.symmetric and v.lower is not None:
            cons.append(cvars[v.name] >> v.lower * np.eye(v.rows))

    if problem.objective is None:
        obj = cp.Minimize(0)
    elif problem.objective[0] == "logdet":
        obj = cp.Maximize(cp.log_det(cvars[problem.objective[1]]))
    else:
        obj = cp.Maximize(problem.objective[1].to_cvxpy(cvars)[0, 0])
    prob = cp.Problem(obj, cons)

    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            # inaccurate solutions surface as Status.INACCURATE instead
            warnings.filterwarnings("ignore", message="Solution may be inaccurate")
            prob.solve(solver=solver, **_solver_kwargs(solver, tolerance, max_iterations))
    except cp.error.SolverError as exc:
        return SolveOutcome(Status.INACCURATE, backend_status="solver_error", message=str(exc),
                            solve_seconds=time.perf_counter() - t0)
    elapsed = time.perf_counter() - t0
    bstatus = prob.status

    if bstatus in (cp.INFEASIBLE,):
        return SolveOutcome(Status.INFEASIBLE, backend_status=bstatus, solve_seconds=elapsed)
    if bstatus == cp.USER_LIMIT:
        return SolveOutcome(Status.ITERATION_LIMIT, backend_status=bstatus, solve_seconds=elapsed)
    if bstatus not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or any(c.value is None for c in cvars.values()):
        return SolveOutcome(Status.INACCURATE, backend_status=str(bstatus), solve_seconds=elapsed)

    point = {}
    for name, var in cvars.items():
        X = np.array(var.value, dtype=float).reshape(problem.variables[name].shape)
        if problem.variables[name].symmetric:
            X = np.triu(X) + np.triu(X, 1).T
        point[name] = X
    ok, worst = recheck(problem, point)
    status = Status.FEASIBLE if ok and bstatus == cp.OPTIMAL else Status.INACCURATE
    value = None
    if problem.objective is not None and problem.objective[0] == "logdet":
        sign, value = np.linalg.slogdet(point[problem.objective[1]])
        value = float(value) if sign > 0 else -np.inf
    elif problem.objective is not None:
        value = float(problem.objective[1].evaluate(point)[0, 0])
    msg = "" if ok else f"eigenvalue re-check failed (worst scaled residual {worst:.2e})"
    return SolveOutcome(status, point, value, worst, str(bstatus), elapsed, msg)


def maximize_logdet(
    problem: LmiProblem,
    target: str,
    tolerance: float = DEFAULT_TOL,
    max_iterations: int = DEFAULT_MAX_ITER,
    solver: str = "CLARABEL",
) -> SolveOutcome:
    """Maximize ``log det`` of the symmetric variable ``target`` over the feasible set.

    The backend handles the log-determinant natively through the exponential
    cone, so no linearized ascent is needed.
    """
    var = problem.variables.get(target)
    if var is None or not var.symmetric:
        raise LmiStructureError(f"{target!r} is not a declared symmetric variable")
    if var.lower is None or var.lower <= 0:
        raise LmiStructureError(f"{target!r} needs a positive lower bound for log det")
    saved = problem.objective
    problem.objective = ("logdet", target)
    try:
        return solve(problem, tolerance, max_iterations, solver)
    finally:
        problem.objective = saved
