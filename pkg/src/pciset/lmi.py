"""Symbolic block linear matrix inequalities.

An :class:`LmiProblem` declares matrix variables and a list of affine matrix
expressions required to be positive semidefinite. Each expression is a sum of
terms ``left @ op(X) @ right`` plus a constant, where ``op`` is identity or
transpose. Block LMIs store only the upper triangle; the lower triangle is the
transpose, so every assembled matrix is exactly symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LmiStructureError(ValueError):
    """Raised for malformed problems (undeclared variables, shape or symmetry errors)."""


@dataclass(frozen=True)
class Variable:
    name: str
    rows: int
    cols: int
    symmetric: bool = False
    # symmetric variables only: enforce X >= lower * I
    lower: float | None = None

    @property
    def shape(self):
        return (self.rows, self.cols)


def sym(name, n, lower=None) -> Variable:
    return Variable(name, n, n, symmetric=True, lower=lower)


def rect(name, rows, cols) -> Variable:
    return Variable(name, rows, cols)


@dataclass(frozen=True)
class Term:
    var: str
    left: np.ndarray | None = None
    right: np.ndarray | None = None
    transpose: bool = False
    coef: float = 1.0


def _mat(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    return a


class Affine:
    """Affine matrix expression ``const + sum_k left_k @ op(X_k) @ right_k``."""

    def __init__(self, const, terms=()):
        self.const = _mat(const)
        self.terms = tuple(terms)

    @property
    def shape(self):
        return self.const.shape

    @classmethod
    def zeros(cls, rows, cols):
        return cls(np.zeros((rows, cols)))

    @classmethod
    def of(cls, var: Variable, left=None, right=None, transpose=False, const=None):
        r, c = (var.cols, var.rows) if transpose else (var.rows, var.cols)
        left = None if left is None else _mat(left)
        right = None if right is None else _mat(right)
        rows = r if left is None else left.shape[0]
        cols = c if right is None else right.shape[1]
        base = np.zeros((rows, cols)) if const is None else _mat(const)
        return cls(base, [Term(var.name, left, right, transpose)])

    def __add__(self, other):
        if not isinstance(other, Affine):
            other = Affine(other)
        if other.shape != self.shape:
            raise LmiStructureError(f"cannot add shapes {self.shape} and {other.shape}")
        return Affine(self.const + other.const, self.terms + other.terms)

    __radd__ = __add__

    def __neg__(self):
        return (-1.0) * self

    def __sub__(self, other):
        if not isinstance(other, Affine):
            other = Affine(other)
        return self + (-other)

    def __rmul__(self, scalar):
        scalar = float(scalar)
        return Affine(
            scalar * self.const, [Term(t.var, t.left, t.right, t.transpose, scalar * t.coef) for t in self.terms]
        )

    def variables(self):
        return {t.var for t in self.terms}

    def evaluate(self, point) -> np.ndarray:
        out = self.const.copy()
        for t in self.terms:
            X = np.asarray(point[t.var], dtype=float)
            X = X.T if t.transpose else X
            if t.left is not None:
                X = t.left @ X
            if t.right is not None:
                X = X @ t.right
            out = out + t.coef * X
        return out

    def diag_magnitude(self, point) -> np.ndarray:
        """Diagonal of ``|const| + sum_k |term_k|``; the scale a cancellation is judged against."""
        out = np.abs(np.diag(self.const)).copy()
        for t in self.terms:
            out += np.abs(np.diag(Affine(np.zeros(self.shape), [t]).evaluate(point)))
        return out

    def to_cvxpy(self, cvars):
        expr = self.const
        for t in self.terms:
            X = cvars[t.var].T if t.transpose else cvars[t.var]
            if t.left is not None:
                X = t.left @ X
            if t.right is not None:
                X = X @ t.right
            expr = expr + t.coef * X
        return expr


@dataclass
class BlockLmi:
    """Symmetric block matrix ``[[B_00, B_01, ...], [B_01^T, B_11, ...], ...] >= 0``.

    ``blocks`` maps ``(i, j)`` with ``i <= j`` to an :class:`Affine`; missing
    off-diagonal blocks are zero.
    """

    sizes: tuple[int, ...]
    blocks: dict
    name: str = ""

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        for (i, j), b in self.blocks.items():
            if i > j:
                raise LmiStructureError(f"{self.name}: only upper-triangular blocks may be given, got ({i}, {j})")
            if b.shape != (self.sizes[i], self.sizes[j]):
                raise LmiStructureError(
                    f"{self.name}: block ({i}, {j}) has shape {b.shape}, expected {(self.sizes[i], self.sizes[j])}"
                )
        for i in range(len(self.sizes)):
            if (i, i) not in self.blocks:
                self.blocks[(i, i)] = Affine.zeros(self.sizes[i], self.sizes[i])

    @property
    def dim(self):
        return sum(self.sizes)

    def variables(self):
        out = set()
        for b in self.blocks.values():
            out |= b.variables()
        return out

    def block(self, i, j):
        if i <= j:
            return self.blocks.get((i, j))
        return None

    def evaluate(self, point) -> np.ndarray:
        offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        M = np.zeros((self.dim, self.dim))
        for (i, j), b in self.blocks.items():
            V = b.evaluate(point)
            ri, rj = slice(offsets[i], offsets[i + 1]), slice(offsets[j], offsets[j + 1])
            if i == j:
                V = np.triu(V) + np.triu(V, 1).T
                M[ri, rj] = V
            else:
                M[ri, rj] = V
                M[rj, ri] = V.T
        return M

    def diag_magnitude(self, point) -> np.ndarray:
        return np.concatenate([self.blocks[(i, i)].diag_magnitude(point) for i in range(len(self.sizes))])

    def drop(self, index):
        """Remove block row/column ``index``."""
        keep = [k for k in range(len(self.sizes)) if k != index]
        remap = {old: new for new, old in enumerate(keep)}
        blocks = {(remap[i], remap[j]): b for (i, j), b in self.blocks.items() if i != index and j != index}
        return BlockLmi(tuple(self.sizes[k] for k in keep), blocks, self.name)

    def row_scales(self):
        """Congruence scaling ``t_i`` per block row that tames huge constant diagonal blocks.

        ``diag(t) M diag(t) >= 0`` iff ``M >= 0``, so the scaled LMI is equivalent.
        """
        t = []
        for i in range(len(self.sizes)):
            d = np.abs(np.diag(self.blocks[(i, i)].const)).max(initial=0.0)
            t.append(1.0 / np.sqrt(max(1.0, d)))
        return t

    def to_cvxpy(self, cvars, equilibrate=True):
        import cvxpy as cp

        k = len(self.sizes)
        t = self.row_scales() if equilibrate else [1.0] * k
        rows = []
        for i in range(k):
            row = []
            for j in range(k):
                key = (i, j) if i <= j else (j, i)
                b = self.blocks.get(key)
                if b is None:
                    row.append(np.zeros((self.sizes[i], self.sizes[j])))
                    continue
                e = (t[i] * t[j]) * b.to_cvxpy(cvars)
                row.append(e if i <= j else e.T)
            rows.append(row)
        M = cp.bmat(rows)
        return 0.5 * (M + M.T)


@dataclass
class ScalarIneq:
    """Scalar affine inequality ``expr >= 0``."""

    expr: Affine
    name: str = ""

    def variables(self):
        return self.expr.variables()

    def evaluate(self, point) -> float:
        return float(self.expr.evaluate(point)[0, 0])


@dataclass
class LmiProblem:
    variables: dict = field(default_factory=dict)
    lmis: list = field(default_factory=list)
    scalars: list = field(default_factory=list)
    # None, ("logdet", name) or ("linear", Affine 1x1)
    objective: tuple | None = None

    def declare(self, var: Variable) -> Variable:
        if var.name in self.variables:
            raise LmiStructureError(f"variable {var.name!r} declared twice")
        self.variables[var.name] = var
        return var

    def add_lmi(self, lmi: BlockLmi):
        self.lmis.append(lmi)
        return lmi

    def add_scalar(self, ineq: ScalarIneq):
        self.scalars.append(ineq)
        return ineq

    def validate(self, rng=0):
        """Structural checks: declared variables, shapes, symmetric diagonal blocks."""
        used = set()
        for c in [*self.lmis, *self.scalars]:
            used |= c.variables()
        missing = used - set(self.variables)
        if missing:
            raise LmiStructureError(f"undeclared variable(s): {sorted(missing)}")
        for c in self.scalars:
            if c.expr.shape != (1, 1):
                raise LmiStructureError(f"scalar inequality {c.name!r} has shape {c.expr.shape}")
        if self.objective is not None:
            kind, target = self.objective
            if kind == "logdet":
                if target not in self.variables or not self.variables[target].symmetric:
                    raise LmiStructureError(f"logdet target {target!r} must be a declared symmetric variable")
            elif kind != "linear":
                raise LmiStructureError(f"unknown objective kind {kind!r}")
        # probe with random points: diagonal blocks must be symmetric for every value
        gen = np.random.default_rng(rng)
        for _ in range(2):
            point = self.random_point(gen)
            for lmi in self.lmis:
                for i in range(len(lmi.sizes)):
                    V = lmi.blocks[(i, i)].evaluate(point)
                    if V.shape != (lmi.sizes[i],) * 2:
                        raise LmiStructureError(f"{lmi.name}: diagonal block {i} evaluates to shape {V.shape}")
                    if np.abs(V - V.T).max() > 1e-9 * max(1.0, np.abs(V).max()):
                        raise LmiStructureError(f"{lmi.name}: diagonal block {i} is not symmetric")
                for (i, j), b in lmi.blocks.items():
                    V = b.evaluate(point)
                    if V.shape != (lmi.sizes[i], lmi.sizes[j]):
                        raise LmiStructureError(f"{lmi.name}: block ({i}, {j}) evaluates to shape {V.shape}")
        return self

    def random_point(self, rng=None):
        rng = np.random.default_rng(rng)
        point = {}
        for v in self.variables.values():
            X = rng.standard_normal(v.shape)
            point[v.name] = X + X.T if v.symmetric else X
        return point

    def count(self):
        """Number of block LMIs and scalar inequalities."""
        return len(self.lmis), len(self.scalars)
