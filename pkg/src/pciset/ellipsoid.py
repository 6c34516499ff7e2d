"""Ellipsoidal calculus.

An ellipsoid ``E(c, S)`` is the set ``c + {S^(1/2) s : ||s||_2 <= 1}`` with a
symmetric positive semidefinite shape matrix ``S``. When ``S`` is invertible
this is ``{x : (x - c)^T S^-1 (x - c) <= 1}``. Singular shapes are allowed:
membership then also requires ``x - c`` to lie in the range of ``S``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_RTOL = 1e-10
EIG_RTOL = 1e-10
MEMBERSHIP_TOL = 1e-9
SQRT_NEG_RTOL = 1e-8


def _as_matrix(S, name="matrix"):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square, got shape {S.shape}")
    return S


def _sym_eigh(S, name="matrix", neg_rtol=EIG_RTOL):
    """Eigendecomposition of a symmetric PSD matrix with small negatives clamped."""
    S = _as_matrix(S, name)
    scale = max(np.abs(S).max(), 0.0) if S.size else 0.0
    if scale > 0 and np.abs(S - S.T).max() > SYMMETRY_RTOL * scale:
        raise ValueError(f"{name} is not symmetric")
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    top = w.max() if w.size else 0.0
    if w.size and w.min() < -neg_rtol * max(top, scale):
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return np.clip(w, 0.0, None), V


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid with a center and a PSD shape matrix.

    Negative eigenvalues of ``shape`` within ``1e-10`` of the largest eigenvalue
    are clamped to zero on construction, so ``shape`` is always exactly
    symmetric PSD afterwards.
    """

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float)).ravel()
        w, V = _sym_eigh(self.shape, "shape")
        if V.shape[0] != c.size:
            raise ValueError(f"center has dimension {c.size} but shape is {V.shape[0]}x{V.shape[0]}")
        S = (V * w) @ V.T
        S = np.triu(S) + np.triu(S, 1).T
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", S)

    @property
    def dim(self) -> int:
        return self.center.size

    @classmethod
    def from_precision(cls, P, center=None):
        """``E(center, P^-1)``, the form used for invariant sets ``x^T P x <= 1``."""
        P = _as_matrix(P, "P")
        if center is None:
            center = np.zeros(P.shape[0])
        return cls(center, np.linalg.inv(P))

    def support(self, direction) -> float:
        """Support function ``max_{x in E} d^T x = d^T c + sqrt(d^T S d)``."""
        d = np.asarray(direction, dtype=float).ravel()
        if d.size != self.dim:
            raise ValueError(f"direction has dimension {d.size}, expected {self.dim}")
        return float(d @ self.center + np.sqrt(max(d @ self.shape @ d, 0.0)))

    def contains(self, x) -> bool:
        return contains(self, x)


def contains(e: Ellipsoid, x, tol: float = MEMBERSHIP_TOL) -> bool:
    """Membership test ``(x - c)^T S^+ (x - c) <= 1 + tol``.

    For singular ``S`` the offset must also lie in the range of ``S``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if x.size != e.dim:
        raise ValueError(f"point has dimension {x.size}, ellipsoid has {e.dim}")
    w, V = np.linalg.eigh(e.shape)
    r = V.T @ (x - e.center)
    cutoff = EIG_RTOL * max(w.max(), 0.0) if w.size else 0.0
    rank = w > cutoff
    if np.any(np.abs(r[~rank]) > np.sqrt(tol) * max(1.0, np.linalg.norm(r))):
        return False
    return bool(np.sum(r[rank] ** 2 / w[rank]) <= 1.0 + tol)


def psd_sqrt(S) -> np.ndarray:
    """Symmetric square root ``R`` with ``R @ R = S``."""
    w, V = _sym_eigh(S, "S", neg_rtol=SQRT_NEG_RTOL)
    # eigenvalues at rounding level are zeros; their square roots would not be
    w = np.where(w <= 10 * w.size * np.finfo(float).eps * w.max(initial=0.0), 0.0, w)
    R = (V * np.sqrt(w)) @ V.T
    return np.triu(R) + np.triu(R, 1).T


def inv_psd_sqrt(S) -> np.ndarray:
    """Symmetric inverse square root ``S^(-1/2)``; ``S`` must be positive definite."""
    w, V = _sym_eigh(S, "S", neg_rtol=SQRT_NEG_RTOL)
    if w.min() <= EIG_RTOL * w.max() or w.max() == 0.0:
        raise np.linalg.LinAlgError("matrix is singular, inverse square root undefined")
    R = (V / np.sqrt(w)) @ V.T
    return np.triu(R) + np.triu(R, 1).T


def affine_image(e: Ellipsoid, M, b=None) -> Ellipsoid:
    """Image ``M E + b = E(M c + b, M S M^T)``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != e.dim:
        raise ValueError(f"M has {M.shape[1]} columns, ellipsoid has dimension {e.dim}")
    b = np.zeros(M.shape[0]) if b is None else np.asarray(b, dtype=float).ravel()
    if b.size != M.shape[0]:
        raise ValueError(f"offset has dimension {b.size}, expected {M.shape[0]}")
    return Ellipsoid(M @ e.center + b, M @ e.shape @ M.T)


def minkowski_outer_bound(e1: Ellipsoid, e2: Ellipsoid) -> Ellipsoid:
    """Outer ellipsoid ``E(0, 2 (S1 + S2))`` of ``E(0, S1) + E(0, S2)``.

    Valid because ``sqrt(a) + sqrt(b) <= sqrt(2 (a + b))`` for the support
    functions along every direction.
    """
    if e1.dim != e2.dim:
        raise ValueError(f"dimension mismatch: {e1.dim} vs {e2.dim}")
    if np.any(e1.center != 0) or np.any(e2.center != 0):
        raise ValueError("minkowski_outer_bound requires zero-centered ellipsoids")
    return Ellipsoid(np.zeros(e1.dim), 2.0 * (e1.shape + e2.shape))


def inner_sum_check(S1, S2, trials: int = 1000, rng=None) -> bool:
    """Check ``E(0, S1 + S2)`` is inside ``E(0, S1) + E(0, S2)`` along random directions.

    Compares support functions ``sqrt(d^T (S1 + S2) d) <= sqrt(d^T S1 d) + sqrt(d^T S2 d)``.
    """
    S1 = Ellipsoid(np.zeros(_as_matrix(S1).shape[0]), S1).shape
    S2 = Ellipsoid(np.zeros(_as_matrix(S2).shape[0]), S2).shape
    if S1.shape != S2.shape:
        raise ValueError(f"dimension mismatch: {S1.shape} vs {S2.shape}")
    rng = np.random.default_rng(rng)
    D = rng.standard_normal((trials, S1.shape[0]))
    q1 = np.einsum("ij,jk,ik->i", D, S1, D).clip(min=0)
    q2 = np.einsum("ij,jk,ik->i", D, S2, D).clip(min=0)
    lhs = np.sqrt(q1 + q2)
    rhs = np.sqrt(q1) + np.sqrt(q2)
    return bool(np.all(lhs <= rhs * (1 + 1e-12) + 1e-300))


def chebyshev_region(mean, cov, p: float) -> Ellipsoid:
    """Distribution-free confidence region ``E(mean, n/(1-p) cov)`` of level ``p``.

    Follows from the multivariate Chebyshev inequality
    ``Pr((s - mean)^T cov^-1 (s - mean) > t) <= n / t``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"probability level must lie in [0, 1), got {p}")
    mean = np.atleast_1d(np.asarray(mean, dtype=float)).ravel()
    return Ellipsoid(mean, mean.size / (1.0 - p) * _as_matrix(cov, "cov"))


def sample_uniform(e: Ellipsoid, count: int, rng=None, boundary: bool = False) -> np.ndarray:
    """Uniform samples from the ellipsoid (or its boundary), shape ``(count, dim)``."""
    rng = np.random.default_rng(rng)
    s = rng.standard_normal((count, e.dim))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    if not boundary:
        s *= rng.uniform(size=(count, 1)) ** (1.0 / e.dim)
    return e.center + s @ psd_sqrt(e.shape)
