"""Dense linear-algebra kernels, matrix equations and fixed-step integration.

Everything downstream (decoupling, the filters, the controller synthesis)
goes through this module so that tolerances and failure modes are applied
uniformly.  The heavy lifting is delegated to numpy/scipy; this layer adds
validation, the stabilizing-solution refinement for the Riccati equation
and the fixed-step Runge-Kutta integrator used throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import (
    DivergedIntegration,
    InvalidInput,
    NoStabilizingSolution,
)

RANK_TOL = 1e-9


def asmatrix(M, name="matrix"):
    """Coerce to a 2-D float array, rejecting non-finite entries."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return M


def svd(M):
    """Full SVD ``M = U @ diag_embed(s) @ V.T`` with descending ``s``.

    Returns ``(U, s, V)`` where ``U`` and ``V`` are square orthonormal and
    ``s`` has ``min(M.shape)`` entries.
    """
    M = asmatrix(M)
    U, s, Vt = np.linalg.svd(M, full_matrices=True)
    return U, s, Vt.T


def rank(M, tol=RANK_TOL):
    """Numerical rank: count of singular values above ``tol * sigma_max``."""
    M = asmatrix(M)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def pinv(M, tol=RANK_TOL):
    """Moore-Penrose pseudoinverse with a relative singular-value cutoff."""
    M = asmatrix(M)
    if M.size == 0:
        return np.zeros((M.shape[1], M.shape[0]))
    return np.linalg.pinv(M, rcond=tol)


def symmetrize(P):
    return 0.5 * (P + P.T)


def psd_floor(P, floor=0.0):
    """Symmetrize and clip eigenvalues from below; used on covariances."""
    P = symmetrize(np.asarray(P, dtype=float))
    if P.size == 0:
        return P
    w, V = np.linalg.eigh(P)
    if w.size and w[0] >= floor:
        return P
    w = np.maximum(w, floor)
    return symmetrize(V @ np.diag(w) @ V.T)


def is_pd(M, tol=0.0):
    """True when the symmetric part of ``M`` is positive definite."""
    M = symmetrize(asmatrix(M))
    if M.size == 0:
        return True
    try:
        sla.cholesky(M - tol * np.eye(M.shape[0]), lower=True)
        return True
    except sla.LinAlgError:
        return False


def solve_pd(M, B, context="linear solve"):
    """Solve ``M @ X = B`` for symmetric positive definite ``M``."""
    M = symmetrize(asmatrix(M))
    B = np.asarray(B, dtype=float)
    if M.shape[0] == 0:
        return np.zeros(B.shape)
    try:
        c, low = sla.cho_factor(M)
    except sla.LinAlgError as exc:
        raise InvalidInput(f"{context}: matrix not positive definite") from exc
    return sla.cho_solve((c, low), B)


@dataclass
class SpectrumReport:
    """Eigenvalues plus the spectral abscissa of a square matrix."""

    eigenvalues: np.ndarray
    max_real_part: float

    @property
    def hurwitz(self):
        return self.max_real_part < 0.0


def eig(M):
    M = asmatrix(M)
    if M.shape[0] != M.shape[1]:
        raise InvalidInput("eig requires a square matrix")
    vals = np.linalg.eigvals(M) if M.size else np.zeros(0, dtype=complex)
    mrp = float(np.max(vals.real)) if vals.size else -np.inf
    return SpectrumReport(eigenvalues=vals, max_real_part=mrp)


def solve_lyapunov(A, Q):
    """Solve ``A @ X + X @ A.T + Q = 0`` for symmetric ``Q``."""
    A = asmatrix(A)
    Q = symmetrize(asmatrix(Q))
    if A.shape[0] == 0:
        return np.zeros((0, 0))
    return symmetrize(sla.solve_continuous_lyapunov(A, -Q))


def care_residual(P, A, C, Q, R, S):
    L = (P @ C.T + S) @ np.linalg.inv(R)
    return A @ P + P @ A.T + Q - L @ R @ L.T


def solve_care(A, C, Q, R, S=None, refine_steps=3, tol=1e-9):
    """Stabilizing solution of the filter-form algebraic Riccati equation.

    Solves ``A P + P A' + Q - (P C' + S) R^{-1} (P C' + S)' = 0`` for the
    unique symmetric ``P`` such that ``A - L C`` is Hurwitz, where
    ``L = (P C' + S) R^{-1}``.  After the Schur-based solve the result is
    polished with Newton steps (each a Lyapunov solve) until the residual
    is below ``tol * max(1, ||P||)``.

    Raises ``NoStabilizingSolution`` when the underlying solver fails or
    the closed loop is not Hurwitz.
    """
    A = asmatrix(A, "A")
    C = asmatrix(C, "C")
    Q = symmetrize(asmatrix(Q, "Q"))
    R = symmetrize(asmatrix(R, "R"))
    n = A.shape[0]
    if S is None:
        S = np.zeros((n, C.shape[0]))
    S = asmatrix(S, "S") if np.asarray(S).size else np.zeros((n, C.shape[0]))
    if C.shape[0] == 0:
        # No measurements: reduces to a Lyapunov equation, valid only if A
        # is already Hurwitz.
        if eig(A).max_real_part >= 0:
            raise NoStabilizingSolution("A is not Hurwitz and C is empty")
        return solve_lyapunov(A, Q)
    try:
        # Dual of the standard control-form CARE handled by scipy's
        # Schur/invariant-subspace solver.
        P = sla.solve_continuous_are(a=A.T, b=C.T, q=Q, r=R, s=S)
    except (sla.LinAlgError, ValueError) as exc:
        raise NoStabilizingSolution(str(exc)) from exc
    P = symmetrize(P)
    for _ in range(refine_steps):
        res = care_residual(P, A, C, Q, R, S)
        if np.linalg.norm(res) <= tol * max(1.0, np.linalg.norm(P)):
            break
        L = (P @ C.T + S) @ np.linalg.inv(R)
        Acl = A - L @ C
        try:
            delta = sla.solve_continuous_lyapunov(Acl, -res)
        except sla.LinAlgError:
            break
        P = symmetrize(P + delta)
    res = care_residual(P, A, C, Q, R, S)
    if np.linalg.norm(res) > 1e-6 * max(1.0, np.linalg.norm(P)):
        raise NoStabilizingSolution("Riccati residual did not converge")
    L = (P @ C.T + S) @ np.linalg.inv(R)
    if eig(A - L @ C).max_real_part >= 0:
        raise NoStabilizingSolution("closed loop is not Hurwitz")
    return P


def rk4_step(rhs, t, y, h):
    """One classical fourth-order Runge-Kutta step for array-valued ``y``."""
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_ode(rhs, y0, t0, t1, h):
    """Fixed-step RK4 over ``[t0, t1]``; the final step is shortened so the
    grid lands on ``t1`` exactly.  Returns ``(ts, ys)`` with ``ys[k]`` the
    state at ``ts[k]``.  Raises ``DivergedIntegration`` on non-finite
    states.
    """
    if h <= 0:
        raise InvalidInput("step size must be positive")
    if t1 < t0:
        raise InvalidInput("t1 must be >= t0")
    y = np.asarray(y0, dtype=float).copy()
    ts = [t0]
    ys = [y.copy()]
    t = t0
    while t < t1 - 1e-12 * max(1.0, abs(t1)):
        step = min(h, t1 - t)
        y = rk4_step(rhs, t, y, step)
        t = t + step
        if not np.all(np.isfinite(y)):
            raise DivergedIntegration(t)
        ts.append(t)
        ys.append(y.copy())
    return np.asarray(ts), np.asarray(ys)


@dataclass
class GridSignal:
    """Zero-order-hold interpolant over a uniform time grid."""

    ts: np.ndarray
    values: np.ndarray
    _h: float = field(init=False)

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.ts.size < 1 or self.values.shape[0] != self.ts.size:
            raise InvalidInput("grid signal needs matching ts/values")
        self._h = self.ts[1] - self.ts[0] if self.ts.size > 1 else 1.0

    def __call__(self, t):
        k = int(np.floor((t - self.ts[0]) / self._h + 1e-9))
        k = min(max(k, 0), self.ts.size - 1)
        return self.values[k]
