"""Analytic singular value decomposition of smooth matrix paths.

For a matrix path ``H(t)`` with constant rank the factors ``U1, sigma, V1``
can be chosen differentiable in ``t``.  Given a factorization at time ``t``
and the derivative ``Hdot``, :func:`asvd_rates` returns the factor rates,
using the convention that the rates of the null-space factors ``U2, V2``
are zero.  :func:`propagate_factors` integrates a factor path from these
rates, re-orthonormalizing along the way, and
:func:`corollary_residuals` checks the structural identities that make the
output-decoupling transform differentiable-feedthrough free.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import lincore
from .errors import InvalidInput, RankDeficiency

GAP_TOL_SCALE = 1e-8


@dataclass
class StructuredSvd:
    """Rank-revealing SVD split into range and null-space factors.

    ``H = U1 @ diag(sigma) @ V1.T`` with ``U1`` of shape ``(l, r)``,
    ``V1`` of shape ``(p, r)``, ``sigma`` the ``r`` positive singular
    values, and ``U2``/``V2`` orthonormal bases of the left/right null
    spaces.
    """

    U1: np.ndarray
    U2: np.ndarray
    V1: np.ndarray
    V2: np.ndarray
    sigma: np.ndarray

    @property
    def rank(self):
        return self.sigma.size

    @property
    def l(self):
        return self.U1.shape[0]

    @property
    def p(self):
        return self.V1.shape[0]

    def reconstruct(self):
        return self.U1 @ np.diag(self.sigma) @ self.V1.T

    def validate(self, tol=1e-8):
        U = np.hstack([self.U1, self.U2])
        V = np.hstack([self.V1, self.V2])
        ok = (
            np.allclose(U.T @ U, np.eye(self.l), atol=tol)
            and np.allclose(V.T @ V, np.eye(self.p), atol=tol)
            and (self.sigma.size == 0 or np.all(self.sigma > 0))
        )
        if not ok:
            raise InvalidInput("structured SVD factors are inconsistent")
        return True


@dataclass
class AsvdRates:
    """Time derivatives of the structured SVD factors.

    ``E = U1.T @ U1dot`` and ``F = V1.T @ V1dot`` are skew-symmetric;
    ``U2dot`` and ``V2dot`` are identically zero under the convention used
    here.
    """

    sigma_dot: np.ndarray
    E: np.ndarray
    F: np.ndarray
    U1dot: np.ndarray
    V1dot: np.ndarray
    U2dot: np.ndarray
    V2dot: np.ndarray


def structured_svd(H, tol=lincore.RANK_TOL):
    """Factor ``H`` (shape ``l x p``, ``l >= p``) into a StructuredSvd."""
    H = lincore.asmatrix(H, "H")
    l, p = H.shape
    if l < p:
        raise InvalidInput("structured_svd expects l >= p")
    U, s, V = lincore.svd(H)
    if s.size and s[0] > 0:
        r = int(np.count_nonzero(s > tol * s[0]))
    else:
        r = 0
    return StructuredSvd(
        U1=U[:, :r],
        U2=U[:, r:],
        V1=V[:, :r],
        V2=V[:, r:],
        sigma=s[:r].copy(),
    )


def asvd_rates(f, Hdot, gap_tol=None, repeated_tol=1e-8):
    """Factor rates for the analytic SVD at one time instant.

    ``f`` is the structured SVD of ``H(t)`` and ``Hdot`` the derivative of
    the path there.  Singular-value pairs whose squared gap falls below
    ``gap_tol`` (default ``1e-8 * sigma_max``) are treated as repeated;
    that branch is exact only when the crossing is non-degenerate, so a
    warning is emitted when the repeated pair has distinct value rates.
    """
    Hdot = lincore.asmatrix(Hdot, "Hdot")
    if Hdot.shape != (f.l, f.p):
        raise InvalidInput("Hdot shape does not match the factorization")
    r = f.rank
    sig = f.sigma
    if r and np.any(sig <= 0):
        raise RankDeficiency(message="nonpositive singular value")
    M = f.U1.T @ Hdot @ f.V1
    sigma_dot = np.diag(M).copy() if r else np.zeros(0)
    if gap_tol is None:
        gap_tol = GAP_TOL_SCALE * (sig[0] if r else 1.0)
    E = np.zeros((r, r))
    F = np.zeros((r, r))
    for i in range(r):
        for j in range(i + 1, r):
            gap = sig[j] ** 2 - sig[i] ** 2
            if abs(gap) > gap_tol:
                E[i, j] = (sig[j] * M[i, j] + sig[i] * M[j, i]) / gap
                F[i, j] = (sig[j] * M[j, i] + sig[i] * M[i, j]) / gap
            else:
                if abs(M[i, j] + M[j, i]) > repeated_tol * max(1.0, sig[0]):
                    warnings.warn(
                        "repeated singular values with ambiguous coupling; "
                        "using the constant-gap branch",
                        RuntimeWarning,
                    )
                E[i, j] = M[i, j] / (2.0 * sig[i])
                F[i, j] = -E[i, j]
            E[j, i] = -E[i, j]
            F[j, i] = -F[i, j]
    return AsvdRates(
        sigma_dot=sigma_dot,
        E=E,
        F=F,
        U1dot=f.U1 @ E,
        V1dot=f.V1 @ F,
        U2dot=np.zeros_like(f.U2),
        V2dot=np.zeros_like(f.V2),
    )


def second_order_rates(f, r, Hddot, gap_tol=None):
    """Rates of the rates: differentiate the factor-rate formulas once.

    Returns an :class:`AsvdRates` whose fields hold one extra derivative:
    ``sigma_dot`` is ``sigma_ddot``, ``E``/``F`` are ``Edot``/``Fdot`` and
    ``U1dot``/``V1dot`` are the second factor derivatives
    ``U1 (E @ E + Edot)`` / ``V1 (F @ F + Fdot)``.  Requires simple
    singular values away from ``gap_tol``; pairs inside the tolerance use
    the constant-gap branch like :func:`asvd_rates`.
    """
    Hddot = lincore.asmatrix(Hddot, "Hddot")
    if Hddot.shape != (f.l, f.p):
        raise InvalidInput("Hddot shape does not match the factorization")
    rk = f.rank
    sig = f.sigma
    # d/dt (U1.T Hdot V1) along the factor path: U1dot = U1 E, V1dot = V1 F.
    Mfirst = _first_coupling(f, r)
    Mdot = -r.E @ Mfirst + f.U1.T @ Hddot @ f.V1 + Mfirst @ r.F
    sigma_ddot = np.diag(Mdot).copy() if rk else np.zeros(0)
    if gap_tol is None:
        gap_tol = GAP_TOL_SCALE * (sig[0] if rk else 1.0)
    Edot = np.zeros((rk, rk))
    Fdot = np.zeros((rk, rk))
    sd = r.sigma_dot
    for i in range(rk):
        for j in range(i + 1, rk):
            gap = sig[j] ** 2 - sig[i] ** 2
            if abs(gap) > gap_tol:
                num_e = sig[j] * Mfirst[i, j] + sig[i] * Mfirst[j, i]
                num_e_dot = (sd[j] * Mfirst[i, j] + sig[j] * Mdot[i, j]
                             + sd[i] * Mfirst[j, i] + sig[i] * Mdot[j, i])
                num_f = sig[j] * Mfirst[j, i] + sig[i] * Mfirst[i, j]
                num_f_dot = (sd[j] * Mfirst[j, i] + sig[j] * Mdot[j, i]
                             + sd[i] * Mfirst[i, j] + sig[i] * Mdot[i, j])
                gap_dot = 2.0 * (sig[j] * sd[j] - sig[i] * sd[i])
                Edot[i, j] = (num_e_dot * gap - num_e * gap_dot) / gap ** 2
                Fdot[i, j] = (num_f_dot * gap - num_f * gap_dot) / gap ** 2
            else:
                Edot[i, j] = (Mdot[i, j] / (2.0 * sig[i])
                              - Mfirst[i, j] * sd[i] / (2.0 * sig[i] ** 2))
                Fdot[i, j] = -Edot[i, j]
            Edot[j, i] = -Edot[i, j]
            Fdot[j, i] = -Fdot[i, j]
    return AsvdRates(
        sigma_dot=sigma_ddot,
        E=Edot,
        F=Fdot,
        U1dot=f.U1 @ (r.E @ r.E + Edot),
        V1dot=f.V1 @ (r.F @ r.F + Fdot),
        U2dot=np.zeros_like(f.U2),
        V2dot=np.zeros_like(f.V2),
    )


def _first_coupling(f, r):
    # Recover U1.T Hdot V1 from the first-order rates: the rate formulas
    # invert U1.T Hdot V1 = E Sigma + Sigma_dot - Sigma F.
    S = np.diag(f.sigma)
    return r.E @ S + np.diag(r.sigma_dot) - S @ r.F


def corollary_residuals(f, r, rdot, T2):
    """Norms of ``T2 @ H1``, ``T2 @ H1dot`` and ``T2 @ H1ddot``.

    ``H1 = U1 diag(sigma)`` is the feedthrough column block; ``r`` holds
    the first-order factor rates and ``rdot`` the rates of the rates
    (``rdot.E = Edot``, ``rdot.sigma_dot = sigma_ddot``).  All three
    residuals vanish identically for an analytic factorization, which is
    what makes the decoupled output channel free of the feedthrough input
    up to second order.
    """
    S = np.diag(f.sigma)
    Sd = np.diag(r.sigma_dot)
    Sdd = np.diag(rdot.sigma_dot)
    H1 = f.U1 @ S
    H1d = f.U1 @ (r.E @ S + Sd)
    H1dd = f.U1 @ (r.E @ r.E @ S + rdot.E @ S + 2.0 * r.E @ Sd + Sdd)
    T2 = np.atleast_2d(np.asarray(T2, dtype=float))
    return (
        float(np.linalg.norm(T2 @ H1)),
        float(np.linalg.norm(T2 @ H1d)),
        float(np.linalg.norm(T2 @ H1dd)),
    )


def align_signs(f, f_prev):
    """Flip factor column signs so ``diag(U1.T @ U1_prev) > 0``.

    Column ``i`` of ``U1`` and ``V1`` are flipped together, which leaves
    the reconstructed matrix unchanged.  Used to keep independently
    computed factorizations on the same smooth branch.
    """
    if f.rank == 0 or f_prev is None or f_prev.rank != f.rank:
        return f
    s = np.sign(np.diag(f.U1.T @ f_prev.U1))
    s[s == 0] = 1.0
    return StructuredSvd(
        U1=f.U1 * s,
        U2=f.U2,
        V1=f.V1 * s,
        V2=f.V2,
        sigma=f.sigma,
    )


def _reorthonormalize(M):
    # Nearest matrix with orthonormal columns (orthogonal polar factor).
    if M.size == 0:
        return M
    u, _ = sla.polar(M, side="right")
    return u


def propagate_factors(f0, rates_source, t0, t1, h, tol=lincore.RANK_TOL):
    """Integrate a structured-SVD path from its rate field.

    ``rates_source(t, f)`` must return the :class:`AsvdRates` for the
    current factors.  The factors are advanced with RK4 on
    ``(U1, V1, sigma)``; after every step ``U1``/``V1`` are projected back
    onto orthonormal columns and sign-aligned with the previous step.
    ``U2``/``V2`` stay fixed.  Returns ``(ts, factors)``.

    Raises ``RankDeficiency`` if a singular value falls below
    ``tol * sigma_max``.
    """
    if h <= 0:
        raise InvalidInput("step size must be positive")
    f = StructuredSvd(
        U1=f0.U1.copy(),
        U2=f0.U2.copy(),
        V1=f0.V1.copy(),
        V2=f0.V2.copy(),
        sigma=f0.sigma.copy(),
    )
    ts = [t0]
    out = [f]
    t = t0
    while t < t1 - 1e-12 * max(1.0, abs(t1)):
        step = min(h, t1 - t)

        def deriv(tau, y):
            U1, V1, sig = y
            cur = StructuredSvd(U1=U1, U2=f.U2, V1=V1, V2=f.V2, sigma=sig)
            r = rates_source(tau, cur)
            return (U1 @ r.E, V1 @ r.F, r.sigma_dot)

        y = (f.U1, f.V1, f.sigma)
        k1 = deriv(t, y)
        k2 = deriv(t + 0.5 * step, tuple(a + 0.5 * step * b for a, b in zip(y, k1)))
        k3 = deriv(t + 0.5 * step, tuple(a + 0.5 * step * b for a, b in zip(y, k2)))
        k4 = deriv(t + step, tuple(a + step * b for a, b in zip(y, k3)))
        U1, V1, sig = (
            a + (step / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
            for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)
        )
        U1 = _reorthonormalize(U1)
        V1 = _reorthonormalize(V1)
        nxt = align_signs(
            StructuredSvd(U1=U1, U2=f.U2, V1=V1, V2=f.V2, sigma=sig), f
        )
        t = t + step
        smax = nxt.sigma.max() if nxt.rank else 0.0
        if nxt.rank and np.any(nxt.sigma <= tol * max(smax, 1.0)):
            raise RankDeficiency(time=t)
        f = nxt
        ts.append(t)
        out.append(f)
    return np.asarray(ts), out
