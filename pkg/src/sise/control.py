"""Estimate-feedback control: LQR state feedback, disturbance-rejection
gains and the implicit estimate/control loop resolution.

The control law is ``u = -K xhat - J1 d1hat - J2 d2hat``.  Because the
input estimates themselves depend on ``u`` through the measurement
equations, the pair ``(d1hat, d2hat)`` must be solved from a small linear
system before the law can be evaluated; :func:`resolve_feedback` does
that.  A separation property holds: the closed-loop spectrum is the union
of the regulator spectrum ``spec(A - B K)`` and the estimator spectrum
``spec(Abar - L C2)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import lincore
from .errors import FeedbackLoopIllPosed, InvalidInput, Unresolvable

COND_LIMIT = 1e8


def lqr_gain(A, B, Qc, Rc):
    """LQR gain ``K = Rc^{-1} B' P`` from the control-form Riccati
    equation; returns ``(K, P)``."""
    A = lincore.asmatrix(A, "A")
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Qc = lincore.symmetrize(lincore.asmatrix(Qc, "Qc"))
    Rc = lincore.symmetrize(lincore.asmatrix(Rc, "Rc"))
    P = lincore.solve_care(A.T, B.T, Qc, Rc)
    K = np.linalg.solve(Rc, B.T @ P)
    return K, P


@dataclass
class RejectionGains:
    """Static rejection gains and residual coupling levels.

    ``J_i`` minimizes ``||G_i - B J_i||_2``; ``gamma_i`` is the attained
    minimum (zero exactly when the matching condition ``range(G_i) in
    range(B)`` holds).  ``certified`` reports the linear-matrix-inequality
    witness ``[[gamma I, M], [M', gamma I]] >= 0`` for the residual
    ``M = (I - B B^+) G_i``.
    """

    J1: np.ndarray
    J2: np.ndarray
    gamma1: float
    gamma2: float
    certified: bool


def _rejection_pair(B, Gi, Bp, Pproj):
    J = Bp @ Gi
    M = Pproj @ Gi
    gamma = float(np.linalg.norm(M, 2)) if M.size else 0.0
    return J, gamma, M


def _lmi_witness(gamma, M, tol=1e-10):
    if M.size == 0:
        return True
    r, c = M.shape
    block = np.block([
        [gamma * np.eye(r), M],
        [M.T, gamma * np.eye(c)],
    ])
    return bool(np.linalg.eigvalsh(block)[0] >= -tol * max(1.0, gamma))


def rejection_gains(B, G1, G2):
    """Least-squares disturbance-rejection gains for both input channels."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    G1 = np.atleast_2d(np.asarray(G1, dtype=float))
    G2 = np.atleast_2d(np.asarray(G2, dtype=float))
    Bp = lincore.pinv(B)
    Pproj = np.eye(B.shape[0]) - B @ Bp
    J1, g1, M1 = _rejection_pair(B, G1, Bp, Pproj)
    J2, g2, M2 = _rejection_pair(B, G2, Bp, Pproj)
    certified = _lmi_witness(g1, M1) and _lmi_witness(g2, M2)
    return RejectionGains(J1=J1, J2=J2, gamma1=g1, gamma2=g2, certified=certified)


@dataclass
class ControllerSpec:
    K: np.ndarray
    J1: np.ndarray
    J2: np.ndarray


@dataclass
class ResolvedFeedback:
    u: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    Jtilde: np.ndarray
    cond: float


def feedback_coupling(spec, g, dec, auxp):
    """The implicit-loop matrix coupling ``(d1hat, d2hat)`` to itself."""
    r = dec.svd.rank
    n2 = dec.G2.shape[1]
    M1, M2 = g.M1, g.M2
    CB = g.C2barB + auxp.T2Ddd  # C2bar B + T2bar Dddash
    top = np.hstack([
        np.eye(r) - M1 @ dec.D1 @ spec.J1,
        -M1 @ dec.D1 @ spec.J2,
    ]) if r else np.zeros((0, r + n2))
    bot = np.hstack([
        M2 @ (g.C2barG1 - CB @ spec.J1),
        np.eye(n2) - M2 @ CB @ spec.J2,
    ]) if n2 else np.zeros((0, r + n2))
    return np.vstack([top, bot]) if (r + n2) else np.zeros((0, 0))


def resolve_feedback(spec, g, dec, auxp, xhat, z1, z2bar, u_base=None,
                     udot=None):
    """Solve the implicit estimate/control loop at one instant.

    ``u_base`` is the input component independent of the unknown-input
    estimates (default ``-K xhat``).  Requires the derivative feedthrough
    ``D2bar`` of the auxiliary channel to vanish; otherwise the input obeys
    an ODE in ``u`` and the caller must integrate it (``udot`` then closes
    the expression explicitly when supplied).

    Raises ``FeedbackLoopIllPosed`` when the coupling matrix has condition
    number above ``1e8``.
    """
    if u_base is None:
        u_base = -spec.K @ xhat
    D2bar_active = auxp.D2bar.size and np.linalg.norm(auxp.D2bar) > 0
    if D2bar_active and udot is None:
        raise Unresolvable(
            "auxiliary derivative feedthrough is nonzero; supply udot or "
            "integrate the input ODE"
        )
    Jt = feedback_coupling(spec, g, dec, auxp)
    if Jt.size:
        cond = float(np.linalg.cond(Jt))
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise FeedbackLoopIllPosed(
                f"estimate/control coupling condition number {cond:.3g}"
            )
    else:
        cond = 1.0
    r = dec.svd.rank
    b1 = g.M1 @ (z1 - dec.C1 @ xhat - dec.D1 @ u_base)
    rhs2 = (
        z2bar
        - g.CAfull @ xhat
        - (g.C2barB + auxp.T2Ddd) @ u_base
    )
    if D2bar_active:
        rhs2 = rhs2 - auxp.D2bar @ udot
    b2 = g.M2 @ rhs2
    b = np.concatenate([b1, b2])
    dd = np.linalg.solve(Jt, b) if Jt.size else b
    d1 = dd[:r]
    d2 = dd[r:]
    u = u_base - spec.J1 @ d1 - spec.J2 @ d2
    return ResolvedFeedback(u=u, d1=d1, d2=d2, Jtilde=Jt, cond=cond)


def separation_spectrum(A, B, K, Abar, L, C2, coupling=None):
    """Spectra of the regulator, the estimator, and their block coupling.

    Returns ``(regulator, estimator, closed_loop)`` spectrum reports; the
    closed-loop matrix is upper block triangular in (state, estimation
    error) coordinates, so its spectrum is the multiset union of the first
    two regardless of the coupling block.
    """
    A = lincore.asmatrix(A)
    Acl = A - B @ K
    Aest = Abar - L @ C2
    n = A.shape[0]
    X = coupling if coupling is not None else np.zeros((n, n))
    block = np.block([[Acl, X], [np.zeros((n, n)), Aest]])
    return lincore.eig(Acl), lincore.eig(Aest), lincore.eig(block)
