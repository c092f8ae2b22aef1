"""Stability, identifiability and consistency diagnostics for the filters.

Provides the equivalent-system reduction whose Kalman-Bucy theory settles
existence/uniqueness of the steady-state covariance, rank tests for strong
observability, windowed controllability/observability Gramian bounds,
exponential bias envelopes for biased initialization, and Monte Carlo
consistency metrics (NEES, RMSE).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import lincore
from .errors import NoFiniteBound


def equivalent_system(g, dec, auxp):
    """Reduce the filter error dynamics to an uncorrelated Kalman-Bucy
    problem; returns ``(A_e, Q_e)``.

    The correlated part of the feedthrough-free channel noise is absorbed
    into the drift, after which standard detectability/stabilizability
    criteria on ``(A_e, C2, Q_e)`` govern the Riccati flow.
    """
    R2i = np.linalg.inv(dec.R2) if dec.R2.shape[0] else dec.R2
    GMRg = dec.G2 @ g.M2 @ auxp.Rgrave2.T
    Ae = g.Abar + GMRg @ R2i @ dec.C2
    Qe = g.Qbar - GMRg @ R2i @ GMRg.T
    return Ae, lincore.symmetrize(Qe)


def pbh_tests(Ae, C2, Qe, tol=lincore.RANK_TOL):
    """Popov-Belevitch-Hautus tests on the equivalent system.

    Returns ``(detectable, stabilizable)``: detectability of ``(Ae, C2)``
    and stabilizability of ``(Ae, Qe^{1/2})``, checked at the closed-
    right-half-plane eigenvalues of ``Ae``.
    """
    n = Ae.shape[0]
    w, _ = np.linalg.eig(Ae)
    Qs = lincore.psd_floor(Qe)
    ew, eV = np.linalg.eigh(Qs)
    Qsqrt = eV @ np.diag(np.sqrt(np.maximum(ew, 0.0))) @ eV.T
    detectable = True
    stabilizable = True
    for lam in w:
        if lam.real < -tol:
            continue
        M = lam * np.eye(n) - Ae
        if _crank(np.vstack([M, C2])) < n:
            detectable = False
        if _crank(np.hstack([M, Qsqrt.astype(complex)])) < n:
            stabilizable = False
    return detectable, stabilizable


def _crank(M, tol=lincore.RANK_TOL):
    M = np.asarray(M, dtype=complex)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def strong_observability(A, G, C, H, probes=None, tol=lincore.RANK_TOL,
                         rng=None):
    """Rank test ``rank [sI-A, -G; C, H] == n + p`` at probe points.

    Probes default to the eigenvalues of ``A`` plus eight random complex
    points; the pencil has full column rank for all ``s`` iff it has it at
    every eigenvalue of ``A`` and at one generic point.
    """
    A = lincore.asmatrix(A)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    C = lincore.asmatrix(C)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = A.shape[0]
    p = G.shape[1]
    if probes is None:
        rng = rng or np.random.default_rng(0)
        probes = list(np.linalg.eigvals(A)) + list(
            rng.standard_normal(8) + 1j * rng.standard_normal(8)
        )
    for s in probes:
        M = np.block([
            [s * np.eye(n) - A, -G],
            [C.astype(complex), H.astype(complex)],
        ])
        if _crank(M, tol) < n + p:
            return False
    return True


def strong_observability_reduced(A, G, C, H, dec, probes=None,
                                 tol=lincore.RANK_TOL, rng=None):
    """Equivalent reduced test on the feedthrough-free channel:
    ``rank [sI - Ahat, -G2; C2, 0] == n + p - rank(H)``."""
    n = A.shape[0]
    p = np.atleast_2d(G).shape[1]
    r = dec.svd.rank
    M1 = np.diag(1.0 / dec.svd.sigma) if r else np.zeros((0, 0))
    Ahat = A - dec.G1 @ M1 @ dec.C1
    if probes is None:
        rng = rng or np.random.default_rng(0)
        probes = list(np.linalg.eigvals(Ahat)) + list(
            rng.standard_normal(8) + 1j * rng.standard_normal(8)
        )
    n2 = dec.G2.shape[1]
    l2 = dec.C2.shape[0]
    for s in probes:
        M = np.block([
            [s * np.eye(n) - Ahat, -dec.G2.astype(complex)],
            [dec.C2.astype(complex), np.zeros((l2, n2))],
        ])
        if _crank(M, tol) < n + p - r:
            return False
    return True


@dataclass
class GramianBounds:
    ts: np.ndarray
    min_eigs: np.ndarray
    max_eigs: np.ndarray
    alpha: float
    beta: float

    @property
    def uniform(self):
        return bool(self.alpha > 0)


def gramian_bounds(A_fn, Y_fn, eps, t_grid, h=None):
    """Windowed Gramian ``W(t) = int_{t-eps}^t Phi(t,s) Y Y' Phi(t,s)' ds``
    eigenvalue bounds over ``t_grid``.

    ``W(t)`` is obtained by integrating the Lyapunov differential equation
    ``Pdot = A P + P A' + Y Y'`` from zero over the window.  For the
    observability version pass ``A_fn = lambda t: -A(t).T`` and
    ``Y_fn = lambda t: C(t).T`` (time-reversed adjoint flow).
    """
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if h is None:
        h = eps / 64.0
    n = np.atleast_2d(A_fn(t_grid[0])).shape[0]
    mins = np.zeros(t_grid.size)
    maxs = np.zeros(t_grid.size)
    for i, t in enumerate(t_grid):
        def rhs(s, Pf):
            P = Pf.reshape(n, n)
            Y = np.atleast_2d(Y_fn(s))
            A = np.atleast_2d(A_fn(s))
            return (A @ P + P @ A.T + Y @ Y.T).ravel()

        _, ys = lincore.integrate_ode(rhs, np.zeros(n * n), t - eps, t, h)
        W = lincore.symmetrize(ys[-1].reshape(n, n))
        ev = np.linalg.eigvalsh(W)
        mins[i] = ev[0]
        maxs[i] = ev[-1]
    return GramianBounds(
        ts=t_grid, min_eigs=mins, max_eigs=maxs,
        alpha=float(mins.min()), beta=float(maxs.max()),
    )


@dataclass
class BiasBounds:
    """Exponential envelopes for biased initialization.

    ``||E[x_err](t)|| <= beta * exp(-gamma (t - t0))`` and the induced
    input-estimate bias obeys ``alpha1 * exp(-gamma (t - t0))`` (plus the
    lag term ``alpha2 * fd_dt`` for the lagged-difference filter).
    """

    S: np.ndarray
    beta: float
    gamma: float
    alpha1: float


def bias_bounds(g, dec, bias0):
    """Envelope constants from the steady-state estimator matrices.

    ``g`` holds the (constant) gains, ``bias0`` the initial mean error.
    The certificate matrix solves ``Acheck' S + S Acheck = -I`` for the
    error drift ``Acheck = Abar - L C2``; it exists iff the estimator is
    exponentially stable.
    """
    Acheck = g.Abar - g.L @ dec.C2
    if lincore.eig(Acheck).max_real_part >= 0:
        raise NoFiniteBound("estimator drift is not Hurwitz")
    S = lincore.solve_lyapunov(Acheck.T, np.eye(Acheck.shape[0]))
    ev = np.linalg.eigvalsh(S)
    gamma = 1.0 / (2.0 * ev[-1])
    b0 = np.asarray(bias0, dtype=float)
    beta = float(np.sqrt((b0 @ S @ b0) / ev[0]))
    f = dec.svd
    M1C1 = f.V1 @ g.M1 @ dec.C1
    M2CA = f.V2 @ g.M2 @ g.CAhat
    spec_norm = lambda M: float(np.linalg.norm(M, 2)) if M.size else 0.0
    gain = spec_norm(M1C1) + spec_norm(M2CA)
    return BiasBounds(S=S, beta=beta, gamma=float(gamma), alpha1=beta * gain)


def expected_z2ddot(sched, t, dec, x, u, udot, uddot, d1, d2, d1dot, d2dot):
    """Mean second derivative of the feedthrough-free channel ``z2``.

    All feedthrough terms drop because ``T2 H1``, ``T2 H1dot`` and
    ``T2 H1ddot`` vanish along the analytic factorization; what remains is
    the twice-differentiated regular output path with the noise means set
    to zero.
    """
    A, B, C, D = sched.A(t), sched.B(t), sched.C(t), sched.D(t)
    Adot, Bdot, Cdot, Ddot = (sched.Adot(t), sched.Bdot(t), sched.Cdot(t),
                              sched.Ddot(t))
    Cddot, Dddot = sched.Cddot(t), sched.Dddot(t)
    G1, G2 = dec.G1, dec.G2
    G1dot = sched.Gdot(t) @ dec.svd.V1
    G2dot = sched.Gdot(t) @ dec.svd.V2
    T2 = dec.T2
    val = (
        (Cddot + 2.0 * Cdot @ A + C @ Adot + C @ A @ A) @ x
        + (Dddot + 2.0 * Cdot @ B + C @ Bdot + C @ A @ B) @ u
        + (2.0 * Ddot + C @ B) @ udot
        + D @ uddot
        + (2.0 * Cdot @ G1 + C @ G1dot + C @ A @ G1) @ d1
        + C @ G1 @ d1dot
        + (2.0 * Cdot @ G2 + C @ G2dot + C @ A @ G2) @ d2
        + C @ G2 @ d2dot
    )
    return T2 @ val


def lag_bias_gain(g, dec, ez2ddot):
    """Pointwise value of ``||V2 M2 E[z2ddot]|| / 2``; its supremum over
    the horizon is the lag-bias constant ``alpha2``."""
    return 0.5 * float(np.linalg.norm(dec.svd.V2 @ g.M2 @ ez2ddot))


def lag_variance_gain(g, dec, sched, gm, t, Pw, Pv):
    """Pointwise value of the trace-gap constant; its supremum is
    ``alpha3`` in ``|tr(Pd_fd) - tr(Pd)| <= alpha3 * fd_dt**2``."""
    C, W = sched.C(t), sched.W(t)
    Cdot, Wdot = sched.Cdot(t), sched.Wdot(t)
    T2, M2 = dec.T2, g.M2
    Avrow = np.hstack([-gm.A_v, -gm.A_vdot])
    inner = (
        C @ W @ gm.B_w @ gm.Q_G @ gm.B_w.T @ W.T @ C.T
        + Avrow @ Pv @ Avrow.T
        + gm.B_v @ gm.R_G @ gm.B_v.T
        + (Cdot @ W + C @ Wdot - C @ W @ gm.A_w) @ Pw
        @ (Cdot @ W + C @ Wdot - C @ W @ gm.A_w).T
    )
    val = M2 @ T2 @ inner @ T2.T @ M2.T
    return abs(0.25 * float(np.trace(val)))


@dataclass
class ConsistencyReport:
    nees_mean: np.ndarray
    nees_band: tuple
    nees_fraction_in_band: float
    rmse_state: np.ndarray
    rmse_input: Optional[np.ndarray]


def consistency_metrics(errors, Px_traj, input_errors=None, confidence=0.95):
    """NEES/RMSE metrics across a Monte Carlo ensemble.

    ``errors`` has shape ``(trials, T, n)``, ``Px_traj`` shape
    ``(T, n, n)``.  The NEES band is the two-sided chi-square interval for
    the per-time trial average.
    """
    from scipy.stats import chi2

    errors = np.asarray(errors, dtype=float)
    trials, T, n = errors.shape
    nees = np.zeros((trials, T))
    for k in range(T):
        Pi = np.linalg.inv(Px_traj[k])
        e = errors[:, k, :]
        nees[:, k] = np.einsum("ij,jk,ik->i", e, Pi, e)
    mean_nees = nees.mean(axis=0)
    a = (1.0 - confidence) / 2.0
    lo = chi2.ppf(a, trials * n) / trials
    hi = chi2.ppf(1.0 - a, trials * n) / trials
    frac = float(np.mean((mean_nees >= lo) & (mean_nees <= hi)))
    rmse_state = np.sqrt(np.mean(errors ** 2, axis=(0, 1)))
    rmse_input = None
    if input_errors is not None:
        ie = np.asarray(input_errors, dtype=float)
        rmse_input = np.sqrt(np.nanmean(ie ** 2, axis=(0, 1)))
    return ConsistencyReport(
        nees_mean=mean_nees,
        nees_band=(float(lo), float(hi)),
        nees_fraction_in_band=frac,
        rmse_state=rmse_state,
        rmse_input=rmse_input,
    )


def steady_state_covariance(gain_builder, P0, max_iter=200, tol=1e-12):
    """Self-consistent steady covariance of the filter Riccati flow.

    ``gain_builder(P)`` must return ``(Abar, C2, Qbar, R2, S)`` for the
    gains computed at covariance ``P``; the fixed point of
    ``P -> care(Abar(P), C2, Qbar(P), R2, S(P))`` is the stationary
    covariance.  Raises ``NoStabilizingSolution`` (from the inner solver)
    when the equivalent system is not detectable/stabilizable.
    """
    P = lincore.symmetrize(np.asarray(P0, dtype=float))
    for _ in range(max_iter):
        Abar, C2, Qbar, R2, S = gain_builder(P)
        Pn = lincore.solve_care(Abar, C2, Qbar, R2, S)
        if np.linalg.norm(Pn - P) <= tol * max(1.0, np.linalg.norm(Pn)):
            return Pn
        P = Pn
    return P
