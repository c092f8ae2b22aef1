"""Minimum-variance unbiased joint input/state filter using an auxiliary
derivative-bearing measurement.

The filter splits the unknown input through the feedthrough SVD: the
component ``d1`` seen directly in the output is inverted through the
decoupled channel ``z1``, while the component ``d2`` entering only the
dynamics is recovered from the auxiliary measurement channel ``z2bar``.
The state estimate then runs a Kalman-Bucy-type correction on the
feedthrough-free channel ``z2`` with the optimal correlated-noise gain.

Gains are recomputed at every integrator stage from the current error
covariance, so the same code path covers time-varying coefficient
schedules.  Because none of the gains depend on measured data, a gain
schedule can be precomputed once and replayed across Monte Carlo trials
(see :meth:`EliseFilter.prepare`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import asvd, lincore, sysmodel
from .errors import (
    IllConditionedInnovation,
    InvalidInput,
    UnidentifiableInput,
)


@dataclass
class AuxProjection:
    """Auxiliary-channel matrices projected through ``T2bar``.

    ``C2bar = T2bar Cbar`` etc.; ``Rbar2``/``Rgrave2``/``Rgrave12`` are the
    projected auxiliary noise intensity and its cross terms with the two
    output channels.
    """

    T2bar: np.ndarray
    C2bar: np.ndarray
    T2Cdd: np.ndarray
    D2bar: np.ndarray
    T2Ddd: np.ndarray
    Rbar2: np.ndarray
    Rgrave12: np.ndarray
    Rgrave2: np.ndarray


def aux_projection_white(aux, noise, dec, t, tol=lincore.RANK_TOL):
    """Build the projected auxiliary matrices for white measurement noise."""
    fbar = aux.structured(t, tol)
    T2bar = fbar.U2.T
    lbar = aux.lbar
    l = dec.T2.shape[1]
    Rbar = np.atleast_2d(noise.Rbar(t)) if noise.Rbar is not None else np.zeros((lbar, lbar))
    Rg = (
        np.atleast_2d(noise.Rgrave(t))
        if noise.Rgrave is not None
        else np.zeros((l, lbar))
    )
    return AuxProjection(
        T2bar=T2bar,
        C2bar=T2bar @ aux.Cbar(t),
        T2Cdd=T2bar @ aux.Cddash(t),
        D2bar=T2bar @ aux.Dbar(t),
        T2Ddd=T2bar @ aux.Dddash(t),
        Rbar2=T2bar @ Rbar @ T2bar.T,
        Rgrave12=dec.T1 @ Rg @ T2bar.T,
        Rgrave2=dec.T2 @ Rg @ T2bar.T,
    )


@dataclass
class EliseGains:
    """All gain and covariance-propagation matrices at one instant."""

    M1: np.ndarray
    M2: np.ndarray
    L: np.ndarray
    Ahat: np.ndarray
    Qhat: np.ndarray
    Rtilde2: np.ndarray
    Rtilde2_inv: np.ndarray
    Abar: np.ndarray
    Qbar: np.ndarray
    Pd2: np.ndarray
    CAfull: np.ndarray   # C2bar A + T2bar Cddash
    CAhat: np.ndarray    # C2bar Ahat + T2bar Cddash
    C2barB: np.ndarray
    C2barG1: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Px: np.ndarray


@dataclass
class InputEstimate:
    """Input estimate and its covariance blocks in original coordinates."""

    d1: np.ndarray
    d2: np.ndarray
    d: np.ndarray
    Pd1: np.ndarray
    Pd2: np.ndarray
    Pd12: np.ndarray
    Pd: np.ndarray


def compute_gains(dec, auxp, A, B, W, Q, Px, include_aux_noise=True,
                  pd_tol=1e-10):
    """Gain set for the current decoupled system and error covariance.

    ``Q`` is the process-noise intensity (or, for the colored-noise
    variant, the current process-noise covariance).  With
    ``include_aux_noise`` the auxiliary-channel noise feeds back into the
    covariance propagation term ``Qbar``; the lagged-difference variant
    omits it.
    """
    f = dec.svd
    r = f.rank
    p = f.p
    n = A.shape[0]
    M1 = np.diag(1.0 / f.sigma) if r else np.zeros((0, 0))
    G1, G2 = dec.G1, dec.G2
    C1, C2 = dec.C1, dec.C2
    Qhat = W @ Q @ W.T + G1 @ M1 @ dec.R1 @ M1.T @ G1.T
    Ahat = A - G1 @ M1 @ C1
    CAhat = auxp.C2bar @ Ahat + auxp.T2Cdd
    CAfull = auxp.C2bar @ A + auxp.T2Cdd
    Rg12 = auxp.Rgrave12
    Rt2 = (
        CAhat @ Px @ CAhat.T
        + auxp.C2bar @ Qhat @ auxp.C2bar.T
        + auxp.Rbar2
        - Rg12.T @ M1.T @ G1.T @ auxp.C2bar.T
        - auxp.C2bar @ G1 @ M1 @ Rg12
    )
    Rt2 = lincore.symmetrize(Rt2)
    n2 = p - r  # dimension of the dynamics-only input component
    if n2 > 0:
        if Rt2.shape[0] == 0:
            raise UnidentifiableInput(
                "auxiliary channel is empty but a dynamics-only input remains"
            )
        ev = np.linalg.eigvalsh(Rt2)
        if ev[0] <= pd_tol * max(1.0, ev[-1]):
            raise IllConditionedInnovation(
                "auxiliary innovation covariance is numerically singular"
            )
        Rt2i = np.linalg.inv(Rt2)
        CG = auxp.C2bar @ G2
        if lincore.rank(CG) < n2:
            raise UnidentifiableInput(
                "C2bar G2 loses rank; dynamics-only input not identifiable"
            )
        X = G2.T @ auxp.C2bar.T @ Rt2i
        Pd2 = np.linalg.inv(X @ CG)
        M2 = Pd2 @ X
    else:
        Rt2i = np.linalg.inv(Rt2) if Rt2.shape[0] else np.zeros_like(Rt2)
        M2 = np.zeros((0, Rt2.shape[0]))
        Pd2 = np.zeros((0, 0))
    IGM = np.eye(n) - G2 @ M2 @ auxp.C2bar
    Abar = IGM @ Ahat - G2 @ M2 @ auxp.T2Cdd
    Qbar = IGM @ Qhat @ IGM.T
    if include_aux_noise:
        Qbar = Qbar + G2 @ M2 @ auxp.Rbar2 @ M2.T @ G2.T
    Qbar = lincore.symmetrize(Qbar)
    R2i = np.linalg.inv(dec.R2) if dec.R2.shape[0] else dec.R2
    L = (Px @ C2.T - G2 @ M2 @ auxp.Rgrave2.T) @ R2i
    return EliseGains(
        M1=M1, M2=M2, L=L, Ahat=Ahat, Qhat=Qhat, Rtilde2=Rt2,
        Rtilde2_inv=Rt2i, Abar=Abar, Qbar=Qbar, Pd2=Pd2,
        CAfull=CAfull, CAhat=CAhat,
        C2barB=auxp.C2bar @ B, C2barG1=auxp.C2bar @ G1,
        A=A, B=B, Px=Px,
    )


def estimate_input(g, dec, auxp, xhat, u, udot, z1, z2bar):
    """Point estimate of the unknown input and its covariance blocks."""
    f = dec.svd
    M1, M2 = g.M1, g.M2
    d1 = M1 @ (z1 - dec.C1 @ xhat - dec.D1 @ u)
    d2 = M2 @ (
        z2bar
        - g.CAfull @ xhat
        - g.C2barB @ u
        - g.C2barG1 @ d1
        - auxp.D2bar @ udot
        - auxp.T2Ddd @ u
    )
    Px = g.Px
    Pd1 = M1 @ (dec.C1 @ Px @ dec.C1.T + dec.R1) @ M1.T
    Pd12 = (
        M1 @ dec.C1 @ Px @ g.CAhat.T @ M2.T
        - M1 @ dec.R1 @ M1.T @ dec.G1.T @ auxp.C2bar.T @ M2.T
        + M1 @ auxp.Rgrave12 @ M2.T
    )
    Pd = (
        f.V1 @ Pd1 @ f.V1.T
        + f.V1 @ Pd12 @ f.V2.T
        + f.V2 @ Pd12.T @ f.V1.T
        + f.V2 @ g.Pd2 @ f.V2.T
    )
    d = f.V1 @ d1 + f.V2 @ d2
    return InputEstimate(d1=d1, d2=d2, d=d, Pd1=Pd1, Pd2=g.Pd2, Pd12=Pd12, Pd=Pd)


def filter_rhs(g, dec, xhat, u, z2, d1, d2):
    """State-estimate and covariance derivatives for the current gains."""
    innov = z2 - dec.C2 @ xhat - dec.D2 @ u
    xdot = g.A @ xhat + g.B @ u + dec.G1 @ d1 + dec.G2 @ d2 + g.L @ innov
    Pxdot = g.Abar @ g.Px + g.Px @ g.Abar.T + g.Qbar - g.L @ dec.R2 @ g.L.T
    return xdot, lincore.symmetrize(Pxdot)


@dataclass
class Signals:
    """Measured signals at one time instant (``ybar`` may be ``None``)."""

    y: np.ndarray
    ybar: Optional[np.ndarray]
    u: np.ndarray
    udot: np.ndarray


def zoh_signals(traj, sched, u_override=None):
    """Signal provider holding grid samples constant over each step."""
    y_sig = lincore.GridSignal(traj.ts, traj.y)
    ybar_sig = lincore.GridSignal(traj.ts, traj.ybar) if traj.ybar is not None else None
    u_sig = lincore.GridSignal(traj.ts, traj.u) if traj.u.shape[1] else None

    def provider(t):
        if u_override is not None:
            u = np.atleast_1d(u_override(t))
        elif u_sig is not None:
            u = u_sig(t)
        else:
            u = np.zeros(sched.m)
        return Signals(
            y=y_sig(t),
            ybar=ybar_sig(t) if ybar_sig is not None else None,
            u=u,
            udot=np.atleast_1d(sched.udot(t)),
        )

    return provider


@dataclass
class FilterState:
    t: float
    xhat: np.ndarray
    Px: np.ndarray


class EliseFilter:
    """Joint input/state filter driven by an auxiliary measurement."""

    def __init__(self, sched, noise, aux, tol=lincore.RANK_TOL, cov_floor=0.0):
        if aux is None and sched.p > 0:
            # An aux channel is only dispensable when every input direction
            # appears in the feedthrough; checked lazily at the first step.
            pass
        self.sched = sched
        self.noise = noise
        self.aux = aux
        self.tol = tol
        self.cov_floor = cov_floor
        self._fprev = None

    # -- per-instant machinery -------------------------------------------------

    def _stage(self, t, Px):
        sched = self.sched
        f = asvd.structured_svd(sched.H(t), self.tol)
        f = asvd.align_signs(f, self._fprev)
        self._fprev = f
        dec = sysmodel.decouple(sched, np.atleast_2d(self.noise.R(t)), t, self.tol, f=f)
        if self.aux is not None:
            auxp = aux_projection_white(self.aux, self.noise, dec, t, self.tol)
        else:
            lbar = 0
            z = np.zeros((0, 0))
            auxp = AuxProjection(
                T2bar=np.zeros((0, 0)),
                C2bar=np.zeros((0, sched.n)),
                T2Cdd=np.zeros((0, sched.n)),
                D2bar=np.zeros((0, sched.m)),
                T2Ddd=np.zeros((0, sched.m)),
                Rbar2=z,
                Rgrave12=np.zeros((dec.T1.shape[0], lbar)),
                Rgrave2=np.zeros((dec.T2.shape[0], lbar)),
            )
        g = compute_gains(
            dec, auxp, sched.A(t), sched.B(t), sched.W(t),
            np.atleast_2d(self.noise.Q(t)), Px,
        )
        return dec, auxp, g

    # -- public stepping API ---------------------------------------------------

    def step(self, state, signals, h):
        """Advance ``(xhat, Px)`` one RK4 step; returns the new state and
        the input estimate emitted at the step's start time."""
        sched = self.sched
        t0 = state.t
        n = sched.n

        est_out = {}

        def rhs(t, y):
            xhat = y[:n]
            Px = lincore.psd_floor(y[n:].reshape(n, n), self.cov_floor)
            dec, auxp, g = self._stage(t, Px)
            sig = signals(t)
            z1 = dec.T1 @ sig.y
            z2 = dec.T2 @ sig.y
            z2bar = (
                auxp.T2bar @ sig.ybar
                if (sig.ybar is not None and auxp.T2bar.shape[1])
                else np.zeros(auxp.T2bar.shape[0])
            )
            est = estimate_input(g, dec, auxp, xhat, sig.u, sig.udot, z1, z2bar)
            if t == t0 and "est" not in est_out:
                est_out["est"] = est
            xdot, Pxdot = filter_rhs(g, dec, xhat, sig.u, z2, est.d1, est.d2)
            return np.concatenate([xdot, Pxdot.ravel()])

        y0 = np.concatenate([state.xhat, state.Px.ravel()])
        y1 = lincore.rk4_step(rhs, t0, y0, h)
        Px1 = lincore.psd_floor(y1[n:].reshape(n, n), self.cov_floor)
        new = FilterState(t=t0 + h, xhat=y1[:n], Px=Px1)
        return new, est_out.get("est")

    def run(self, t0, t1, h, xhat0, P0x, signals):
        """Run over ``[t0, t1]`` and return stacked trajectories."""
        n = self.sched.n
        state = FilterState(t=t0, xhat=np.asarray(xhat0, dtype=float).copy(),
                            Px=lincore.symmetrize(np.asarray(P0x, dtype=float)))
        N = int(round((t1 - t0) / h))
        ts = t0 + h * np.arange(N + 1)
        xh = np.zeros((N + 1, n))
        trP = np.zeros(N + 1)
        dh = np.zeros((N + 1, self.sched.p))
        trPd = np.zeros(N + 1)
        Px_hist = np.zeros((N + 1, n, n))
        for k in range(N):
            xh[k] = state.xhat
            trP[k] = np.trace(state.Px)
            Px_hist[k] = state.Px
            state, est = self.step(state, signals, h)
            if est is not None:
                dh[k] = est.d
                trPd[k] = np.trace(est.Pd)
        xh[N] = state.xhat
        trP[N] = np.trace(state.Px)
        Px_hist[N] = state.Px
        # Final-instant input estimate.
        dec, auxp, g = self._stage(state.t, state.Px)
        sig = signals(state.t)
        z1 = dec.T1 @ sig.y
        z2bar = (
            auxp.T2bar @ sig.ybar
            if (sig.ybar is not None and auxp.T2bar.shape[1])
            else np.zeros(auxp.T2bar.shape[0])
        )
        est = estimate_input(g, dec, auxp, state.xhat, sig.u, sig.udot, z1, z2bar)
        dh[N] = est.d
        trPd[N] = np.trace(est.Pd)
        return FilterRun(ts=ts, xhat=xh, dhat=dh, tr_Px=trP, tr_Pd=trPd, Px=Px_hist)

    # -- precomputed-gain fast path ---------------------------------------------

    def prepare(self, t0, t1, h, P0x):
        """Propagate the covariance once and cache per-stage gain sets.

        The returned schedule can be replayed for any number of trials via
        :meth:`run_with_gains`; gains do not depend on measured data.
        """
        n = self.sched.n
        N = int(round((t1 - t0) / h))
        Px = lincore.symmetrize(np.asarray(P0x, dtype=float))
        stages = []
        offsets = (0.0, 0.5, 0.5, 1.0)
        for k in range(N):
            t = t0 + k * h
            ks = []
            stage_data = []
            for i, c in enumerate(offsets):
                Pi = Px if i == 0 else lincore.psd_floor(Px + h * (0.5 if i < 3 else 1.0) * ks[i - 1], self.cov_floor)
                dec, auxp, g = self._stage(t + c * h, Pi)
                Pdot = (
                    g.Abar @ Pi + Pi @ g.Abar.T + g.Qbar
                    - g.L @ dec.R2 @ g.L.T
                )
                ks.append(lincore.symmetrize(Pdot))
                stage_data.append((dec, auxp, g))
            Px = lincore.psd_floor(
                Px + (h / 6.0) * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3]),
                self.cov_floor,
            )
            stages.append(stage_data)
        dec, auxp, g = self._stage(t1, Px)
        return GainSchedule(t0=t0, h=h, stages=stages, final=(dec, auxp, g))

    def run_with_gains(self, gain_schedule, xhat0, signals):
        """Replay a precomputed gain schedule against one data realization."""
        gs = gain_schedule
        h = gs.h
        N = len(gs.stages)
        n = self.sched.n
        p = self.sched.p
        ts = gs.t0 + h * np.arange(N + 1)
        xh = np.zeros((N + 1, n))
        dh = np.zeros((N + 1, p))
        trP = np.zeros(N + 1)
        trPd = np.zeros(N + 1)
        xhat = np.asarray(xhat0, dtype=float).copy()
        offsets = (0.0, 0.5, 0.5, 1.0)
        for k in range(N):
            t = ts[k]
            xh[k] = xhat
            ks = []
            for i, c in enumerate(offsets):
                dec, auxp, g = gs.stages[k][i]
                xi = xhat if i == 0 else xhat + h * (0.5 if i < 3 else 1.0) * ks[i - 1]
                sig = signals(t + c * h)
                z1 = dec.T1 @ sig.y
                z2 = dec.T2 @ sig.y
                z2bar = (
                    auxp.T2bar @ sig.ybar
                    if (sig.ybar is not None and auxp.T2bar.shape[1])
                    else np.zeros(auxp.T2bar.shape[0])
                )
                est = estimate_input(g, dec, auxp, xi, sig.u, sig.udot, z1, z2bar)
                if i == 0:
                    dh[k] = est.d
                    trP[k] = np.trace(g.Px)
                    trPd[k] = np.trace(est.Pd)
                xdot, _ = filter_rhs(g, dec, xi, sig.u, z2, est.d1, est.d2)
                ks.append(xdot)
            xhat = xhat + (h / 6.0) * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
        dec, auxp, g = gs.final
        sig = signals(ts[N])
        z1 = dec.T1 @ sig.y
        z2bar = (
            auxp.T2bar @ sig.ybar
            if (sig.ybar is not None and auxp.T2bar.shape[1])
            else np.zeros(auxp.T2bar.shape[0])
        )
        est = estimate_input(g, dec, auxp, xhat, sig.u, sig.udot, z1, z2bar)
        xh[N] = xhat
        dh[N] = est.d
        trP[N] = np.trace(g.Px)
        trPd[N] = np.trace(est.Pd)
        return FilterRun(ts=ts, xhat=xh, dhat=dh, tr_Px=trP, tr_Pd=trPd, Px=None)


@dataclass
class GainSchedule:
    t0: float
    h: float
    stages: list
    final: tuple


@dataclass
class FilterRun:
    ts: np.ndarray
    xhat: np.ndarray
    dhat: np.ndarray
    tr_Px: np.ndarray
    tr_Pd: np.ndarray
    Px: Optional[np.ndarray] = None
