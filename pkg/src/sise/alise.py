"""Derivative-free joint input/state filter for colored-noise models.

This variant avoids the auxiliary derivative measurement by (a) modelling
the process and measurement noises as Gauss-Markov processes whose
covariances are propagated alongside the filter, and (b) replacing the
output derivative with a lagged finite difference of the feedthrough-free
channel ``z2``.  The state estimator is realized in a shifted coordinate
``theta = xhat - Phi1 y - Phi2 u`` so that no measured signal ever needs to
be differentiated; that requires the time derivatives of every gain
matrix, which are assembled in :func:`derivative_matrices` from the
analytic-SVD factor rates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import asvd, lincore, sysmodel
from .elise import (
    AuxProjection,
    FilterRun,
    InputEstimate,
    Signals,
    compute_gains,
    estimate_input,
)
from .errors import InvalidInput, NeedWarmup


def derived_covariances(Pv, dec):
    """Channel noise intensities induced by the stacked ``(v, vdot)``
    covariance: returns ``(R1, R2, Rbar2, Rgrave2, Rgrave12)``."""
    l = dec.T2.shape[1]
    P11 = Pv[:l, :l]
    P12 = Pv[:l, l:]
    P22 = Pv[l:, l:]
    T1, T2 = dec.T1, dec.T2
    return (
        T1 @ P11 @ T1.T,
        T2 @ P11 @ T2.T,
        T2 @ P22 @ T2.T,
        T2 @ P12 @ T2.T,
        T1 @ P12 @ T2.T,
    )


def aux_projection_gm(dec, Cdot, Ddot, Pv):
    """Special-case auxiliary projection: the differentiated output
    equation itself, with noise intensities from the Gauss-Markov
    covariance ``Pv``."""
    R1, R2, Rbar2, Rgrave2, Rgrave12 = derived_covariances(Pv, dec)
    return AuxProjection(
        T2bar=dec.T2,
        C2bar=dec.C2,
        T2Cdd=dec.T2 @ Cdot,
        D2bar=dec.D2,
        T2Ddd=dec.T2 @ Ddot,
        Rbar2=Rbar2,
        Rgrave12=Rgrave12,
        Rgrave2=Rgrave2,
    )


@dataclass
class AliseDerivs:
    """Gain-matrix time derivatives and the shifted-form constant blocks."""

    M1dot: np.ndarray
    M2dot: np.ndarray
    Phi1dot: np.ndarray
    Phi2dot: np.ndarray
    Bbar: np.ndarray
    Gbar: np.ndarray
    Ahat_dot: np.ndarray
    Qhat_dot: np.ndarray
    Rtilde2_dot: np.ndarray
    R1dot: np.ndarray
    Rgrave12_dot: np.ndarray


def derivative_matrices(sched, t, dec, rates, g, Pw, Pv, Pw_dot, Pv_dot,
                        Px_dot, T1dot_mat):
    """Time derivatives of the gain matrices at one instant.

    ``g`` must hold the gains computed with the special-case auxiliary
    projection (``C2bar = C2`` etc.).  ``Px_dot`` is the current Riccati
    right-hand side; the noise-covariance rates come from the shaping
    filters.  Derivatives of the coefficient schedule are read from
    ``sched`` (analytic when provided, finite-difference otherwise).
    """
    f = dec.svd
    l = sched.l
    T1, T2 = dec.T1, dec.T2
    U2, V1, V2 = f.U2, f.V1, f.V2
    C1, C2 = dec.C1, dec.C2
    G1, G2 = dec.G1, dec.G2
    M1, M2 = g.M1, g.M2
    A, B, C, D, G, W = (sched.A(t), sched.B(t), sched.C(t), sched.D(t),
                        sched.G(t), sched.W(t))
    Adot, Cdot, Ddot, Gdot, Wdot = (sched.Adot(t), sched.Cdot(t),
                                    sched.Ddot(t), sched.Gdot(t),
                                    sched.Wdot(t))
    Cddot = sched.Cddot(t)
    Sd = np.diag(rates.sigma_dot) if f.rank else np.zeros((0, 0))
    P11d = Pv_dot[:l, :l]
    P12 = Pv[:l, l:]
    P12d = Pv_dot[:l, l:]
    P22d = Pv_dot[l:, l:]

    M1dot = -M1 @ Sd @ M1
    G1dot = Gdot @ V1 + G @ V1 @ rates.F
    G2dot = Gdot @ V2
    C1dot = T1 @ Cdot + T1dot_mat @ C
    R1dot = (
        T1dot_mat @ Pv[:l, :l] @ T1.T
        + T1 @ P11d @ T1.T
        + T1 @ Pv[:l, :l] @ T1dot_mat.T
    )
    Rg12 = T1 @ P12 @ T2.T
    Rg12dot = T1dot_mat @ P12 @ T2.T + T1 @ P12d @ T2.T
    Rbar2dot = T2 @ P22d @ T2.T

    Ahat_dot = Adot - G1dot @ M1 @ C1 - G1 @ M1dot @ C1 - G1 @ M1 @ C1dot
    M1R1M1 = M1 @ dec.R1 @ M1.T
    Qhat_dot = (
        G1dot @ M1R1M1 @ G1.T
        + G1 @ M1dot @ dec.R1 @ M1.T @ G1.T
        + W @ Pw_dot @ W.T
        + Wdot @ Pw @ W.T
        + W @ Pw @ Wdot.T
        + G1 @ M1 @ dec.R1 @ M1dot.T @ G1.T
        + G1 @ M1R1M1 @ G1dot.T
        + G1 @ M1 @ R1dot @ M1.T @ G1.T
    )
    CAhat = g.CAhat
    CAhat_dot = T2 @ Cdot @ g.Ahat + C2 @ Ahat_dot + T2 @ Cddot
    Px = g.Px
    Rt2_dot = (
        CAhat_dot @ Px @ CAhat.T
        + CAhat @ Px_dot @ CAhat.T
        + CAhat @ Px @ CAhat_dot.T
        + C2 @ Qhat_dot @ C2.T
        + T2 @ Cdot @ g.Qhat @ C2.T
        + C2 @ g.Qhat @ Cdot.T @ T2.T
        + Rbar2dot
        - Rg12dot.T @ M1.T @ G1.T @ C2.T
        - Rg12.T @ M1dot.T @ G1.T @ C2.T
        - Rg12.T @ M1.T @ G1dot.T @ C2.T
        - Rg12.T @ M1.T @ G1.T @ Cdot.T @ T2.T
        - C2 @ G1 @ M1 @ Rg12dot
        - C2 @ G1 @ M1dot @ Rg12
        - C2 @ G1dot @ M1 @ Rg12
        - T2 @ Cdot @ G1 @ M1 @ Rg12
    )
    Rt2i = g.Rtilde2_inv
    if M2.shape[0]:
        lead = g.Pd2 @ (
            -G2.T @ C2.T @ Rt2i @ Rt2_dot @ Rt2i
            + V2.T @ Gdot.T @ C2.T @ Rt2i
            + G2.T @ Cdot.T @ U2 @ Rt2i
        )
        inner = (
            -G2.T @ C2.T @ Rt2i @ Rt2_dot @ Rt2i @ C2 @ G2
            + V2.T @ Gdot.T @ C2.T @ Rt2i @ C2 @ G2
            + G2.T @ Cdot.T @ U2 @ Rt2i @ C2 @ G2
            + G2.T @ C2.T @ Rt2i @ U2.T @ Cdot @ G2
            + G2.T @ C2.T @ Rt2i @ C2 @ Gdot @ V2
        )
        M2dot = lead - g.Pd2 @ inner @ M2
    else:
        M2dot = np.zeros_like(M2)

    Phi1dot = Gdot @ V2 @ M2 @ U2.T + G2 @ M2dot @ U2.T
    Phi2dot = -Gdot @ V2 @ M2 @ dec.D2 - G2 @ M2dot @ dec.D2 - G2 @ M2 @ U2.T @ Ddot
    IGM = np.eye(sched.n) - G2 @ M2 @ C2
    Bbar = IGM @ (B - G1 @ M1 @ dec.D1) - G2 @ M2 @ T2 @ Ddot
    Gbar = IGM @ G1
    return AliseDerivs(
        M1dot=M1dot, M2dot=M2dot, Phi1dot=Phi1dot, Phi2dot=Phi2dot,
        Bbar=Bbar, Gbar=Gbar, Ahat_dot=Ahat_dot, Qhat_dot=Qhat_dot,
        Rtilde2_dot=Rt2_dot, R1dot=R1dot, Rgrave12_dot=Rg12dot,
    )


def theta_rhs(g, dec, derivs, theta, u, z1, z2, y):
    """Shifted-coordinate estimator derivative; also returns ``xhat``."""
    GM2 = dec.G2 @ g.M2
    xhat = GM2 @ z2 - GM2 @ dec.D2 @ u + theta
    thdot = (
        (g.Abar - g.L @ dec.C2) @ xhat
        + (derivs.Bbar - g.L @ dec.D2) @ u
        + derivs.Gbar @ g.M1 @ z1
        + g.L @ z2
        - derivs.Phi1dot @ y
        - derivs.Phi2dot @ u
    )
    return thdot, xhat


class LagBuffer:
    """Ring buffer of ``(t, z2)`` samples with linear interpolation."""

    def __init__(self, horizon):
        self.horizon = horizon
        self._ts = []
        self._zs = []

    def push(self, t, z2):
        self._ts.append(t)
        self._zs.append(np.asarray(z2, dtype=float))
        # Drop samples that can no longer be interpolated over.
        while len(self._ts) > 2 and self._ts[1] <= t - self.horizon:
            self._ts.pop(0)
            self._zs.pop(0)

    def value_at(self, t):
        ts = self._ts
        if not ts or ts[0] > t + 1e-12:
            raise NeedWarmup(f"lag buffer does not reach back to t={t:.6g}")
        if len(ts) == 1:
            return self._zs[0]
        k = int(np.searchsorted(ts, t, side="right")) - 1
        k = min(max(k, 0), len(ts) - 2)
        t0, t1 = ts[k], ts[k + 1]
        if t1 == t0:
            return self._zs[k]
        a = (t - t0) / (t1 - t0)
        return (1.0 - a) * self._zs[k] + a * self._zs[k + 1]


def estimate_input_fd(g, dec, auxp, xhat, u, udot, z1, z2_now, buffer, t,
                      fd_dt):
    """Input estimate with the lagged finite difference standing in for the
    derivative channel.  Raises ``NeedWarmup`` until the buffer spans the
    lag ``fd_dt``."""
    z2_lag = buffer.value_at(t - fd_dt)
    zd = (z2_now - z2_lag) / fd_dt
    return estimate_input(g, dec, auxp, xhat, u, udot, z1, zd)


@dataclass
class AliseState:
    t: float
    theta: np.ndarray
    Px: np.ndarray
    Pw: np.ndarray
    Pv: np.ndarray


class AliseFilter:
    """Derivative-free filter; see module docstring."""

    def __init__(self, sched, gm, fd_dt, tol=lincore.RANK_TOL, cov_floor=0.0):
        if fd_dt <= 0:
            raise InvalidInput("fd_dt must be positive")
        self.sched = sched
        self.gm = gm
        self.fd_dt = fd_dt
        self.tol = tol
        self.cov_floor = cov_floor
        self._fprev = None

    # -- per-instant machinery -------------------------------------------------

    def _stage(self, t, Px, Pw, Pv, with_derivs=True):
        sched = self.sched
        f = asvd.structured_svd(sched.H(t), self.tol)
        f = asvd.align_signs(f, self._fprev)
        self._fprev = f
        l = sched.l
        R = lincore.symmetrize(Pv[:l, :l])
        dec = sysmodel.decouple_matrices(f, sched.C(t), sched.D(t), sched.G(t), R)
        auxp = aux_projection_gm(dec, sched.Cdot(t), sched.Ddot(t), Pv)
        g = compute_gains(
            dec, auxp, sched.A(t), sched.B(t), sched.W(t), Pw, Px,
            include_aux_noise=False,
        )
        Pw_dot, Pv_dot = sysmodel.gm_cov_rhs(self.gm, Pw, Pv)
        Px_dot = lincore.symmetrize(
            g.Abar @ Px + Px @ g.Abar.T + g.Qbar - g.L @ dec.R2 @ g.L.T
        )
        derivs = None
        if with_derivs:
            rates = asvd.asvd_rates(f, sched.Hdot(t)) if f.rank else asvd.AsvdRates(
                sigma_dot=np.zeros(0), E=np.zeros((0, 0)), F=np.zeros((0, 0)),
                U1dot=np.zeros_like(f.U1), V1dot=np.zeros_like(f.V1),
                U2dot=np.zeros_like(f.U2), V2dot=np.zeros_like(f.V2),
            )
            T1d = sysmodel.t1dot(f, rates, R, Pv_dot[:l, :l])
            derivs = derivative_matrices(
                sched, t, dec, rates, g, Pw, Pv, Pw_dot, Pv_dot, Px_dot, T1d
            )
        return dec, auxp, g, derivs, Pw_dot, Pv_dot, Px_dot

    def initial_state(self, t0, xhat0, P0x, signals, Pw0=None, Pv0=None):
        """Build the shifted initial condition ``theta(t0)``."""
        Pw = self.gm.P0_w if Pw0 is None else np.atleast_2d(Pw0)
        Pv = self.gm.P0_v if Pv0 is None else np.atleast_2d(Pv0)
        P0x = lincore.symmetrize(np.asarray(P0x, dtype=float))
        dec, auxp, g, _, _, _, _ = self._stage(t0, P0x, Pw, Pv, with_derivs=False)
        sig = signals(t0)
        z2 = dec.T2 @ sig.y
        GM2 = dec.G2 @ g.M2
        theta0 = np.asarray(xhat0, dtype=float) - GM2 @ z2 + GM2 @ dec.D2 @ sig.u
        return AliseState(t=t0, theta=theta0, Px=P0x, Pw=Pw.copy(), Pv=Pv.copy())

    # -- stepping --------------------------------------------------------------

    def step(self, state, signals, h, buffer=None):
        """One RK4 step of ``(theta, Px, Pw, Pv)``.

        Returns ``(new_state, xhat_at_t, estimate_or_None)``; the estimate
        is ``None`` while the lag buffer is warming up.  ``buffer`` is
        updated with the ``z2`` sample at the step's start time.
        """
        sched = self.sched
        n, l = sched.n, sched.l
        nw = self.gm.nw
        nv2 = 2 * self.gm.nv
        t0 = state.t
        sizes = (n, n * n, nw * nw, nv2 * nv2)

        def pack(theta, Px, Pw, Pv):
            return np.concatenate([theta, Px.ravel(), Pw.ravel(), Pv.ravel()])

        def unpack(yv):
            o = 0
            theta = yv[o:o + n]; o += n
            Px = yv[o:o + n * n].reshape(n, n); o += n * n
            Pw = yv[o:o + nw * nw].reshape(nw, nw); o += nw * nw
            Pv = yv[o:].reshape(nv2, nv2)
            return theta, Px, Pw, Pv

        first = {}

        def rhs(t, yv):
            theta, Px, Pw, Pv = unpack(yv)
            Px = lincore.psd_floor(Px, self.cov_floor)
            Pw = lincore.symmetrize(Pw)
            Pv = lincore.symmetrize(Pv)
            dec, auxp, g, derivs, Pw_dot, Pv_dot, Px_dot = self._stage(t, Px, Pw, Pv)
            sig = signals(t)
            z1 = dec.T1 @ sig.y
            z2 = dec.T2 @ sig.y
            thdot, xhat = theta_rhs(g, dec, derivs, theta, sig.u, z1, z2, sig.y)
            if t == t0 and "xhat" not in first:
                first["xhat"] = xhat
                first["ctx"] = (dec, auxp, g, sig, z1, z2)
            return pack(thdot, Px_dot, Pw_dot, Pv_dot)

        y0 = pack(state.theta, state.Px, state.Pw, state.Pv)
        y1 = lincore.rk4_step(rhs, t0, y0, h)
        theta1, Px1, Pw1, Pv1 = unpack(y1)
        new = AliseState(
            t=t0 + h,
            theta=theta1,
            Px=lincore.psd_floor(Px1, self.cov_floor),
            Pw=lincore.symmetrize(Pw1),
            Pv=lincore.symmetrize(Pv1),
        )
        est = None
        xhat = first.get("xhat")
        if buffer is not None and "ctx" in first:
            dec, auxp, g, sig, z1, z2 = first["ctx"]
            buffer.push(t0, z2)
            try:
                est = estimate_input_fd(
                    g, dec, auxp, xhat, sig.u, sig.udot, z1, z2, buffer,
                    t0, self.fd_dt,
                )
            except NeedWarmup:
                est = None
        return new, xhat, est

    def run(self, t0, t1, h, xhat0, P0x, signals):
        state = self.initial_state(t0, xhat0, P0x, signals)
        buffer = LagBuffer(self.fd_dt + 2 * h)
        N = int(round((t1 - t0) / h))
        n, p = self.sched.n, self.sched.p
        ts = t0 + h * np.arange(N + 1)
        xh = np.zeros((N + 1, n))
        dh = np.full((N + 1, p), np.nan)
        trP = np.zeros(N + 1)
        trPd = np.full(N + 1, np.nan)
        for k in range(N):
            trP[k] = np.trace(state.Px)
            state, xhat, est = self.step(state, signals, h, buffer)
            xh[k] = xhat
            if est is not None:
                dh[k] = est.d
                trPd[k] = np.trace(est.Pd)
        # Final instant.
        dec, auxp, g, _, _, _, _ = self._stage(
            state.t, state.Px, state.Pw, state.Pv, with_derivs=False
        )
        sig = signals(state.t)
        z1 = dec.T1 @ sig.y
        z2 = dec.T2 @ sig.y
        GM2 = dec.G2 @ g.M2
        xh[N] = GM2 @ z2 - GM2 @ dec.D2 @ sig.u + state.theta
        trP[N] = np.trace(state.Px)
        buffer.push(state.t, z2)
        try:
            est = estimate_input_fd(
                g, dec, auxp, xh[N], sig.u, sig.udot, z1, z2, buffer,
                state.t, self.fd_dt,
            )
            dh[N] = est.d
            trPd[N] = np.trace(est.Pd)
        except NeedWarmup:
            pass
        return FilterRun(ts=ts, xhat=xh, dhat=dh, tr_Px=trP, tr_Pd=trPd)

    # -- precomputed-gain fast path ---------------------------------------------

    def prepare(self, t0, t1, h, P0x, Pw0=None, Pv0=None):
        """Propagate all covariances once and cache per-stage gain sets."""
        n = self.sched.n
        nw, nv2 = self.gm.nw, 2 * self.gm.nv
        Px = lincore.symmetrize(np.asarray(P0x, dtype=float))
        Pw = (self.gm.P0_w if Pw0 is None else np.atleast_2d(Pw0)).copy()
        Pv = (self.gm.P0_v if Pv0 is None else np.atleast_2d(Pv0)).copy()
        N = int(round((t1 - t0) / h))
        offsets = (0.0, 0.5, 0.5, 1.0)
        stages = []
        for k in range(N):
            t = t0 + k * h
            ks = []
            stage_data = []
            for i, c in enumerate(offsets):
                if i == 0:
                    Pi, Pwi, Pvi = Px, Pw, Pv
                else:
                    w = 0.5 if i < 3 else 1.0
                    dPx, dPw, dPv = ks[i - 1]
                    Pi = lincore.psd_floor(Px + h * w * dPx, self.cov_floor)
                    Pwi = lincore.symmetrize(Pw + h * w * dPw)
                    Pvi = lincore.symmetrize(Pv + h * w * dPv)
                dec, auxp, g, derivs, Pw_dot, Pv_dot, Px_dot = self._stage(
                    t + c * h, Pi, Pwi, Pvi
                )
                ks.append((Px_dot, Pw_dot, Pv_dot))
                stage_data.append((dec, auxp, g, derivs))
            wsum = lambda parts: (h / 6.0) * (
                parts[0] + 2 * parts[1] + 2 * parts[2] + parts[3]
            )
            Px = lincore.psd_floor(Px + wsum([a for a, _, _ in ks]), self.cov_floor)
            Pw = lincore.symmetrize(Pw + wsum([b for _, b, _ in ks]))
            Pv = lincore.symmetrize(Pv + wsum([c_ for _, _, c_ in ks]))
            stages.append(stage_data)
        final = self._stage(t1, Px, Pw, Pv, with_derivs=False)[:3]
        return AliseGainSchedule(t0=t0, h=h, stages=stages, final=final)

    def run_with_gains(self, gain_schedule, xhat0, signals, exact_zdot=False):
        """Replay a precomputed gain schedule against one realization.

        With ``exact_zdot`` the derivative channel uses ``T2 @ ydot`` read
        from ``signals(t).ybar`` instead of the lagged difference (used for
        equivalence and lag-scaling diagnostics).
        """
        gs = gain_schedule
        h = gs.h
        N = len(gs.stages)
        n, p = self.sched.n, self.sched.p
        ts = gs.t0 + h * np.arange(N + 1)
        buffer = LagBuffer(self.fd_dt + 2 * h)
        # theta(t0) from the first stage's gains.
        dec0, auxp0, g0, _ = gs.stages[0][0]
        sig0 = signals(ts[0])
        GM2 = dec0.G2 @ g0.M2
        theta = (
            np.asarray(xhat0, dtype=float)
            - GM2 @ (dec0.T2 @ sig0.y)
            + GM2 @ dec0.D2 @ sig0.u
        )
        xh = np.zeros((N + 1, n))
        dh = np.full((N + 1, p), np.nan)
        trP = np.zeros(N + 1)
        trPd = np.full(N + 1, np.nan)
        offsets = (0.0, 0.5, 0.5, 1.0)
        for k in range(N):
            t = ts[k]
            ks = []
            for i, c in enumerate(offsets):
                dec, auxp, g, derivs = gs.stages[k][i]
                thi = theta if i == 0 else theta + h * (0.5 if i < 3 else 1.0) * ks[i - 1]
                sig = signals(t + c * h)
                z1 = dec.T1 @ sig.y
                z2 = dec.T2 @ sig.y
                thdot, xhat = theta_rhs(g, dec, derivs, thi, sig.u, z1, z2, sig.y)
                if i == 0:
                    xh[k] = xhat
                    trP[k] = np.trace(g.Px)
                    buffer.push(t, z2)
                    try:
                        if exact_zdot:
                            zd = dec.T2 @ sig.ybar
                            est = estimate_input(
                                g, dec, auxp, xhat, sig.u, sig.udot, z1, zd
                            )
                        else:
                            est = estimate_input_fd(
                                g, dec, auxp, xhat, sig.u, sig.udot, z1, z2,
                                buffer, t, self.fd_dt,
                            )
                        dh[k] = est.d
                        trPd[k] = np.trace(est.Pd)
                    except NeedWarmup:
                        pass
                ks.append(thdot)
            theta = theta + (h / 6.0) * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
        dec, auxp, g = gs.final
        sig = signals(ts[N])
        z1 = dec.T1 @ sig.y
        z2 = dec.T2 @ sig.y
        GM2 = dec.G2 @ g.M2
        xh[N] = GM2 @ z2 - GM2 @ dec.D2 @ sig.u + theta
        trP[N] = np.trace(g.Px)
        buffer.push(ts[N], z2)
        try:
            if exact_zdot:
                zd = dec.T2 @ sig.ybar
                est = estimate_input(g, dec, auxp, xh[N], sig.u, sig.udot, z1, zd)
            else:
                est = estimate_input_fd(
                    g, dec, auxp, xh[N], sig.u, sig.udot, z1, z2, buffer,
                    ts[N], self.fd_dt,
                )
            dh[N] = est.d
            trPd[N] = np.trace(est.Pd)
        except NeedWarmup:
            pass
        return FilterRun(ts=ts, xhat=xh, dhat=dh, tr_Px=trP, tr_Pd=trPd)

    def run_e2(self, gain_schedule, xhat0, signals):
        """Integrate the derivative-fed estimator form directly.

        ``signals(t).ybar`` must carry the exact measurement derivative
        ``ydot``.  Algebraically equivalent to the shifted form when the
        supplied derivative is consistent with ``y``; used as a
        cross-check.
        """
        gs = gain_schedule
        h = gs.h
        N = len(gs.stages)
        n = self.sched.n
        ts = gs.t0 + h * np.arange(N + 1)
        xhat = np.asarray(xhat0, dtype=float).copy()
        xh = np.zeros((N + 1, n))
        offsets = (0.0, 0.5, 0.5, 1.0)
        for k in range(N):
            t = ts[k]
            ks = []
            for i, c in enumerate(offsets):
                dec, auxp, g, derivs = gs.stages[k][i]
                xi = xhat if i == 0 else xhat + h * (0.5 if i < 3 else 1.0) * ks[i - 1]
                sig = signals(t + c * h)
                z1 = dec.T1 @ sig.y
                z2 = dec.T2 @ sig.y
                GM2 = dec.G2 @ g.M2
                xdot = (
                    (g.Abar - g.L @ dec.C2) @ xi
                    + (derivs.Bbar - g.L @ dec.D2) @ sig.u
                    + derivs.Gbar @ g.M1 @ z1
                    + g.L @ z2
                    + GM2 @ (dec.T2 @ sig.ybar)
                    - GM2 @ dec.D2 @ sig.udot
                )
                if i == 0:
                    xh[k] = xi
                ks.append(xdot)
            xhat = xhat + (h / 6.0) * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
        xh[N] = xhat
        return FilterRun(
            ts=ts, xhat=xh,
            dhat=np.full((N + 1, self.sched.p), np.nan),
            tr_Px=np.zeros(N + 1), tr_Pd=np.full(N + 1, np.nan),
        )


@dataclass
class AliseGainSchedule:
    t0: float
    h: float
    stages: list
    final: tuple
