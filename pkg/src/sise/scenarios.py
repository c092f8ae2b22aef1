"""Benchmark scenarios: a hovering-helicopter regulation problem and a
radar-tracked atmospheric-entry vehicle.

The helicopter model is linear time-varying (a scheduled sensor gain on
the velocity channel) with a sensor bias and a wind disturbance as the
two unknown-input components.  The entry vehicle is a nonlinear truth
model; the filters run on its linearization about a polynomial reference
trajectory, with a crosswind acceleration and a range-sensor fault as the
unknown inputs.  Both are configured at desk scale (short horizons) so a
full Monte Carlo study runs in seconds to minutes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import alise, analysis, control, elise, lincore, sysmodel
from .errors import UnknownScenario


def stationary_covariance(sched, t0, white=None, gm=None, aux=None,
                          P_init=None):
    """Frozen-coefficient stationary state covariance of the filter at
    ``t0``, via the fixed point of the covariance-dependent Riccati
    equation.  Useful as a warm-started initial ``P0x`` when no transient
    prior is available."""
    n = sched.n
    P_init = np.eye(n) * 1e-2 if P_init is None else P_init
    A, B, W = sched.A(t0), sched.B(t0), sched.W(t0)
    if white is not None:
        dec = sysmodel.decouple(sched, white.R(t0), t0)
        auxp = elise.aux_projection_white(aux, white, dec, t0)
        Q = white.Q(t0)
        include = True
    else:
        dec = sysmodel.decouple(sched, gm.P0_v[: sched.l, : sched.l], t0)
        auxp = alise.aux_projection_gm(dec, sched.Cdot(t0), sched.Ddot(t0),
                                       gm.P0_v)
        Q = gm.P0_w
        include = False

    def gain_builder(P):
        g = elise.compute_gains(dec, auxp, A, B, W, Q, P,
                                include_aux_noise=include)
        S = -dec.G2 @ g.M2 @ auxp.Rgrave2.T
        return g.Abar, dec.C2, g.Qbar, dec.R2, S

    return analysis.steady_state_covariance(gain_builder, P_init)


def settled_covariance(sched, gm, t0, burn=6.0, h=5e-3, fd_dt=0.05,
                       P_init=None):
    """Settled lagged-difference filter covariance at ``t0``.

    Integrates the coupled (Px, Pw, Pv) flow over a burn-in window ending
    at ``t0`` instead of solving the frozen algebraic equation, which can
    be marginal for the Gauss-Markov-augmented error dynamics."""
    n = sched.n
    Px = np.eye(n) * 1e-2 if P_init is None else np.asarray(P_init, float)
    filt = alise.AliseFilter(sched, gm, fd_dt)
    Pw, Pv = gm.P0_w.copy(), gm.P0_v.copy()
    N = int(round(burn / h))
    for k in range(N):
        t = t0 - burn + k * h
        ks = []
        for i, c in enumerate((0.0, 0.5, 0.5, 1.0)):
            if i == 0:
                Pi, Pwi, Pvi = Px, Pw, Pv
            else:
                w = 0.5 if i < 3 else 1.0
                dPx, dPw, dPv = ks[i - 1]
                Pi = lincore.psd_floor(Px + h * w * dPx)
                Pwi = lincore.symmetrize(Pw + h * w * dPw)
                Pvi = lincore.symmetrize(Pv + h * w * dPv)
            out = filt._stage(t + c * h, Pi, Pwi, Pvi, with_derivs=False)
            ks.append((out[6], out[4], out[5]))
        wsum = lambda parts: (h / 6.0) * (
            parts[0] + 2 * parts[1] + 2 * parts[2] + parts[3])
        Px = lincore.psd_floor(Px + wsum([a for a, _, _ in ks]))
        Pw = lincore.symmetrize(Pw + wsum([b for _, b, _ in ks]))
        Pv = lincore.symmetrize(Pv + wsum([c_ for _, _, c_ in ks]))
    return Px


# --------------------------------------------------------------------------
# signal helpers

def sawtooth(amplitude, period, offset=0.0):
    def sig(t):
        frac = ((t - offset) / period) % 1.0
        return amplitude * (2.0 * frac - 1.0)
    return sig


def chirp(amplitude, f0, rate):
    def sig(t):
        return amplitude * math.sin(2.0 * math.pi * (f0 * t + 0.5 * rate * t * t))
    return sig


def square(amplitude, period):
    def sig(t):
        return amplitude * (1.0 if math.sin(2.0 * math.pi * t / period) >= 0 else -1.0)
    return sig


# --------------------------------------------------------------------------
# scenario container

@dataclass
class ReentryTruth:
    """Nonlinear truth model and reference trajectory for the entry
    vehicle; the filters see deviations from the reference."""

    dynamics_fn: Callable
    meas_fn: Callable
    xref: Callable
    uref: Callable
    yref: Callable
    ybar_ref: Callable
    x0_truth: np.ndarray
    lp_tau: float
    u_base_dev: Callable  # deviation-input part independent of the input estimates


@dataclass
class Scenario:
    name: str
    sched: sysmodel.SystemSchedule
    white: Optional[sysmodel.WhiteNoiseSpec]
    gm: Optional[sysmodel.GaussMarkovSpec]
    aux: Optional[sysmodel.AuxMeasurementModel]
    d_fn: Callable
    x0: np.ndarray
    xhat0: np.ndarray
    P0x: np.ndarray
    t0: float
    tf: float
    h: float
    fd_dt: float
    controller: Optional[control.ControllerSpec] = None
    truth: Optional[ReentryTruth] = None
    ddot_fn: Optional[Callable] = None

    def d_truth(self, ts):
        return np.array([np.atleast_1d(self.d_fn(t)) for t in ts])


# --------------------------------------------------------------------------
# helicopter

HELI_A = np.array([
    [0.0, 1.0, 0.0, 0.0],
    [0.0, -0.415, -0.011, 0.0],
    [9.8, -1.43, -0.0198, 0.0],
    [0.0, 0.0, 1.0, 0.0],
])
HELI_B = np.array([[0.0], [6.27], [9.8], [0.0]])
HELI_GW = np.array([[0.0], [-0.011], [-0.0198], [0.0]])  # wind channel
# Unknown input order: (sensor bias e_m, wind disturbance w_d).
HELI_G = np.hstack([np.zeros((4, 1)), HELI_GW])
HELI_H = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
HELI_R = np.diag([1e-3, 1.6e-3, 0.9e-3])


def _heli_C(t):
    return np.array([
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.8 + 0.2 * math.sin(t), 0.0],
        [0.0, 1.0, 0.0, 0.0],
    ])


def _heli_Cdot(t):
    out = np.zeros((3, 4))
    out[1, 2] = 0.2 * math.cos(t)
    return out


def _heli_Cddot(t):
    out = np.zeros((3, 4))
    out[1, 2] = -0.2 * math.sin(t)
    return out


def helicopter_schedule():
    n, m, p, l, q = 4, 1, 2, 3, 1
    Z = lambda shape: sysmodel.constm(np.zeros(shape))
    return sysmodel.SystemSchedule(
        n=n, m=m, p=p, l=l, q=q,
        A=sysmodel.constm(HELI_A), B=sysmodel.constm(HELI_B),
        G=sysmodel.constm(HELI_G), C=_heli_C,
        D=Z((l, m)), H=sysmodel.constm(HELI_H),
        W=sysmodel.constm(HELI_GW),
        Adot=Z((n, n)), Bdot=Z((n, m)), Cdot=_heli_Cdot, Ddot=Z((l, m)),
        Gdot=Z((n, p)), Hdot=Z((l, p)), Wdot=Z((n, q)),
        Cddot=_heli_Cddot, Dddot=Z((l, m)),
    )


def helicopter_controller():
    C_lqr = np.array([[0.0, 0.0, 0.0, 1.0]])
    K, _ = control.lqr_gain(HELI_A, HELI_B, C_lqr.T @ C_lqr, np.array([[5.0]]))
    # Rejection gains in the decoupled input order (d1 = bias, d2 = wind).
    rj = control.rejection_gains(HELI_B, np.zeros((4, 1)), HELI_GW)
    return control.ControllerSpec(K=K, J1=rj.J1, J2=rj.J2)


def helicopter(filter_kind="elise", tf=2.0, h=1e-3, fd_dt=0.05,
               with_controller=True):
    sched = helicopter_schedule()
    bias = lambda t: 0.4 * math.sin(2.0 * math.pi * t)
    wind = sawtooth(4.0, 1.0)
    d_fn = lambda t: np.array([bias(t), wind(t)])
    white = gm = aux = None
    if filter_kind == "elise":
        white = sysmodel.WhiteNoiseSpec.constant(
            Q=np.array([[5e-4]]), R=HELI_R,
            Rbar=np.array([[2e-3]]), Rgrave=np.zeros((3, 1)),
        )
        # Auxiliary channel: a linear accelerometer measuring udot.
        aux = sysmodel.AuxMeasurementModel.from_constant(
            Cbar=np.array([[0.0, 0.0, 1.0, 0.0]]), p=2, m=1,
        )
    elif filter_kind == "alise":
        gm = sysmodel.GaussMarkovSpec(
            A_w=np.array([[0.2]]), B_w=np.array([[6.0]]),
            Q_G=np.array([[5e-4]]),
            A_v=0.25 * np.eye(3), A_vdot=np.eye(3), B_v=np.eye(3),
            R_G=HELI_R,
        )
    else:
        raise UnknownScenario(f"unsupported filter kind {filter_kind!r}")
    # The trace trajectories settle within a fraction of a time unit only
    # when the covariance starts at (near) its stationary value; the error
    # dynamics are far too slow to pull a distant P0 in that fast.
    if white is not None:
        P0x = stationary_covariance(sched, 0.0, white=white, aux=aux)
    else:
        P0x = settled_covariance(sched, gm, 0.0, fd_dt=fd_dt)
    return Scenario(
        name="helicopter", sched=sched, white=white, gm=gm, aux=aux,
        d_fn=d_fn,
        x0=np.zeros(4), xhat0=np.zeros(4), P0x=P0x,
        t0=0.0, tf=tf, h=h, fd_dt=fd_dt,
        controller=helicopter_controller() if with_controller else None,
    )


# --------------------------------------------------------------------------
# atmospheric entry vehicle

BETA0 = -0.59783
H0 = 13.406
GM0 = 3.986e5
R0 = 6374.0
RADAR = np.array([6375.0, 0.0])
REENTRY_KD = 1.8
REENTRY_KP = 1.0


def _drag_coeff(x):
    r = math.hypot(x[0], x[1])
    V = math.hypot(x[2], x[3])
    return -BETA0 * math.exp(x[4]) * math.exp((R0 - r) / H0) * V


def _grav_coeff(x):
    r = math.hypot(x[0], x[1])
    return -GM0 / r ** 3


def reentry_dynamics(t, x, u, d):
    """Nonlinear truth dynamics; ``d = (crosswind, range fault)`` with the
    fault affecting only the measurement."""
    Dc = _drag_coeff(x)
    Gc = _grav_coeff(x)
    dw = d[0] if len(d) else 0.0
    return np.array([
        x[2],
        x[3],
        Dc * x[2] + Gc * x[0] + u[0],
        Dc * x[3] + Gc * x[1] + u[1] + dw,
        0.0,
    ])


def reentry_measure(x, d=None):
    dx = x[0] - RADAR[0]
    dy = x[1] - RADAR[1]
    rho = math.hypot(dx, dy)
    rr = (dx * x[2] + dy * x[3]) / rho
    de = d[1] if (d is not None and len(d)) else 0.0
    return np.array([rho + de, math.atan2(dy, dx), rr])


def _reentry_jac_dyn(x):
    r = math.hypot(x[0], x[1])
    V = math.hypot(x[2], x[3])
    Dc = _drag_coeff(x)
    Gc = _grav_coeff(x)
    dD = np.array([
        -Dc * x[0] / (r * H0),
        -Dc * x[1] / (r * H0),
        Dc * x[2] / V ** 2,
        Dc * x[3] / V ** 2,
        Dc,
    ])
    dG = np.array([-3.0 * Gc * x[0] / r ** 2, -3.0 * Gc * x[1] / r ** 2, 0.0, 0.0, 0.0])
    A = np.zeros((5, 5))
    A[0, 2] = 1.0
    A[1, 3] = 1.0
    A[2] = x[2] * dD + x[0] * dG
    A[2, 0] += Gc
    A[2, 2] += Dc
    A[3] = x[3] * dD + x[1] * dG
    A[3, 1] += Gc
    A[3, 3] += Dc
    return A


def _reentry_jac_meas(x):
    dx = x[0] - RADAR[0]
    dy = x[1] - RADAR[1]
    rho = math.hypot(dx, dy)
    rr = (dx * x[2] + dy * x[3]) / rho
    C = np.zeros((3, 5))
    C[0, 0] = dx / rho
    C[0, 1] = dy / rho
    C[1, 0] = -dy / rho ** 2
    C[1, 1] = dx / rho ** 2
    C[2, 0] = x[2] / rho - rr * dx / rho ** 2
    C[2, 1] = x[3] / rho - rr * dy / rho ** 2
    C[2, 2] = dx / rho
    C[2, 3] = dy / rho
    return C


def _hermite_cubic(p0, v0, pT, vT, T):
    a0, a1 = p0, v0
    a2 = (3.0 * (pT - p0) - (2.0 * v0 + vT) * T) / T ** 2
    a3 = (2.0 * (p0 - pT) + (v0 + vT) * T) / T ** 3
    return np.array([a0, a1, a2, a3])


class _ReentryReference:
    """Cubic position references over the nominal 200-unit descent."""

    def __init__(self):
        T = 200.0
        self.c1 = _hermite_cubic(6500.4, -1.8093, 6400.0, -0.5, T)
        self.c2 = _hermite_cubic(349.14, -6.7967, 150.0, -0.5, T)
        self.x5 = 0.7

    def _poly(self, c, t, der=0):
        pw = np.arange(4)
        if der == 0:
            return float(np.polyval(c[::-1], t))
        if der == 1:
            return float(c[1] + 2 * c[2] * t + 3 * c[3] * t ** 2)
        return float(2 * c[2] + 6 * c[3] * t)

    def state(self, t):
        return np.array([
            self._poly(self.c1, t), self._poly(self.c2, t),
            self._poly(self.c1, t, 1), self._poly(self.c2, t, 1),
            self.x5,
        ])

    def accel(self, t):
        return np.array([self._poly(self.c1, t, 2), self._poly(self.c2, t, 2)])

    def input(self, t):
        """Feedforward making the reference an exact solution."""
        x = self.state(t)
        Dc = _drag_coeff(x)
        Gc = _grav_coeff(x)
        acc = self.accel(t)
        return np.array([
            acc[0] - Dc * x[2] - Gc * x[0],
            acc[1] - Dc * x[3] - Gc * x[1],
        ])


def reentry_schedule(ref):
    n, m, p, l, q = 5, 2, 2, 3, 2
    B = np.zeros((5, 2))
    B[2, 0] = 1.0
    B[3, 1] = 1.0
    G = np.zeros((5, 2))
    G[3, 0] = 1.0  # crosswind accelerates the cross-track velocity
    H = np.array([[0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])  # range fault
    W = np.zeros((5, 2))
    W[2, 0] = 1.0
    W[3, 1] = 1.0
    return sysmodel.SystemSchedule(
        n=n, m=m, p=p, l=l, q=q,
        A=lambda t: _reentry_jac_dyn(ref.state(t)),
        C=lambda t: _reentry_jac_meas(ref.state(t)),
        B=sysmodel.constm(B), D=sysmodel.constm(np.zeros((3, 2))),
        G=sysmodel.constm(G), H=sysmodel.constm(H), W=sysmodel.constm(W),
        Hdot=sysmodel.constm(np.zeros((3, 2))),
        Gdot=sysmodel.constm(np.zeros((5, 2))),
        Bdot=sysmodel.constm(np.zeros((5, 2))),
        Ddot=sysmodel.constm(np.zeros((3, 2))),
        Dddot=sysmodel.constm(np.zeros((3, 2))),
        Wdot=sysmodel.constm(np.zeros((5, 2))),
        fd_step=1e-4,
    )


def reentry(filter_kind="elise", tf=20.0, h=0.0025, fd_dt=0.05,
            with_rejection=True):
    ref = _ReentryReference()
    sched = reentry_schedule(ref)
    wind = lambda t: sawtooth(1.0, 8.0)(t) + chirp(0.3, 0.05, 0.01)(t)
    fault = lambda t: 0.2 * (1.0 if math.sin(0.3 * t) >= 0 else -1.0)
    d_fn = lambda t: np.array([wind(t), fault(t)])
    lp_tau = 0.05
    white = gm = aux = None
    if filter_kind == "elise":
        white = sysmodel.WhiteNoiseSpec.constant(
            Q=np.diag([5e-4, 1e-4]), R=np.diag([1e-5, 1e-4, 1e-5]),
            # Rbar is the pointwise variance of the filtered-derivative
            # noise; the cross intensity with the range-rate channel is
            # r3/tau for a first-order filter of time constant tau, which
            # keeps the joint noise intensity matrix positive semidefinite.
            Rbar=np.array([[0.75]]),
            Rgrave=np.array([[0.0], [0.0], [1e-5 / 0.05]]),
        )
        # Filtered range-rate derivative as the auxiliary channel.
        aux = sysmodel.AuxMeasurementModel(
            lbar=1,
            Cbar=lambda t: _reentry_jac_meas(ref.state(t))[2:3],
            Cddash=lambda t: sysmodel.central_diff(
                lambda s: _reentry_jac_meas(ref.state(s))[2:3], t, 1e-4
            ),
            Dbar=sysmodel.constm(np.zeros((1, 2))),
            Dddash=sysmodel.constm(np.zeros((1, 2))),
            Hbar=sysmodel.constm(np.zeros((1, 2))),
            Hddash=sysmodel.constm(np.zeros((1, 2))),
        )
    elif filter_kind == "alise":
        sched.q = 3
        W3 = np.zeros((5, 3))
        W3[2, 0] = 1.0
        W3[3, 1] = 1.0
        W3[4, 2] = 1.0
        sched.W = sysmodel.constm(W3)
        sched.Wdot = sysmodel.constm(np.zeros((5, 3)))
        gm = sysmodel.GaussMarkovSpec(
            A_w=0.2 * np.eye(3), B_w=np.eye(3),
            Q_G=np.diag([5e-4, 1e-4, 2e-4]),
            A_v=0.25 * np.eye(3), A_vdot=np.eye(3), B_v=np.eye(3),
            R_G=np.diag([5e-3, 1e-4, 1e-5]),
        )
    else:
        raise UnknownScenario(f"unsupported filter kind {filter_kind!r}")

    x0_truth = np.array([6500.4, 349.14, -1.8093, -6.7967, 0.6932])
    kD, kP = REENTRY_KD, REENTRY_KP

    def u_base_dev(t, xd):
        """Feedback-linearizing PD input in deviation coordinates."""
        xr = ref.state(t)
        xh = xr + xd
        Dc_h, Gc_h = _drag_coeff(xh), _grav_coeff(xh)
        Dc_r, Gc_r = _drag_coeff(xr), _grav_coeff(xr)
        acc = ref.accel(t)
        u1 = acc[0] - Dc_h * xh[2] - Gc_h * xh[0] - kD * (xh[2] - xr[2]) - kP * (xh[0] - xr[0])
        u2 = acc[1] - Dc_h * xh[3] - Gc_h * xh[1] - kD * (xh[3] - xr[3]) - kP * (xh[1] - xr[1])
        ur = ref.input(t)
        return np.array([u1, u2]) - ur

    def ybar_ref(t):
        # d/dt of the reference range rate.
        return sysmodel.central_diff(
            lambda s: np.array([reentry_measure(ref.state(s))[2]]), t, 1e-4
        )

    truth = ReentryTruth(
        dynamics_fn=lambda t, x, u, d: reentry_dynamics(t, x, u, d),
        meas_fn=lambda t, x, u, d: reentry_measure(x, d),
        xref=ref.state,
        uref=ref.input,
        yref=lambda t: reentry_measure(ref.state(t)),
        ybar_ref=ybar_ref,
        x0_truth=x0_truth,
        lp_tau=lp_tau,
        u_base_dev=u_base_dev,
    )
    # Rejection gains: the crosswind channel is exactly matched by the
    # cross-track thrust; the sensor fault has no dynamics channel.
    if with_rejection:
        rj = control.rejection_gains(
            np.array(sched.B(0.0)),
            np.zeros((5, 1)),                # feedthrough component (fault)
            np.array([[0, 0, 0, 1, 0]]).T,   # dynamics component (wind)
        )
        ctrl = control.ControllerSpec(K=np.zeros((2, 5)), J1=rj.J1, J2=rj.J2)
    else:
        ctrl = control.ControllerSpec(
            K=np.zeros((2, 5)), J1=np.zeros((2, 1)), J2=np.zeros((2, 1))
        )
    # Warm-started prior: with cross-correlated measurement noises the
    # transient filter gain is only stabilizing near the stationary
    # Riccati solution, so start there.
    P0x = stationary_covariance(sched, 0.0, white=white, gm=gm, aux=aux)
    return Scenario(
        name="reentry", sched=sched, white=white, gm=gm, aux=aux,
        d_fn=d_fn,
        x0=x0_truth, xhat0=np.zeros(5),
        P0x=P0x,
        t0=0.0, tf=tf, h=h, fd_dt=fd_dt,
        controller=ctrl, truth=truth,
    )


def build(name, filter_kind="elise", **overrides):
    builders = {"helicopter": helicopter, "reentry": reentry}
    if name not in builders:
        raise UnknownScenario(f"unknown scenario {name!r}")
    return builders[name](filter_kind=filter_kind, **overrides)
