"""Time-varying system schedules, output decoupling and plant simulation.

A :class:`SystemSchedule` bundles the matrix-valued coefficient functions
of the linear model

    xdot = A x + B u + G d + W w
    y    = C x + D u + H d + v

with their time derivatives (supplied analytically or filled in by a
central-difference stencil).  :func:`decouple` builds the output transform
that splits ``y`` into a channel carrying the feedthrough part of ``d``
and a feedthrough-free channel, and the Gauss-Markov helpers drive the
colored-noise model used by the derivative-free filter.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import asvd, lincore
from .errors import DivergedSimulation, InvalidInput, InvalidNoise

MatFn = Callable[[float], np.ndarray]


def constm(M):
    """Wrap a constant matrix as a function of time."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return lambda t, _M=M: _M


def constv(v):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    return lambda t, _v=v: _v


def _zero_fn(shape):
    Z = np.zeros(shape)
    return lambda t, _Z=Z: _Z


def central_diff(fn, t, h):
    return (np.asarray(fn(t + h), dtype=float) - np.asarray(fn(t - h), dtype=float)) / (2.0 * h)


def second_diff(fn, t, h):
    f0 = np.asarray(fn(t), dtype=float)
    return (np.asarray(fn(t + h), dtype=float) - 2.0 * f0 + np.asarray(fn(t - h), dtype=float)) / (h * h)


@dataclass
class SystemSchedule:
    """Coefficient schedule of the linear time-varying model.

    Dimensions: state ``n``, known input ``m``, unknown input ``p``,
    output ``l``, process-noise channels ``q``; the model requires
    ``n >= l >= 1``, ``l >= p >= 0`` and ``m >= 0``.
    """

    n: int
    m: int
    p: int
    l: int
    q: int
    A: MatFn
    C: MatFn
    B: Optional[MatFn] = None
    D: Optional[MatFn] = None
    G: Optional[MatFn] = None
    H: Optional[MatFn] = None
    W: Optional[MatFn] = None
    # First derivatives; Hdot is needed by both filters, the rest by the
    # derivative-matrix chain of the lagged-difference filter.
    Adot: Optional[MatFn] = None
    Bdot: Optional[MatFn] = None
    Cdot: Optional[MatFn] = None
    Ddot: Optional[MatFn] = None
    Gdot: Optional[MatFn] = None
    Hdot: Optional[MatFn] = None
    Wdot: Optional[MatFn] = None
    Cddot: Optional[MatFn] = None
    Dddot: Optional[MatFn] = None
    u: Optional[Callable[[float], np.ndarray]] = None
    udot: Optional[Callable[[float], np.ndarray]] = None
    uddot: Optional[Callable[[float], np.ndarray]] = None
    fd_step: float = 1e-5

    def __post_init__(self):
        if not (self.n >= self.l >= 1 and self.l >= self.p >= 0 and self.m >= 0):
            raise InvalidInput("dimension contract n >= l >= 1, l >= p >= 0 violated")
        if self.B is None:
            self.B = _zero_fn((self.n, self.m))
        if self.D is None:
            self.D = _zero_fn((self.l, self.m))
        if self.G is None:
            self.G = _zero_fn((self.n, self.p))
        if self.H is None:
            self.H = _zero_fn((self.l, self.p))
        if self.W is None:
            self.W = _zero_fn((self.n, self.q))
        if self.u is None:
            self.u = constv(np.zeros(self.m))
        if self.udot is None:
            self.udot = constv(np.zeros(self.m))
        if self.uddot is None:
            self.uddot = constv(np.zeros(self.m))
        self._fill_derivatives()

    def _fill_derivatives(self):
        h = self.fd_step
        for name in ("A", "B", "C", "D", "G", "H", "W"):
            dname = name + "dot"
            if getattr(self, dname) is None:
                base = getattr(self, name)
                setattr(self, dname, lambda t, _f=base: central_diff(_f, t, h))
        if self.Cddot is None:
            base = self.C
            self.Cddot = lambda t, _f=base: second_diff(_f, t, h)
        if self.Dddot is None:
            base = self.D
            self.Dddot = lambda t, _f=base: second_diff(_f, t, h)

    @classmethod
    def lti(cls, A, C, B=None, D=None, G=None, H=None, W=None, **kw):
        """Constant-coefficient schedule; all derivatives are zero."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        C = np.atleast_2d(np.asarray(C, dtype=float))
        n = A.shape[0]
        l = C.shape[0]
        m = 0 if B is None else np.atleast_2d(np.asarray(B, dtype=float)).shape[1]
        p = 0 if G is None else np.atleast_2d(np.asarray(G, dtype=float)).shape[1]
        if G is None and H is not None:
            p = np.atleast_2d(np.asarray(H, dtype=float)).shape[1]
        q = 0 if W is None else np.atleast_2d(np.asarray(W, dtype=float)).shape[1]
        mk = lambda M, shape: constm(M) if M is not None else _zero_fn(shape)
        sched = cls(
            n=n, m=m, p=p, l=l, q=q,
            A=constm(A), C=constm(C),
            B=mk(B, (n, m)), D=mk(D, (l, m)),
            G=mk(G, (n, p)), H=mk(H, (l, p)), W=mk(W, (n, q)),
            Adot=_zero_fn((n, n)), Bdot=_zero_fn((n, m)),
            Cdot=_zero_fn((l, n)), Ddot=_zero_fn((l, m)),
            Gdot=_zero_fn((n, p)), Hdot=_zero_fn((l, p)),
            Wdot=_zero_fn((n, q)),
            Cddot=_zero_fn((l, n)), Dddot=_zero_fn((l, m)),
            **kw,
        )
        return sched


@dataclass
class WhiteNoiseSpec:
    """White-noise intensities for the derivative-measurement filter.

    ``Q`` drives the process noise, ``R`` the output noise, ``Rbar`` the
    auxiliary-measurement noise and ``Rgrave`` the cross intensity between
    the two measurement noises (shape ``l x lbar``).
    """

    Q: MatFn
    R: MatFn
    Rbar: Optional[MatFn] = None
    Rgrave: Optional[MatFn] = None

    @classmethod
    def constant(cls, Q, R, Rbar=None, Rgrave=None):
        mk = lambda M: None if M is None else constm(M)
        return cls(Q=constm(Q), R=constm(R), Rbar=mk(Rbar), Rgrave=mk(Rgrave))


@dataclass
class GaussMarkovSpec:
    """First/second-order Gauss-Markov shaping filters for ``w`` and ``v``.

    ``wdot + A_w w = B_w w_G`` with white ``w_G`` of intensity ``Q_G``;
    ``vddot + A_vdot vdot + A_v v = B_v v_G`` with white ``v_G`` of
    intensity ``R_G``.  ``P0_w`` / ``P0_v`` are the initial covariances of
    ``w`` and of the stacked ``(v, vdot)``; when omitted the stationary
    covariances are used.
    """

    A_w: np.ndarray
    B_w: np.ndarray
    Q_G: np.ndarray
    A_v: np.ndarray
    A_vdot: np.ndarray
    B_v: np.ndarray
    R_G: np.ndarray
    P0_w: Optional[np.ndarray] = None
    P0_v: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("A_w", "B_w", "Q_G", "A_v", "A_vdot", "B_v", "R_G"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        if lincore.eig(self.A_w).max_real_part <= 0:
            raise InvalidNoise("A_w must be Hurwitz-generating (wdot = -A_w w + ...)")
        if lincore.eig(self.A_v_stacked).max_real_part >= 0:
            raise InvalidNoise("stacked measurement-noise dynamics must be Hurwitz")
        if self.P0_w is None:
            self.P0_w = lincore.solve_lyapunov(-self.A_w, self.B_w @ self.Q_G @ self.B_w.T)
        else:
            self.P0_w = np.atleast_2d(np.asarray(self.P0_w, dtype=float))
        if self.P0_v is None:
            self.P0_v = lincore.solve_lyapunov(
                self.A_v_stacked, self.B_v_stacked @ self.R_G @ self.B_v_stacked.T
            )
        else:
            self.P0_v = np.atleast_2d(np.asarray(self.P0_v, dtype=float))

    @property
    def nw(self):
        return self.A_w.shape[0]

    @property
    def nv(self):
        return self.A_v.shape[0]

    @property
    def A_v_stacked(self):
        nv = self.A_v.shape[0]
        top = np.hstack([np.zeros((nv, nv)), np.eye(nv)])
        bot = np.hstack([-self.A_v, -self.A_vdot])
        return np.vstack([top, bot])

    @property
    def B_v_stacked(self):
        nv = self.A_v.shape[0]
        return np.vstack([np.zeros((nv, self.B_v.shape[1])), self.B_v])


def gm_cov_rhs(spec, Pw, Pv):
    """Covariance ODE right-hand sides for the two shaping filters."""
    Pw_dot = -spec.A_w @ Pw - Pw @ spec.A_w.T + spec.B_w @ spec.Q_G @ spec.B_w.T
    Av = spec.A_v_stacked
    Bv = spec.B_v_stacked
    Pv_dot = Av @ Pv + Pv @ Av.T + Bv @ spec.R_G @ Bv.T
    return lincore.symmetrize(Pw_dot), lincore.symmetrize(Pv_dot)


def gm_noise_step(spec, w, vs, h, rng):
    """Euler-Maruyama step of the noise states ``w`` and stacked ``vs``."""
    sq = np.sqrt(h)
    cq = np.linalg.cholesky(spec.Q_G) if spec.Q_G.size else spec.Q_G
    cr = np.linalg.cholesky(spec.R_G) if spec.R_G.size else spec.R_G
    wg = cq @ rng.standard_normal(spec.Q_G.shape[0])
    vg = cr @ rng.standard_normal(spec.R_G.shape[0])
    w_new = w + h * (-spec.A_w @ w) + sq * (spec.B_w @ wg)
    vs_new = vs + h * (spec.A_v_stacked @ vs) + sq * (spec.B_v_stacked @ vg)
    return w_new, vs_new


@dataclass
class AuxMeasurementModel:
    """Auxiliary derivative-bearing measurement

        ybar = Cbar xdot + Cddash x + Dbar udot + Dddash u
               + Hbar ddot + Hddash d + vbar

    of dimension ``lbar``.  The filter requires ``T2bar Hddash = 0`` where
    ``T2bar`` spans the left null space of ``Hbar``; :meth:`validate`
    checks this at sample times.
    """

    lbar: int
    Cbar: MatFn
    Cddash: MatFn
    Dbar: MatFn
    Dddash: MatFn
    Hbar: MatFn
    Hddash: MatFn

    @classmethod
    def from_constant(cls, Cbar, Cddash=None, Dbar=None, Dddash=None,
                      Hbar=None, Hddash=None, p=0, m=0):
        Cbar = np.atleast_2d(np.asarray(Cbar, dtype=float))
        lbar, n = Cbar.shape
        mk = lambda M, shape: constm(M) if M is not None else _zero_fn(shape)
        return cls(
            lbar=lbar,
            Cbar=constm(Cbar),
            Cddash=mk(Cddash, (lbar, n)),
            Dbar=mk(Dbar, (lbar, m)),
            Dddash=mk(Dddash, (lbar, m)),
            Hbar=mk(Hbar, (lbar, p)),
            Hddash=mk(Hddash, (lbar, p)),
        )

    @classmethod
    def special_case(cls, sched):
        """Aux model equal to the differentiated output equation itself:
        ``Cbar = C``, ``Cddash = Cdot``, ``Dbar = D``, ``Dddash = Ddot``,
        ``Hbar = H``, ``Hddash = Hdot``.
        """
        return cls(
            lbar=sched.l,
            Cbar=sched.C,
            Cddash=sched.Cdot,
            Dbar=sched.D,
            Dddash=sched.Ddot,
            Hbar=sched.H,
            Hddash=sched.Hdot,
        )

    def structured(self, t, tol=lincore.RANK_TOL):
        """Structured SVD of ``Hbar(t)`` (pads to square when ``lbar < p``)."""
        Hb = np.atleast_2d(self.Hbar(t))
        if Hb.shape[1] > Hb.shape[0]:
            # Wide feedthrough: full SVD directly (more inputs than aux
            # outputs is legitimate here, unlike for the main channel).
            U, s, V = lincore.svd(Hb)
            r = int(np.count_nonzero(s > tol * s[0])) if s.size and s[0] > 0 else 0
            return asvd.StructuredSvd(
                U1=U[:, :r], U2=U[:, r:], V1=V[:, :r], V2=V[:, r:],
                sigma=s[:r].copy(),
            )
        return asvd.structured_svd(Hb, tol)

    def validate(self, ts, tol=1e-8):
        for t in np.atleast_1d(ts):
            f = self.structured(t)
            res = np.linalg.norm(f.U2.T @ np.atleast_2d(self.Hddash(t)))
            if res > tol:
                raise InvalidInput(
                    f"auxiliary feedthrough condition violated at t={t:.6g} "
                    f"(residual {res:.3g})"
                )
        return True


@dataclass
class DecoupledSystem:
    """Output-decoupled matrices at one time instant.

    ``T1`` maps ``y`` onto the channel carrying the feedthrough input
    component ``d1 = V1' d`` (with gain ``diag(sigma)``); ``T2 = U2'``
    yields the feedthrough-free channel.  ``T1 R T2' = 0`` by
    construction.
    """

    svd: asvd.StructuredSvd
    T1: np.ndarray
    T2: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    G1: np.ndarray
    G2: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    R: np.ndarray
    H1: np.ndarray = field(default=None)

    @property
    def rank_H(self):
        return self.svd.rank


def decouple_matrices(f, C, D, G, R):
    """Decoupling transform for given factors and coefficient matrices."""
    R = lincore.symmetrize(lincore.asmatrix(R, "R"))
    if not lincore.is_pd(R):
        raise InvalidNoise("measurement-noise intensity R must be positive definite")
    U1, U2 = f.U1, f.U2
    T2 = U2.T
    if f.rank:
        RU2 = R @ U2
        X = lincore.solve_pd(U2.T @ RU2, (U1.T @ RU2).T, "decoupling weight").T
        T1 = U1.T - X @ U2.T
    else:
        T1 = np.zeros((0, f.l))
    C = lincore.asmatrix(C, "C")
    D = np.atleast_2d(np.asarray(D, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    return DecoupledSystem(
        svd=f,
        T1=T1,
        T2=T2,
        C1=T1 @ C,
        C2=T2 @ C,
        D1=T1 @ D,
        D2=T2 @ D,
        G1=G @ f.V1,
        G2=G @ f.V2,
        R1=T1 @ R @ T1.T,
        R2=T2 @ R @ T2.T,
        R=R,
        H1=f.U1 @ np.diag(f.sigma),
    )


def decouple(sched, R, t, tol=lincore.RANK_TOL, f=None):
    """Decoupled system at time ``t`` for noise intensity matrix ``R``."""
    if f is None:
        f = asvd.structured_svd(sched.H(t), tol)
    return decouple_matrices(f, sched.C(t), sched.D(t), sched.G(t), R)


def t1dot(f, rates, R, Rdot):
    """Time derivative of the ``T1`` block of the decoupling transform."""
    if f.rank == 0:
        return np.zeros((0, f.l))
    U1, U2 = f.U1, f.U2
    W = U2.T @ R @ U2
    Wi = np.linalg.inv(W)
    Wd = U2.T @ Rdot @ U2
    Et = rates.E.T
    term1 = U1.T @ R @ U2 @ Wi @ Wd @ Wi @ U2.T
    term2 = Et @ U1.T
    term3 = U1.T @ Rdot @ U2 @ Wi @ U2.T
    term4 = Et @ U1.T @ R @ U2 @ Wi @ U2.T
    return term1 + term2 - term3 - term4


@dataclass
class PlantTrajectory:
    """Simulated truth data on a uniform grid."""

    ts: np.ndarray
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    u: np.ndarray
    ybar: Optional[np.ndarray] = None
    ydot: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def simulate_plant(
    sched,
    x0,
    t0,
    t1,
    h,
    rng,
    d_fn=None,
    ddot_fn=None,
    u_fn=None,
    white=None,
    gm=None,
    aux=None,
    noise_scale=1.0,
):
    """Euler-Maruyama simulation of the plant on a uniform grid.

    With ``white`` set, process and measurement noises are sampled per
    step with variance ``intensity / h`` (so the discrete sequence
    approximates continuous white noise of the given intensity), and the
    auxiliary measurement of ``aux`` is synthesized from the state
    derivative.  With ``gm`` set, the noises are the Gauss-Markov states
    and the exact measurement derivative ``ydot`` is recorded as well.
    ``noise_scale`` scales all sampled noises (0 gives a noise-free run
    against the same model).
    """
    if (white is None) == (gm is None):
        raise InvalidInput("exactly one of white/gm noise modes must be given")
    n, m, p, l, q = sched.n, sched.m, sched.p, sched.l, sched.q
    if u_fn is None:
        u_fn = sched.u
    if d_fn is None:
        d_fn = constv(np.zeros(p))
    N = int(round((t1 - t0) / h))
    ts = t0 + h * np.arange(N + 1)
    x = np.asarray(x0, dtype=float).copy()
    X = np.zeros((N + 1, n))
    Y = np.zeros((N + 1, l))
    Dd = np.zeros((N + 1, max(p, 1)))[:, :p]
    Uu = np.zeros((N + 1, max(m, 1)))[:, :m]
    Ybar = None
    Ydot = None
    Wrec = None
    Vrec = None

    if white is not None:
        lbar = aux.lbar if aux is not None else 0
        Ybar = np.zeros((N + 1, lbar)) if aux is not None else None
        # Joint sampling of (v, vbar) honouring the cross intensity.
        def meas_noise(t):
            Rm = np.atleast_2d(white.R(t))
            if aux is not None and white.Rbar is not None:
                Rb = np.atleast_2d(white.Rbar(t))
                Rg = (
                    np.atleast_2d(white.Rgrave(t))
                    if white.Rgrave is not None
                    else np.zeros((l, lbar))
                )
                big = np.block([[Rm, Rg], [Rg.T, Rb]])
            else:
                big = Rm
            big = lincore.psd_floor(big / h, 0.0)
            z = np.linalg.cholesky(big + 1e-300 * np.eye(big.shape[0])) @ rng.standard_normal(
                big.shape[0]
            )
            return noise_scale * z[:l], noise_scale * z[l:]
        Wrec = np.zeros((N + 1, q))
    else:
        lbar = 0
        w_state = np.zeros(gm.nw)
        vs_state = np.zeros(2 * gm.nv)
        if noise_scale > 0:
            cw = np.linalg.cholesky(lincore.psd_floor(gm.P0_w, 0.0) + 1e-300 * np.eye(gm.nw))
            cv = np.linalg.cholesky(lincore.psd_floor(gm.P0_v, 0.0) + 1e-300 * np.eye(2 * gm.nv))
            w_state = noise_scale * (cw @ rng.standard_normal(gm.nw))
            vs_state = noise_scale * (cv @ rng.standard_normal(2 * gm.nv))
        Ydot = np.zeros((N + 1, l))
        Wrec = np.zeros((N + 1, gm.nw))
        Vrec = np.zeros((N + 1, gm.nv))

    for k in range(N + 1):
        t = ts[k]
        A, B, G, C, D, H, W = (
            sched.A(t), sched.B(t), sched.G(t), sched.C(t),
            sched.D(t), sched.H(t), sched.W(t),
        )
        u = np.atleast_1d(u_fn(t)) if m else np.zeros(0)
        d = np.atleast_1d(d_fn(t)) if p else np.zeros(0)
        X[k] = x
        Dd[k] = d
        Uu[k] = u
        drift = A @ x + B @ u + G @ d
        if white is not None:
            Qm = np.atleast_2d(white.Q(t))
            wk = np.zeros(q)
            if q and noise_scale > 0:
                wk = noise_scale * (
                    np.linalg.cholesky(Qm / h + 1e-300 * np.eye(q)) @ rng.standard_normal(q)
                )
            Wrec[k] = wk
            vk, vbark = meas_noise(t)
            Y[k] = C @ x + D @ u + H @ d + vk
            if aux is not None:
                xdot = drift + W @ wk
                dd = np.atleast_1d(ddot_fn(t)) if (ddot_fn is not None and p) else np.zeros(p)
                Ybar[k] = (
                    aux.Cbar(t) @ xdot
                    + aux.Cddash(t) @ x
                    + aux.Dbar(t) @ np.atleast_1d(sched.udot(t))
                    + aux.Dddash(t) @ u
                    + aux.Hbar(t) @ dd
                    + aux.Hddash(t) @ d
                    + vbark
                )
            xdot_step = drift + W @ wk
        else:
            v = vs_state[: gm.nv]
            vdot = vs_state[gm.nv :]
            Wrec[k] = w_state
            Vrec[k] = v
            Y[k] = C @ x + D @ u + H @ d + v
            dd = np.atleast_1d(ddot_fn(t)) if (ddot_fn is not None and p) else np.zeros(p)
            xdot_step = drift + W @ w_state
            Ydot[k] = (
                sched.Cdot(t) @ x
                + C @ xdot_step
                + sched.Ddot(t) @ u
                + D @ np.atleast_1d(sched.udot(t))
                + sched.Hdot(t) @ d
                + H @ dd
                + vdot
            )
        if k < N:
            x = x + h * xdot_step
            if not np.all(np.isfinite(x)):
                raise DivergedSimulation(ts[k + 1])
            if gm is not None and noise_scale > 0:
                w_state, vs_state = gm_noise_step(gm, w_state, vs_state, h, rng)
    return PlantTrajectory(
        ts=ts, x=X, y=Y, d=Dd, u=Uu, ybar=Ybar, ydot=Ydot, w=Wrec, v=Vrec
    )


class PlantStepper:
    """Step-wise plant interface for closed-loop simulation.

    Mirrors :func:`simulate_plant` (Euler-Maruyama, per-step white noise or
    Gauss-Markov noise states) but lets the caller choose the input at
    every step, so an estimator/controller pair can run in the loop.  A
    ``dynamics_fn(t, x, u, d) -> xdot_deterministic`` override replaces the
    linear drift for nonlinear truth models.
    """

    def __init__(self, sched, x0, t0, h, rng, d_fn=None, white=None, gm=None,
                 aux=None, noise_scale=1.0, dynamics_fn=None, meas_fn=None):
        if (white is None) == (gm is None):
            raise InvalidInput("exactly one of white/gm noise modes must be given")
        self.sched = sched
        self.x = np.asarray(x0, dtype=float).copy()
        self.t = float(t0)
        self.h = float(h)
        self.rng = rng
        self.d_fn = d_fn if d_fn is not None else constv(np.zeros(sched.p))
        self.white = white
        self.gm = gm
        self.aux = aux
        self.noise_scale = noise_scale
        self.dynamics_fn = dynamics_fn
        self.meas_fn = meas_fn
        if gm is not None:
            self.w_state = np.zeros(gm.nw)
            self.vs_state = np.zeros(2 * gm.nv)
            if noise_scale > 0:
                cw = np.linalg.cholesky(lincore.psd_floor(gm.P0_w) + 1e-300 * np.eye(gm.nw))
                cv = np.linalg.cholesky(lincore.psd_floor(gm.P0_v) + 1e-300 * np.eye(2 * gm.nv))
                self.w_state = noise_scale * (cw @ rng.standard_normal(gm.nw))
                self.vs_state = noise_scale * (cv @ rng.standard_normal(2 * gm.nv))
        self._wk = np.zeros(sched.q)
        self._vk = np.zeros(sched.l)
        self._vbark = np.zeros(aux.lbar) if aux is not None else np.zeros(0)
        self._sample_noises()

    def _sample_noises(self):
        t, h, sched = self.t, self.h, self.sched
        if self.white is not None:
            q, l = sched.q, sched.l
            self._wk = np.zeros(q)
            if q and self.noise_scale > 0:
                Qm = np.atleast_2d(self.white.Q(t))
                self._wk = self.noise_scale * (
                    np.linalg.cholesky(Qm / h + 1e-300 * np.eye(q))
                    @ self.rng.standard_normal(q)
                )
            Rm = np.atleast_2d(self.white.R(t))
            if self.aux is not None and self.white.Rbar is not None:
                lbar = self.aux.lbar
                Rb = np.atleast_2d(self.white.Rbar(t))
                Rg = (
                    np.atleast_2d(self.white.Rgrave(t))
                    if self.white.Rgrave is not None
                    else np.zeros((l, lbar))
                )
                big = np.block([[Rm, Rg], [Rg.T, Rb]])
            else:
                big = Rm
            z = np.zeros(big.shape[0])
            if self.noise_scale > 0:
                z = self.noise_scale * (
                    np.linalg.cholesky(lincore.psd_floor(big / h) + 1e-300 * np.eye(big.shape[0]))
                    @ self.rng.standard_normal(big.shape[0])
                )
            self._vk = z[:l]
            self._vbark = z[l:]
        else:
            self._vk = self.vs_state[: self.gm.nv]

    def _drift(self, t, x, u, d):
        if self.dynamics_fn is not None:
            return self.dynamics_fn(t, x, u, d)
        return self.sched.A(t) @ x + self.sched.B(t) @ u + self.sched.G(t) @ d

    def measure(self, u):
        """Measurements at the current time using input ``u`` (held over
        the step).  Returns ``(y, ybar_or_None, d)``."""
        t, x = self.t, self.x
        sched = self.sched
        d = np.atleast_1d(self.d_fn(t)) if sched.p else np.zeros(0)
        u = np.atleast_1d(u) if sched.m else np.zeros(0)
        if self.meas_fn is not None:
            base = self.meas_fn(t, x, u, d)
        else:
            base = sched.C(t) @ x + sched.D(t) @ u + sched.H(t) @ d
        y = base + self._vk
        ybar = None
        if self.aux is not None and self.white is not None:
            xdot = self._drift(t, x, u, d) + sched.W(t) @ self._wk
            ybar = (
                self.aux.Cbar(t) @ xdot
                + self.aux.Cddash(t) @ x
                + self.aux.Dddash(t) @ u
                + self.aux.Hddash(t) @ d
                + self._vbark
            )
        return y, ybar, d

    def advance(self, u):
        """Euler-Maruyama step with input ``u`` held over ``[t, t+h]``."""
        t, h = self.t, self.h
        sched = self.sched
        d = np.atleast_1d(self.d_fn(t)) if sched.p else np.zeros(0)
        u = np.atleast_1d(u) if sched.m else np.zeros(0)
        w = self._wk if self.white is not None else self.w_state
        self.x = self.x + h * (self._drift(t, self.x, u, d) + sched.W(t) @ w)
        if not np.all(np.isfinite(self.x)):
            raise DivergedSimulation(t + h)
        if self.gm is not None and self.noise_scale > 0:
            self.w_state, self.vs_state = gm_noise_step(
                self.gm, self.w_state, self.vs_state, h, self.rng
            )
        self.t = t + h
        self._sample_noises()
