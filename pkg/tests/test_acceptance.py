"""End-to-end acceptance checks, one test per criterion.

These exercise the full stack (decoupling, gains, filters, controller,
harness) against independently stated targets: closed-form oracles,
textbook reference implementations, statistical bands and scaling laws.
They are intentionally heavier than the per-module tests.
"""
import dataclasses
import json
import time

import numpy as np
import pytest

from sise import (alise, analysis, asvd, cli, control, elise, harness,
                  lincore, scenarios, sysmodel)
from sise.errors import NoStabilizingSolution

from conftest import make_lti_plant, make_lti_aux, make_lti_white
from test_alise import make_lti_gm
from test_harness import make_lti_scenario


# ---------------------------------------------------------------------------
# 1. smooth-SVD factor rates on random analytic matrix paths

def test_ac1_asvd_rates_random_paths(capsys):
    t_start = time.perf_counter()
    rc = cli.main(["asvd-check", "--samples", "1000", "--seed", "0"])
    elapsed = time.perf_counter() - t_start
    report = json.loads(capsys.readouterr().out)
    assert rc == 0
    assert elapsed < 30.0
    assert report["samples"] == 1000
    assert report["min_convergence_order"] >= 1.8
    assert report["max_skew_residual"] <= 1e-10
    assert report["max_annihilation_residual"] <= 1e-8


# ---------------------------------------------------------------------------
# 2. degeneration to the Kalman-Bucy filter when no unknown input exists

def test_ac2_kalman_bucy_degeneration():
    A = np.array([[-1.0, 0.2], [0.0, -0.5]])
    Q = 0.1 * np.eye(2)
    R = np.eye(2)
    sched = sysmodel.SystemSchedule.lti(A=A, C=np.eye(2), W=np.eye(2))
    white = sysmodel.WhiteNoiseSpec.constant(Q=Q, R=R)
    aux = sysmodel.AuxMeasurementModel.from_constant(
        Cbar=np.zeros((0, 2)), p=0, m=0)
    filt = elise.EliseFilter(sched, white, aux)

    def sig(t):
        return elise.Signals(
            y=np.array([np.sin(1.3 * t), 0.4 * np.cos(2.0 * t)]),
            ybar=np.zeros(0), u=np.zeros(0), udot=np.zeros(0))

    h, tf = 1e-3, 0.5
    P0 = np.array([[0.3, 0.05], [0.05, 0.2]])
    run = filt.run(0.0, tf, h, np.zeros(2), P0, sig)

    # reference: textbook Kalman-Bucy equations, same RK4 staging on the
    # joint (xhat, P) state
    C = np.eye(2)
    Rinv = np.linalg.inv(R)

    def rhs(t, yv):
        xh = yv[:2]
        P = lincore.symmetrize(yv[2:].reshape(2, 2))
        L = P @ C.T @ Rinv
        xdot = A @ xh + L @ (sig(t).y - C @ xh)
        Pdot = A @ P + P @ A.T + Q - L @ R @ L.T
        return np.concatenate([xdot, lincore.symmetrize(Pdot).ravel()])

    _, ys = lincore.integrate_ode(
        rhs, np.concatenate([np.zeros(2), P0.ravel()]), 0.0, tf, h)
    P_ref = ys[:, 2:].reshape(-1, 2, 2)
    assert np.abs(run.xhat - ys[:, :2]).max() <= 1e-9
    assert np.abs(run.Px - P_ref).max() <= 1e-9
    # effective output gain (in y coordinates) equals the Kalman gain
    dec, _, g = filt._stage(tf, run.Px[-1])
    assert np.abs(g.L @ dec.T2 - P_ref[-1] @ C.T @ Rinv).max() <= 1e-9
    # scalar CARE oracle: -2P + 1 - P^2 = 0 on A=-1, C=Q=R=1
    P = lincore.solve_care([[-1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert abs(P[0, 0] - (np.sqrt(2.0) - 1.0)) <= 1e-9


# ---------------------------------------------------------------------------
# 3. unbiased state and input estimates on an LTI system

def _trial_means(scen, trials, seed, t_cut):
    filt, gains = harness.prepare_gains(scen)
    x_means, d_means = [], []
    for trial in range(trials):
        res = harness.run_trial_open(scen, filt, gains,
                                     harness.trial_rng(seed, trial))
        mask = res.ts >= t_cut
        x_means.append((res.x_true - res.x_hat)[mask].mean(axis=0))
        de = (res.d_true - res.d_hat)[mask]
        d_means.append(np.nanmean(de, axis=0))
    return np.array(x_means), np.array(d_means)


def _assert_unbiased(means, label):
    trials = means.shape[0]
    mu = means.mean(axis=0)
    se = means.std(axis=0, ddof=1) / np.sqrt(trials)
    assert np.all(np.abs(mu) <= 3.0 * se), (label, mu, 3.0 * se)


def test_ac3_unbiasedness_lti_500_trials():
    d_const = lambda t: np.array([0.2, -0.1])
    scen_e = dataclasses.replace(
        make_lti_scenario(tf=1.0, d_fn=d_const), h=5e-3)
    xm, dm = _trial_means(scen_e, trials=500, seed=2026, t_cut=0.5)
    _assert_unbiased(xm, "state (aux-derivative filter)")
    _assert_unbiased(dm, "input (aux-derivative filter)")

    scen_a = scenarios.Scenario(
        name="lti-gm", sched=make_lti_plant(), white=None, gm=make_lti_gm(),
        aux=None, d_fn=d_const, x0=np.zeros(2), xhat0=np.zeros(2),
        P0x=0.1 * np.eye(2), t0=0.0, tf=1.0, h=5e-3, fd_dt=0.05)
    xm, dm = _trial_means(scen_a, trials=500, seed=62, t_cut=0.5)
    _assert_unbiased(xm, "state (lagged-difference filter)")
    _assert_unbiased(dm, "input (lagged-difference filter)")


# ---------------------------------------------------------------------------
# 4. NEES chi-square consistency for both filters

def _nees_fraction(scen, trials, seed):
    filt, gains = harness.prepare_gains(scen)
    N = len(gains.stages)
    idx = np.arange(0, N, 8)
    Px_traj = np.array([gains.stages[k][0][2].Px for k in idx])
    chol = np.linalg.cholesky(scen.P0x)
    errors = np.zeros((trials, idx.size, scen.sched.n))
    for trial in range(trials):
        x0 = scen.xhat0 + chol @ np.random.default_rng(
            10_000 + seed + trial).normal(size=scen.sched.n)
        res = harness.run_trial_open(dataclasses.replace(scen, x0=x0), filt,
                                     gains, harness.trial_rng(seed, trial))
        errors[trial] = (res.x_true - res.x_hat)[idx]
    rep = analysis.consistency_metrics(errors, Px_traj, confidence=0.95)
    return rep.nees_fraction_in_band


def test_ac4_nees_consistency_both_filters():
    d_const = lambda t: np.array([0.1, -0.05])
    scen_e = dataclasses.replace(
        make_lti_scenario(tf=1.0, d_fn=d_const), h=5e-3)
    assert _nees_fraction(scen_e, trials=220, seed=5) >= 0.8

    scen_a = scenarios.Scenario(
        name="lti-gm", sched=make_lti_plant(), white=None, gm=make_lti_gm(),
        aux=None, d_fn=d_const, x0=np.zeros(2), xhat0=np.zeros(2),
        P0x=0.1 * np.eye(2), t0=0.0, tf=1.0, h=5e-3, fd_dt=0.05)
    assert _nees_fraction(scen_a, trials=220, seed=6) >= 0.8


# ---------------------------------------------------------------------------
# 5. exponential decay of a deliberate initialization bias

def test_ac5_bias_decay_and_input_envelope():
    sched = make_lti_plant()
    white = make_lti_white()
    aux = make_lti_aux()
    Pstar = scenarios.stationary_covariance(sched, 0.0, white=white, aux=aux)
    filt = elise.EliseFilter(sched, white, aux)
    dec, _, g = filt._stage(0.0, Pstar)
    bias0 = np.array([0.8, -0.5])
    bb = analysis.bias_bounds(g, dec, bias0)

    # noise-free run from the biased estimate against the zero trajectory;
    # starting at the stationary covariance keeps the gains constant
    gs = filt.prepare(0.0, 6.0, 2e-3, Pstar)
    zero_sig = lambda t: elise.Signals(y=np.zeros(2), ybar=np.zeros(1),
                                       u=np.zeros(0), udot=np.zeros(0))
    run = filt.run_with_gains(gs, bias0, zero_sig)
    xerr = np.linalg.norm(run.xhat, axis=1)
    derr = np.linalg.norm(run.dhat, axis=1)

    m = (run.ts >= 1.0) & (run.ts <= 5.0)
    fitted_rate = -np.polyfit(run.ts[m], np.log(xerr[m]), 1)[0]
    assert fitted_rate >= 0.8 * bb.gamma
    env = bb.alpha1 * np.exp(-bb.gamma * run.ts)
    assert np.mean(derr > env + 1e-12) <= 0.05


# ---------------------------------------------------------------------------
# 6. lagged-difference approximation laws

def test_ac6_lag_scaling_laws():
    lags = (0.1, 0.05, 0.025)
    sched = make_lti_plant()
    gm = make_lti_gm()

    # (a) input bias on a noise-free ramp d2(t) = t is O(lag)
    h = 1e-3
    traj = sysmodel.simulate_plant(
        sched, np.zeros(2), 0.0, 1.0, h, np.random.default_rng(0),
        gm=gm, d_fn=lambda t: np.array([0.0, t]), noise_scale=0.0)
    filt = alise.AliseFilter(sched, gm, 0.05)
    dec, auxp, g, *_ = filt._stage(0.8, np.zeros((2, 2)), gm.P0_w, gm.P0_v,
                                   with_derivs=False)
    z2_series = traj.y @ dec.T2.T
    k_eval = 800
    biases = []
    for fd_dt in lags:
        buf = alise.LagBuffer(fd_dt + 2 * h)
        for k in range(k_eval + 1):
            buf.push(traj.ts[k], z2_series[k])
        est = alise.estimate_input_fd(
            g, dec, auxp, traj.x[k_eval], np.zeros(0), np.zeros(0),
            dec.T1 @ traj.y[k_eval], z2_series[k_eval], buf,
            traj.ts[k_eval], fd_dt)
        biases.append(float(np.abs(est.d2 - dec.svd.V2.T @ traj.d[k_eval])[0]))
    slope = np.polyfit(np.log(lags), np.log(biases), 1)[0]
    assert 0.7 <= slope <= 1.3

    # (b) covariance-trace gap between the lagged-difference input estimate
    # and the one with direct derivative access is O(lag^2): over an
    # ensemble of smooth measurement paths the estimate difference is the
    # Taylor remainder of the backward difference
    rng = np.random.default_rng(17)
    paths = []
    for _ in range(60):
        a = rng.normal(size=3)
        w = rng.uniform(0.5, 4.0, size=3)
        phi = rng.uniform(0.0, 2 * np.pi, size=3)
        paths.append((a, w, phi))
    t_eval = 0.7
    xhat = np.zeros(2)
    z1 = np.zeros(dec.T1.shape[0])
    gaps = []
    for fd_dt in lags:
        acc = np.zeros((2, 2))
        for a, w, phi in paths:
            z2 = lambda t: np.array([np.sum(a * np.sin(w * t + phi))])
            z2dot = np.array([np.sum(a * w * np.cos(w * t_eval + phi))])
            zd_fd = (z2(t_eval) - z2(t_eval - fd_dt)) / fd_dt
            d_fd = elise.estimate_input(g, dec, auxp, xhat, np.zeros(0),
                                        np.zeros(0), z1, zd_fd).d
            d_ex = elise.estimate_input(g, dec, auxp, xhat, np.zeros(0),
                                        np.zeros(0), z1, z2dot).d
            delta = d_fd - d_ex
            acc += np.outer(delta, delta)
        gaps.append(abs(np.trace(acc / len(paths))))
    slope = np.polyfit(np.log(lags), np.log(gaps), 1)[0]
    assert 1.7 <= slope <= 2.3


# ---------------------------------------------------------------------------
# 7. equivalence of the shifted and derivative-fed estimator forms

def test_ac7_theta_and_derivative_fed_agree_on_helicopter():
    scen = scenarios.helicopter(filter_kind="alise", tf=1.0,
                                with_controller=False)
    filt = alise.AliseFilter(scen.sched, scen.gm, scen.fd_dt)
    gs = filt.prepare(0.0, 1.0, 1e-3, scen.P0x)

    def sig(t):
        y = np.array([np.sin(1.3 * t) + 0.2 * np.cos(4.0 * t),
                      0.5 * np.cos(2.0 * t),
                      0.3 * np.sin(0.7 * t)])
        ydot = np.array([1.3 * np.cos(1.3 * t) - 0.8 * np.sin(4.0 * t),
                         -np.sin(2.0 * t),
                         0.21 * np.cos(0.7 * t)])
        u = np.array([0.3 * np.sin(2.0 * t)])
        udot = np.array([0.6 * np.cos(2.0 * t)])
        return elise.Signals(y=y, ybar=ydot, u=u, udot=udot)

    theta_run = filt.run_with_gains(gs, np.zeros(4), sig, exact_zdot=True)
    deriv_run = filt.run_e2(gs, np.zeros(4), sig)
    assert np.abs(theta_run.xhat - deriv_run.xhat).max() <= 1e-6


# ---------------------------------------------------------------------------
# 8. Riccati flow converges to the algebraic solution; fails undetectable

def test_ac8_steady_state_covariance():
    # helicopter frozen at t=0 so the stationary point is exact
    scen = scenarios.helicopter(filter_kind="elise", with_controller=False)
    sched = scen.sched
    C0 = sched.C(0.0)
    sched.C = sysmodel.constm(C0)
    sched.Cdot = sysmodel.constm(np.zeros_like(C0))
    sched.Cddot = sysmodel.constm(np.zeros_like(C0))
    Pstar = scenarios.stationary_covariance(sched, 0.0, white=scen.white,
                                            aux=scen.aux)
    filt = elise.EliseFilter(sched, scen.white, scen.aux)
    finals = []
    for P0 in (0.01 * np.eye(4), 2.0 * np.eye(4)):
        gs = filt.prepare(0.0, 10.0, 4e-3, P0)
        finals.append(gs.final[2].Px)
    assert np.abs(finals[0] - Pstar).max() <= 1e-6
    assert np.abs(finals[1] - Pstar).max() <= 1e-6
    assert np.abs(finals[0] - finals[1]).max() <= 1e-6

    # undetectable counterexample: unstable mode invisible to the output
    with pytest.raises(NoStabilizingSolution):
        lincore.solve_care([[0.4]], [[0.0]], [[1.0]], [[1.0]])
    sched_u = sysmodel.SystemSchedule.lti(A=[[0.4]], C=[[0.0]], W=[[1.0]])
    white_u = sysmodel.WhiteNoiseSpec.constant(Q=[[1.0]], R=[[1.0]])
    aux_u = sysmodel.AuxMeasurementModel.from_constant(
        Cbar=np.zeros((0, 1)), p=0, m=0)
    filt_u = elise.EliseFilter(sched_u, white_u, aux_u)
    gs = filt_u.prepare(0.0, 5.0, 1e-2, [[0.1]])
    assert gs.final[2].Px[0, 0] > 100.0 * 0.1  # divergent, no fixed point


# ---------------------------------------------------------------------------
# 9. separation principle and matched-disturbance rejection

def test_ac9_separation_and_rejection():
    # spectrum separation: closed loop = regulator + estimator, multiset
    rng = np.random.default_rng(3)
    A = rng.normal(size=(3, 3))
    B = rng.normal(size=(3, 1))
    K = rng.normal(size=(1, 3))
    Abar = rng.normal(size=(3, 3))
    L = rng.normal(size=(3, 2))
    C2 = rng.normal(size=(2, 3))
    reg, est, closed = control.separation_spectrum(
        A, B, K, Abar, L, C2, coupling=rng.normal(size=(3, 3)))
    union = np.sort_complex(np.concatenate([reg.eigenvalues,
                                            est.eigenvalues]))
    assert np.allclose(union, np.sort_complex(closed.eigenvalues), atol=1e-8)

    # matched disturbance: actuation spans the disturbance channel, so the
    # resolved loop cancels it and the state ignores d entirely
    sched = sysmodel.SystemSchedule.lti(
        A=np.diag([0.0, 0.0, -1.0]),  # unactuated mode must be stable
        B=np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]),
        C=np.eye(3),
        G=np.array([[1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]),
        H=np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]),
        W=np.eye(3))
    white = sysmodel.WhiteNoiseSpec.constant(
        Q=1e-4 * np.eye(3), R=1e-4 * np.eye(3), Rbar=[[1e-4]])
    aux = sysmodel.AuxMeasurementModel.from_constant(
        Cbar=np.array([[0.0, 1.0, 0.0]]), p=2, m=2)
    dec = sysmodel.decouple(sched, white.R(0.0), 0.0)
    rj = control.rejection_gains(sched.B(0.0), dec.G1, dec.G2)
    assert rj.certified
    K, _ = control.lqr_gain(sched.A(0.0), sched.B(0.0), np.eye(3), np.eye(2))
    spec = control.ControllerSpec(K=K, J1=rj.J1, J2=rj.J2)
    x0 = np.array([0.2, -0.1, 0.3])
    d_fn = lambda t: np.array([0.4 * np.sin(3.0 * t), 0.3 * np.cos(2.0 * t)])
    common = dict(x0=x0, xhat0=x0, P0x=0.01 * np.eye(3), t0=0.0, t1=2.0,
                  h=1e-3)
    _, x_d, _ = harness.simulate_closed_loop_deterministic(
        sched, white, aux, spec, d_fn=d_fn, **common)
    _, x_0, _ = harness.simulate_closed_loop_deterministic(
        sched, white, aux, spec, d_fn=None, **common)
    assert np.abs(x_d - x_0).max() <= 1e-9

    # helicopter rejection gains: bias channel is unmatched (0), wind
    # channel reproduces the pinned value
    ctrl = scenarios.helicopter_controller()
    assert np.allclose(ctrl.J1, 0.0, atol=1e-12)
    assert abs(ctrl.J2[0, 0] - (-1.943e-3)) < 1e-4


# ---------------------------------------------------------------------------
# 10. benchmark experiments at desk scale

def _trace_settles_fast(ts, tr, window=0.1):
    """Trace settles within the first window: its change there is no more
    than twice the largest later per-window change (slow drift), or within
    5% of its level."""
    def change(a, b):
        m = (ts >= a) & (ts <= b)
        return float(tr[m].max() - tr[m].min())

    head = change(0.0, window)
    later = max(change(a, a + window)
                for a in np.arange(window, ts[-1] - window + 1e-9, window))
    return head <= max(2.0 * later, 0.05 * abs(tr[0]))


def test_ac10_benchmark_experiments():
    # helicopter: 100 closed-loop trials inside the time budget with
    # immediately settled covariance traces
    scen = scenarios.helicopter(filter_kind="elise")
    t_start = time.perf_counter()
    mc = harness.run_monte_carlo(scen, trials=100, seed=0)
    assert time.perf_counter() - t_start < 300.0
    assert np.all(np.isfinite(mc.rmse_state))
    assert np.all(np.isfinite(mc.rmse_input))
    assert _trace_settles_fast(mc.ts, mc.tr_Px)
    assert _trace_settles_fast(mc.ts, mc.tr_Pd)

    # reentry: 100-trial runs on the linearized deviation model for both
    # filters; error levels bounded and not growing after the transient
    runs = {}
    for kind in ("elise", "alise"):
        scen = scenarios.reentry(filter_kind=kind, tf=5.0)
        scen = dataclasses.replace(scen, truth=None, controller=None,
                                   x0=np.zeros(5), xhat0=np.zeros(5))
        filt, gains = harness.prepare_gains(scen)
        mc = harness.run_monte_carlo(scen, trials=100, seed=1,
                                     closed_loop=False)
        assert np.all(np.isfinite(mc.rmse_state_t))
        early = (mc.ts >= 0.5) & (mc.ts < 2.5)
        late = mc.ts >= 2.5
        rs = np.linalg.norm(mc.rmse_state_t, axis=1)
        assert rs[late].mean() <= 1.5 * rs[early].mean()
        # ensemble-mean estimate of the square-wave sensor fault tracks it
        warm = mc.ts >= 1.0
        fault_corr = np.corrcoef(mc.mean_d_hat[warm, 1],
                                 mc.mean_d_true[warm, 1])[0, 1]
        assert fault_corr >= 0.9
        # matched noise-free runs for the approximation-error comparison
        runs[kind] = (scen, filt, gains)

    # the aux-derivative filter recovers the dynamics-only input channel
    # (the wind) exactly, the lagged-difference filter only up to its
    # finite-difference bias
    v2 = asvd.structured_svd(runs["elise"][0].sched.H(0.0)).V2[:, 0]
    d2_rmse = {}
    for kind, (scen, filt, gains) in runs.items():
        res = harness.run_trial_open(scen, filt, gains,
                                     harness.trial_rng(0, 0),
                                     noise_scale=0.0)
        err = (res.d_true - res.d_hat) @ v2
        keep = (~np.isnan(err)) & (res.ts >= 1.0)
        d2_rmse[kind] = float(np.sqrt(np.mean(err[keep] ** 2)))
    assert d2_rmse["elise"] <= d2_rmse["alise"]
