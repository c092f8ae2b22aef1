import dataclasses

import numpy as np
import pytest

from sise import elise, lincore, scenarios, sysmodel


def helicopter_pieces(t=0.0, Px_scale=0.01):
    scen = scenarios.helicopter(filter_kind="elise", with_controller=False)
    sched, white, aux = scen.sched, scen.white, scen.aux
    dec = sysmodel.decouple(sched, white.R(t), t)
    auxp = elise.aux_projection_white(aux, white, dec, t)
    Px = Px_scale * np.eye(sched.n)
    g = elise.compute_gains(dec, auxp, sched.A(t), sched.B(t), sched.W(t),
                            white.Q(t), Px)
    return scen, dec, auxp, g


def scalar_no_feedthrough(q=3.0, rbar=1.0, cbar=1.0):
    """1-state, 1-output plant whose single unknown input is dynamics-only."""
    sched = sysmodel.SystemSchedule.lti(
        A=[[0.0]], C=[[1.0]], G=[[1.0]], H=[[0.0]], W=[[1.0]])
    white = sysmodel.WhiteNoiseSpec.constant(
        Q=[[q]], R=[[1.0]], Rbar=[[rbar]], Rgrave=[[0.0]])
    aux = sysmodel.AuxMeasurementModel.from_constant(
        Cbar=[[cbar]], p=1, m=0)
    dec = sysmodel.decouple(sched, white.R(0.0), 0.0)
    auxp = elise.aux_projection_white(aux, white, dec, 0.0)
    g = elise.compute_gains(dec, auxp, sched.A(0.0), sched.B(0.0),
                            sched.W(0.0), white.Q(0.0), np.zeros((1, 1)))
    return sched, white, aux, dec, auxp, g


# ---------------------------------------------------------------------------
# gain identities

def test_m1_is_inverse_singular_values():
    _, dec, _, g = helicopter_pieces()
    sig = dec.svd.sigma
    assert np.allclose(g.M1 @ np.diag(sig), np.eye(sig.size), atol=1e-12)


def test_m2_left_inverse_of_c2bar_g2():
    _, dec, auxp, g = helicopter_pieces(Px_scale=0.1)
    CG = auxp.C2bar @ dec.G2
    assert np.allclose(g.M2 @ CG, np.eye(CG.shape[1]), atol=1e-8)


def test_rtilde2_symmetric_pd():
    _, _, _, g = helicopter_pieces()
    assert np.allclose(g.Rtilde2, g.Rtilde2.T)
    assert np.linalg.eigvalsh(g.Rtilde2).min() > 0


def test_scalar_synthetic_gains():
    # Rt2 = C2bar Qhat C2bar' + Rbar2 = 3 + 1 = 4 with Px = 0, A = 0
    _, _, _, dec, auxp, g = scalar_no_feedthrough(q=3.0, rbar=1.0)
    assert abs(g.Rtilde2[0, 0] - 4.0) < 1e-12
    # un-normalized projector G2' C2bar' Rt2^{-1} is 0.25 ...
    proj = dec.G2.T @ auxp.C2bar.T @ g.Rtilde2_inv
    assert abs(abs(proj[0, 0]) - 0.25) < 1e-12
    # ... but the gain itself is its normalization: M2 C2bar G2 = 1
    assert abs((g.M2 @ auxp.C2bar @ dec.G2)[0, 0] - 1.0) < 1e-12


def test_no_input_reduces_to_kalman_bucy_gain():
    sched = sysmodel.SystemSchedule.lti(
        A=[[-1.0, 0.2], [0.0, -0.5]], C=np.eye(2), W=np.eye(2))
    white = sysmodel.WhiteNoiseSpec.constant(Q=0.1 * np.eye(2), R=np.eye(2))
    aux = sysmodel.AuxMeasurementModel.from_constant(
        Cbar=np.zeros((0, 2)), p=0, m=0)
    dec = sysmodel.decouple(sched, white.R(0.0), 0.0)
    auxp = elise.aux_projection_white(aux, white, dec, 0.0)
    Px = np.array([[0.3, 0.05], [0.05, 0.2]])
    g = elise.compute_gains(dec, auxp, sched.A(0.0), sched.B(0.0),
                            sched.W(0.0), white.Q(0.0), Px)
    assert g.M1.shape == (0, 0)
    assert g.M2.shape[0] == 0
    assert np.allclose(g.L, Px @ dec.C2.T @ np.linalg.inv(dec.R2), atol=1e-12)
    assert np.allclose(g.Abar, sched.A(0.0), atol=1e-12)
    assert np.allclose(g.Qbar, sched.W(0.0) @ white.Q(0.0) @ sched.W(0.0).T,
                       atol=1e-12)


def test_unidentifiable_input_raises():
    # aux channel blind to the input direction: Cbar G2 = 0
    sched = sysmodel.SystemSchedule.lti(
        A=np.zeros((2, 2)), C=np.eye(2), G=np.array([[1.0], [0.0]]),
        H=np.zeros((2, 1)), W=np.eye(2))
    white = sysmodel.WhiteNoiseSpec.constant(
        Q=np.eye(2), R=np.eye(2), Rbar=[[1.0]])
    aux = sysmodel.AuxMeasurementModel.from_constant(
        Cbar=np.array([[0.0, 1.0]]), p=1, m=0)
    dec = sysmodel.decouple(sched, white.R(0.0), 0.0)
    auxp = elise.aux_projection_white(aux, white, dec, 0.0)
    with pytest.raises(elise.UnidentifiableInput):
        elise.compute_gains(dec, auxp, sched.A(0.0), sched.B(0.0),
                            sched.W(0.0), white.Q(0.0), np.eye(2))


# ---------------------------------------------------------------------------
# input estimation

def exact_measurements(scen, t, x, d):
    """Noise-free y, ybar for state x, input d, u = 0."""
    sched, aux = scen.sched, scen.aux
    y = sched.C(t) @ x + sched.H(t) @ d
    xdot = sched.A(t) @ x + sched.G(t) @ d
    ybar = aux.Cbar(t) @ xdot + aux.Cddash(t) @ x + aux.Hddash(t) @ d
    return y, ybar


def test_noise_free_exact_input_recovery():
    scen, dec, auxp, g = helicopter_pieces(t=0.3)
    rng = np.random.default_rng(2)
    x = rng.normal(size=4)
    d = rng.normal(size=2)
    y, ybar = exact_measurements(scen, 0.3, x, d)
    est = elise.estimate_input(g, dec, auxp, x, np.zeros(1), np.zeros(1),
                               dec.T1 @ y, auxp.T2bar @ ybar)
    assert np.allclose(est.d, d, atol=1e-9)


def test_zero_innovation_zero_d1():
    scen, dec, auxp, g = helicopter_pieces()
    x = np.array([0.1, -0.2, 0.3, 0.05])
    y = scen.sched.C(0.0) @ x  # d = 0, so z1 - C1 x = 0
    est = elise.estimate_input(g, dec, auxp, x, np.zeros(1), np.zeros(1),
                               dec.T1 @ y, np.zeros(auxp.C2bar.shape[0]))
    assert np.allclose(est.d1, 0.0, atol=1e-12)


def test_input_estimate_recomposition_and_trace_identity(rng):
    scen, dec, auxp, g = helicopter_pieces(Px_scale=0.07)
    est = elise.estimate_input(g, dec, auxp, rng.normal(size=4),
                               np.zeros(1), np.zeros(1),
                               rng.normal(size=dec.T1.shape[0]),
                               rng.normal(size=auxp.C2bar.shape[0]))
    f = dec.svd
    assert np.allclose(est.d, f.V1 @ est.d1 + f.V2 @ est.d2, atol=1e-12)
    assert abs(np.trace(est.Pd) - np.trace(est.Pd1) - np.trace(est.Pd2)) < 1e-8


# ---------------------------------------------------------------------------
# filter right-hand side and steady state

def test_rhs_zero_gains_zero_inputs():
    _, dec, auxp, g = helicopter_pieces()
    g0 = dataclasses.replace(g, L=np.zeros_like(g.L))
    xhat = np.array([1.0, -0.5, 0.2, 0.0])
    xdot, _ = elise.filter_rhs(g0, dec, xhat, np.zeros(1),
                               dec.C2 @ xhat, np.zeros(1), np.zeros(1))
    assert np.allclose(xdot, g.A @ xhat, atol=1e-12)


def test_kalman_bucy_scalar_stationary_point():
    sched = sysmodel.SystemSchedule.lti(A=[[-1.0]], C=[[1.0]], W=[[1.0]])
    white = sysmodel.WhiteNoiseSpec.constant(Q=[[1.0]], R=[[1.0]])
    aux = sysmodel.AuxMeasurementModel.from_constant(
        Cbar=np.zeros((0, 1)), p=0, m=0)
    dec = sysmodel.decouple(sched, white.R(0.0), 0.0)
    auxp = elise.aux_projection_white(aux, white, dec, 0.0)
    Pstar = np.array([[np.sqrt(2.0) - 1.0]])
    g = elise.compute_gains(dec, auxp, sched.A(0.0), sched.B(0.0),
                            sched.W(0.0), white.Q(0.0), Pstar)
    _, Pxdot = elise.filter_rhs(g, dec, np.zeros(1), np.zeros(0),
                                np.zeros(1), np.zeros(0), np.zeros(0))
    assert abs(Pxdot[0, 0]) < 1e-9


def test_helicopter_stationary_covariance_is_fixed_point():
    scen = scenarios.helicopter(filter_kind="elise", with_controller=False)
    Pstar = scenarios.stationary_covariance(scen.sched, 0.0,
                                            white=scen.white, aux=scen.aux)
    filt = elise.EliseFilter(scen.sched, scen.white, scen.aux)
    dec, auxp, g = filt._stage(0.0, Pstar)
    _, Pxdot = elise.filter_rhs(g, dec, np.zeros(4), np.zeros(1),
                                np.zeros(dec.C2.shape[0]), np.zeros(1),
                                np.zeros(1))
    assert np.linalg.norm(Pxdot) < 1e-9


# ---------------------------------------------------------------------------
# full filter runs

def test_noise_free_state_tracking(lti_plant, lti_aux, lti_white):
    traj = sysmodel.simulate_plant(
        lti_plant, np.array([0.5, -0.3]), 0.0, 3.0, 1e-3,
        np.random.default_rng(0), white=lti_white, aux=lti_aux,
        d_fn=lambda t: np.array([0.2, -0.1]), noise_scale=0.0)
    filt = elise.EliseFilter(lti_plant, lti_white, lti_aux)
    run = filt.run(0.0, 3.0, 1e-3, np.zeros(2), 0.1 * np.eye(2),
                   elise.zoh_signals(traj, lti_plant))
    err = np.linalg.norm(run.xhat - traj.x, axis=1)
    # slowest error mode decays at rate ~1, so expect roughly e^{-3}
    assert err[-1] < 0.01 * err[0]
    assert np.all(err[2000:] < err[:-2000])
    # the constant input is recovered once the state estimate settles
    assert np.allclose(run.dhat[-1], [0.2, -0.1], atol=2e-3)


def test_covariance_stays_psd(lti_plant, lti_aux, lti_white):
    traj = sysmodel.simulate_plant(
        lti_plant, np.zeros(2), 0.0, 1.0, 1e-3,
        np.random.default_rng(1), white=lti_white, aux=lti_aux)
    filt = elise.EliseFilter(lti_plant, lti_white, lti_aux)
    run = filt.run(0.0, 1.0, 1e-3, np.zeros(2), np.eye(2),
                   elise.zoh_signals(traj, lti_plant))
    for Px in run.Px[:: len(run.Px) // 20]:
        assert np.linalg.eigvalsh(Px).min() > -1e-10


def test_prepare_and_run_with_gains_match_online(lti_plant, lti_aux, lti_white):
    traj = sysmodel.simulate_plant(
        lti_plant, np.zeros(2), 0.0, 0.5, 1e-3,
        np.random.default_rng(4), white=lti_white, aux=lti_aux)
    sig = elise.zoh_signals(traj, lti_plant)
    filt = elise.EliseFilter(lti_plant, lti_white, lti_aux)
    online = filt.run(0.0, 0.5, 1e-3, np.zeros(2), 0.05 * np.eye(2), sig)
    gs = filt.prepare(0.0, 0.5, 1e-3, 0.05 * np.eye(2))
    offline = filt.run_with_gains(gs, np.zeros(2), sig)
    assert np.allclose(online.xhat[-1], offline.xhat[-1], atol=1e-10)
