import numpy as np
import pytest

from sise import analysis, elise, lincore, scenarios, sysmodel
from sise.errors import NoFiniteBound, NoStabilizingSolution


def helicopter_steady_pieces(t=0.0):
    scen = scenarios.helicopter(filter_kind="elise", with_controller=False)
    sched, white, aux = scen.sched, scen.white, scen.aux
    Pstar = scenarios.stationary_covariance(sched, t, white=white, aux=aux)
    dec = sysmodel.decouple(sched, white.R(t), t)
    auxp = elise.aux_projection_white(aux, white, dec, t)
    g = elise.compute_gains(dec, auxp, sched.A(t), sched.B(t), sched.W(t),
                            white.Q(t), Pstar)
    return scen, dec, auxp, g


# ---------------------------------------------------------------------------
# equivalent system / PBH

def test_equivalent_system_no_cross_correlation(rng):
    scen, dec, auxp, g = helicopter_steady_pieces()
    # helicopter has Rgrave = 0, so the equivalent system is the original
    Ae, Qe = analysis.equivalent_system(g, dec, auxp)
    assert np.allclose(Ae, g.Abar, atol=1e-12)
    assert np.allclose(Qe, g.Qbar, atol=1e-12)


def test_equivalent_system_absorbs_cross_term():
    # nonzero cross intensity: CARE of the decorrelated triple must equal
    # the correlated-noise CARE of the original one
    scen = scenarios.reentry(filter_kind="elise")
    sched, white, aux = scen.sched, scen.white, scen.aux
    t = 0.0
    dec = sysmodel.decouple(sched, white.R(t), t)
    auxp = elise.aux_projection_white(aux, white, dec, t)
    g = elise.compute_gains(dec, auxp, sched.A(t), sched.B(t), sched.W(t),
                            white.Q(t), 0.01 * np.eye(sched.n))
    S = -dec.G2 @ g.M2 @ auxp.Rgrave2.T
    assert np.linalg.norm(S) > 1e-6  # the cross term is actually active
    Ae, Qe = analysis.equivalent_system(g, dec, auxp)
    P1 = lincore.solve_care(Ae, dec.C2, Qe, dec.R2)
    P2 = lincore.solve_care(g.Abar, dec.C2, g.Qbar, dec.R2, S=S)
    assert np.allclose(P1, P2, atol=1e-9)


def test_pbh_hurwitz_trivially_passes():
    A = np.array([[-1.0, 0.3], [0.0, -0.4]])
    det, stab = analysis.pbh_tests(A, np.zeros((0, 2)), np.eye(2))
    assert det and stab


def test_pbh_unstable_unobserved_mode():
    A = np.diag([1.0, -1.0])
    C = np.array([[0.0, 1.0]])  # blind to the unstable mode
    det, stab = analysis.pbh_tests(A, C, np.eye(2))
    assert not det
    det2, _ = analysis.pbh_tests(A, np.eye(2), np.eye(2))
    assert det2


def test_pbh_unstable_undriven_mode_not_stabilizable():
    A = np.diag([1.0, -1.0])
    Qe = np.diag([0.0, 1.0])  # no noise enters the unstable mode
    _, stab = analysis.pbh_tests(A, np.eye(2), Qe)
    assert not stab


# ---------------------------------------------------------------------------
# strong observability

def test_strong_observability_helicopter():
    scen = scenarios.helicopter(filter_kind="elise", with_controller=False)
    t = 0.0
    assert analysis.strong_observability(
        scen.sched.A(t), scen.sched.G(t), scen.sched.C(t), scen.sched.H(t))


def test_strong_observability_fails_for_hidden_input():
    # input drives an unobserved state and never reaches the output
    A = np.diag([-1.0, -2.0])
    C = np.array([[1.0, 0.0]])
    G = np.array([[0.0], [1.0]])
    H = np.zeros((1, 1))
    assert not analysis.strong_observability(A, G, C, H)


def test_strong_observability_forms_agree(rng):
    agree = 0
    for k in range(100):
        n, p, l = 3, 1, 2
        A = rng.normal(size=(n, n))
        C = rng.normal(size=(l, n))
        G = rng.normal(size=(n, p))
        H = rng.normal(size=(l, p)) if k % 2 else np.zeros((l, p))
        dec = sysmodel.decouple_matrices(
            sysmodel.asvd.structured_svd(H), C, np.zeros((l, 0)), G, np.eye(l))
        full = analysis.strong_observability(A, G, C, H)
        red = analysis.strong_observability_reduced(A, G, C, H, dec)
        agree += full == red
    assert agree == 100


# ---------------------------------------------------------------------------
# Gramian bounds

def test_gramian_controllable_lti():
    A = np.array([[0.0, 1.0], [-1.0, -0.5]])
    B = np.array([[0.0], [1.0]])
    gb = analysis.gramian_bounds(lambda t: A, lambda t: B, 1.0,
                                 np.linspace(1.0, 3.0, 3))
    assert gb.uniform
    assert gb.alpha > 0 and gb.beta >= gb.alpha


def test_gramian_zero_input_not_uniform():
    A = -np.eye(2)
    gb = analysis.gramian_bounds(lambda t: A, lambda t: np.zeros((2, 1)),
                                 1.0, [1.0])
    assert not gb.uniform
    assert gb.alpha == 0.0 and gb.beta == 0.0


def test_gramian_duality_observability():
    # observability Gramian of (A, C) equals controllability Gramian of
    # the time-reversed adjoint pair (-A', C')
    A = np.array([[-0.3, 1.0], [0.0, -0.8]])
    C = np.array([[1.0, 0.0]])
    go = analysis.gramian_bounds(lambda t: -A.T, lambda t: C.T, 0.7, [1.0])
    # direct quadrature oracle
    import scipy.linalg as sla
    hs = np.linspace(0.0, 0.7, 2001)
    W = np.zeros((2, 2))
    for a, b in zip(hs[:-1], hs[1:]):
        m = 0.5 * (a + b)
        Phi = sla.expm(-A * m)
        W += (b - a) * Phi.T @ C.T @ C @ Phi
    ev = np.linalg.eigvalsh(W)
    assert abs(go.min_eigs[0] - ev[0]) < 1e-4
    assert abs(go.max_eigs[0] - ev[-1]) < 1e-4


# ---------------------------------------------------------------------------
# bias bounds

def test_bias_bounds_scalar():
    # Acheck = -a: S = 1/(2a), gamma = a
    a = 1.7
    g = type("G", (), {})()
    g.Abar = np.array([[-a]])
    g.L = np.zeros((1, 0))

    class Dec:
        C2 = np.zeros((0, 1))
        svd = sysmodel.asvd.structured_svd(np.zeros((1, 0)))

    class G2:
        pass

    dec = Dec()
    dec.C1 = np.zeros((0, 1))
    dec.G1 = np.zeros((1, 0))
    g.M1 = np.zeros((0, 0))
    g.M2 = np.zeros((0, 0))
    g.CAhat = np.zeros((0, 1))
    bb = analysis.bias_bounds(g, dec, np.array([2.0]))
    assert abs(bb.S[0, 0] - 1.0 / (2 * a)) < 1e-12
    assert abs(bb.gamma - a) < 1e-12
    assert abs(bb.beta - 2.0) < 1e-12


def test_bias_bounds_isotropic():
    g = type("G", (), {})()
    g.Abar = -np.eye(3)
    g.L = np.zeros((3, 0))
    g.M1 = np.zeros((0, 0))
    g.M2 = np.zeros((0, 0))
    g.CAhat = np.zeros((0, 3))

    class Dec:
        C2 = np.zeros((0, 3))
        C1 = np.zeros((0, 3))
        G1 = np.zeros((3, 0))
        svd = sysmodel.asvd.structured_svd(np.zeros((3, 0)))

    b0 = np.array([1.0, -2.0, 2.0])
    bb = analysis.bias_bounds(g, Dec(), b0)
    assert abs(bb.gamma - 1.0) < 1e-12
    assert abs(bb.beta - np.linalg.norm(b0)) < 1e-12


def test_bias_bounds_unstable_raises():
    g = type("G", (), {})()
    g.Abar = np.array([[0.5]])
    g.L = np.zeros((1, 0))

    class Dec:
        C2 = np.zeros((0, 1))

    with pytest.raises(NoFiniteBound):
        analysis.bias_bounds(g, Dec(), np.array([1.0]))


def test_helicopter_bias_envelope_positive():
    scen, dec, auxp, g = helicopter_steady_pieces()
    bb = analysis.bias_bounds(g, dec, np.ones(4))
    assert bb.gamma > 0
    assert bb.beta >= np.linalg.norm(np.ones(4)) / np.sqrt(
        np.linalg.cond(bb.S))
    assert bb.alpha1 > 0


# ---------------------------------------------------------------------------
# consistency metrics

def test_nees_zero_errors():
    errors = np.zeros((10, 5, 2))
    Px = np.tile(np.eye(2), (5, 1, 1))
    rep = analysis.consistency_metrics(errors, Px)
    assert np.allclose(rep.nees_mean, 0.0)
    assert np.allclose(rep.rmse_state, 0.0)


def test_nees_synthetic_gaussian_in_band(rng):
    trials, T, n = 400, 30, 3
    Px = np.tile(np.diag([1.0, 0.5, 2.0]), (T, 1, 1))
    errors = rng.normal(size=(trials, T, n)) * np.sqrt(
        np.array([1.0, 0.5, 2.0]))
    rep = analysis.consistency_metrics(errors, Px)
    lo, hi = rep.nees_band
    assert lo < n < hi
    # each of the 30 time points lands in the 95% band independently, so
    # allow a few excursions
    assert rep.nees_fraction_in_band >= 0.8


def test_nees_overconfident_filter_out_of_band(rng):
    trials, T, n = 400, 20, 2
    Px = np.tile(0.25 * np.eye(2), (T, 1, 1))  # claims 4x less variance
    errors = rng.normal(size=(trials, T, n))
    rep = analysis.consistency_metrics(errors, Px)
    assert rep.nees_fraction_in_band < 0.1


# ---------------------------------------------------------------------------
# steady-state covariance

def test_steady_state_covariance_scalar_kalman():
    def builder(P):
        return (np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]),
                np.array([[1.0]]), np.zeros((1, 1)))

    P = analysis.steady_state_covariance(builder, np.zeros((1, 1)))
    assert abs(P[0, 0] - (np.sqrt(2.0) - 1.0)) < 1e-10


def test_steady_state_covariance_undetectable_raises():
    def builder(P):
        return (np.array([[1.0]]), np.zeros((0, 1)), np.array([[1.0]]),
                np.zeros((0, 0)), np.zeros((1, 0)))

    with pytest.raises(NoStabilizingSolution):
        analysis.steady_state_covariance(builder, np.zeros((1, 1)))
