"""Shared fixtures: small synthetic systems used across the test modules."""

import numpy as np
import pytest

from sise import sysmodel


def make_lti_plant():
    """Stable 2-state plant with one direct and one indirect input channel.

    H = [[1,0],[0,0]] so d1 is the first input (seen through the output)
    and d2 the second (only enters the dynamics).  The auxiliary
    measurement picks up the second state, which d2 drives directly.
    """
    A = np.array([[-1.0, 0.5], [0.0, -2.0]])
    B = np.zeros((2, 0))
    G = np.eye(2)
    C = np.eye(2)
    D = np.zeros((2, 0))
    H = np.array([[1.0, 0.0], [0.0, 0.0]])
    W = np.eye(2)
    sched = sysmodel.SystemSchedule.lti(A=A, B=B, G=G, C=C, D=D, H=H, W=W)
    return sched


def make_lti_aux():
    Cbar = np.array([[0.0, 1.0]])
    return sysmodel.AuxMeasurementModel.from_constant(Cbar, p=2, m=0)


def make_lti_white(r=1e-4, q=1e-4, rbar=None):
    R = r * np.eye(2)
    Q = q * np.eye(2)
    Rbar = np.array([[4.0 * r]]) if rbar is None else np.atleast_2d(rbar)
    Rgrave = np.zeros((2, 1))
    return sysmodel.WhiteNoiseSpec.constant(Q=Q, R=R, Rbar=Rbar, Rgrave=Rgrave)


@pytest.fixture(scope="session")
def lti_plant():
    return make_lti_plant()


@pytest.fixture(scope="session")
def lti_aux():
    return make_lti_aux()


@pytest.fixture(scope="session")
def lti_white():
    return make_lti_white()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260826)
