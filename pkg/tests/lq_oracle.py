"""Kalman filter and finite-horizon LQR references for linear-quadratic windows.

Written directly from the textbook recursions, independent of the package's
window builder, so they can serve as test oracles.
"""

import numpy as np

from simul_ecmpc.costs import QuadraticWeights
from simul_ecmpc.dynamics import BoxSet, linear_model
from simul_ecmpc.ecmpc import EcmpcConfig
from simul_ecmpc.nlp import SolveOptions

A = np.array([[1.0, 0.1], [-0.2, 0.95]])
B = np.array([[0.0], [0.1]])
C = np.array([[1.0, 0.5]])
WEIGHTS = QuadraticWeights(Qe=np.diag([4.0, 2.0]), Re=10.0, Qc=np.diag([3.0, 1.0]), Rc=0.5,
                           Sc=np.diag([6.0, 2.0]))
P0 = np.diag([2.0, 1.0])


def model():
    return linear_model(A, B, C)


def config(N_e=8, N_c=5, phi=0.5):
    tight = SolveOptions(max_iterations=200, gradient_tol=1e-13, step_tol=1e-14, function_tol=0.0,
                         raise_on_failure=True)
    return EcmpcConfig(N_e=N_e, N_c=N_c, phi=phi, weights=WEIGHTS, X=BoxSet.unbounded(2),
                       U=BoxSet.unbounded(1), W=BoxSet.unbounded(2), V=BoxSet.unbounded(1),
                       arrival_P0=P0, arrival_strategy="fixed", solver=tight)


class Kalman:
    """Filter with process covariance ``Qe^-1`` and measurement covariance ``Re^-1``."""

    def __init__(self, prior):
        self.m = np.asarray(prior, dtype=float)
        self.P = P0.copy()
        self.Q = np.linalg.inv(WEIGHTS.Qe)
        self.R = np.linalg.inv(np.atleast_2d(WEIGHTS.Re))

    def update(self, y):
        S = C @ self.P @ C.T + self.R
        K = self.P @ C.T @ np.linalg.inv(S)
        self.m = self.m + K @ (np.atleast_1d(y) - C @ self.m)
        self.P = (np.eye(2) - K @ C) @ self.P
        return self.m.copy(), self.P.copy()

    def predict(self, u):
        self.m = A @ self.m + B @ np.atleast_1d(u)
        self.P = A @ self.P @ A.T + self.Q


def lqr(N_c):
    """First feedback gain and value matrix of the ``N_c``-step problem with terminal weight Sc."""
    Qc, Rc = WEIGHTS.Qc, np.atleast_2d(WEIGHTS.Rc)
    P = WEIGHTS.Sc.copy()
    K = None
    for _ in range(N_c):
        K = np.linalg.solve(Rc + B.T @ P @ B, B.T @ P @ A)
        P = Qc + A.T @ P @ (A - B @ K)
    return K, P


def coupled_estimate(m, Pi, V, phi):
    """Minimizer of ``phi (x-m)' Pi^-1 (x-m) + (1-phi) x' V x``."""
    Ii = np.linalg.inv(Pi)
    return np.linalg.solve(phi * Ii + (1 - phi) * V, phi * Ii @ m)
