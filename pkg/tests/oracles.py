"""Independent reference implementations used by the tests.

Nothing here imports the code paths it checks; each oracle rebuilds its
answer from first principles with plain loops or dense matrices.
"""
import math

import numpy as np


def central_difference_jacobian(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.zeros((f0.size, x.size))
    for m in range(x.size):
        step = np.zeros_like(x)
        step[m] = h
        J[:, m] = (np.asarray(f(x + step)) - np.asarray(f(x - step))) / (2 * h)
    return J


def relative_error(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def truncated_gaussian_kernel(x, xp, sigma, r):
    """Closed form of the order-``r`` Taylor kernel (partial exponential sum)."""
    t = float(np.dot(x, xp)) / sigma**2
    series = sum(t**n / math.factorial(n) for n in range(r + 1))
    return math.exp(-(np.dot(x, x) + np.dot(xp, xp)) / (2 * sigma**2)) * series


class DenseJointKalman:
    """Extended Kalman filter on the super-augmented vector ``[s; Omega]``.

    Weights use the canonical order (``A`` row-major, then ``B``). The
    state transition is supplied as callables so the oracle owns nothing
    but the generic Kalman algebra.
    """

    def __init__(self, s, omega, P, sigma_s, sigma_y, sigma_omega, meas_idx):
        self.s = np.array(s, dtype=float)
        self.omega = np.array(omega, dtype=float)
        self.P = np.array(P, dtype=float)
        self.sigma_s = sigma_s
        self.sigma_y = sigma_y
        self.sigma_omega = sigma_omega
        self.idx = np.asarray(meas_idx)

    def step(self, transition, jac_s, jac_omega, d):
        n_s = self.s.size
        n_o = self.omega.size
        F = np.zeros((n_s + n_o, n_s + n_o))
        F[:n_s, :n_s] = jac_s(self.s, self.omega)
        F[:n_s, n_s:] = jac_omega(self.s, self.omega)
        F[n_s:, n_s:] = np.eye(n_o)
        Q = np.diag(np.r_[np.full(n_s, self.sigma_s**2), np.full(n_o, self.sigma_omega**2)])
        s_prior = transition(self.s, self.omega)
        P_prior = F @ self.P @ F.T + Q

        H = np.zeros((self.idx.size, n_s + n_o))
        for row, col in enumerate(self.idx):
            H[row, col] = 1.0
        S = H @ P_prior @ H.T + self.sigma_y**2 * np.eye(self.idx.size)
        K = P_prior @ H.T @ np.linalg.inv(S)
        x_prior = np.r_[s_prior, self.omega]
        x_post = x_prior + K @ (np.asarray(d) - H @ x_prior)
        self.P = (np.eye(n_s + n_o) - K @ H) @ P_prior
        self.s = x_post[:n_s]
        self.omega = x_post[n_s:]
        return s_prior, x_post


def dmd_linear_trajectory(diag, x0, steps):
    return np.array([[d**k * x for d, x in zip(diag, x0)] for k in range(steps)]).T
