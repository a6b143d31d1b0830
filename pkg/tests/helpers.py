"""Shared oracles for the test suite."""

import numpy as np


def fd_grad(f, theta, h=None):
    """Central finite differences with step ``1e-6 (1 + |theta_i|)``."""
    theta = np.asarray(theta, dtype=float)
    if h is None:
        h = 1e-6 * (1.0 + np.abs(theta))
    h = np.broadcast_to(h, theta.shape)
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h[i]
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h[i])
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))
