"""Shared numerical oracles for the test suite.

The finite-difference helpers perturb on-manifold where the state is a
rotation and compare against analytic Jacobians; the truncated-series
exponential is an independent oracle for the closed-form Rodrigues map.
"""

import numpy as np

from vifusion.so3 import boxplus, exp_so3, log_so3


def series_exp(xi, terms=30):
    """Matrix exponential of hat(xi) by truncated power series."""
    from vifusion.so3 import hat
    w = hat(np.asarray(xi, dtype=float))
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms + 1):
        term = term @ w / k
        out = out + term
    return out


def random_rotation(rng, max_angle=np.pi - 0.2):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return exp_so3(axis * angle)


def random_state(rng, max_angle=2.0):
    from vifusion.state import ImuState
    return ImuState(random_rotation(rng, max_angle),
                    rng.normal(scale=2.0, size=3),
                    rng.normal(scale=1.0, size=3),
                    rng.normal(scale=0.1, size=3),
                    rng.normal(scale=0.05, size=3))


def random_sample(rng, t=0.0, dt=0.005):
    from vifusion.state import ImuSample
    return ImuSample(t, rng.normal(scale=3.0, size=3),
                     rng.normal(scale=1.0, size=3), dt)


def central_diff(f, x, h=1e-6):
    """Plain central finite differences of a vector map at x."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    jac = np.zeros((f0.size, x.size))
    for j in range(x.size):
        d = np.zeros_like(x)
        d[j] = h
        jac[:, j] = (np.asarray(f(x + d)) - np.asarray(f(x - d))) / (2.0 * h)
    return jac


def state_tangent_diff(f, state, dim, h=1e-6):
    """Central differences of f(state) under on-manifold state perturbations.

    f maps an ImuState to a plain vector; input perturbations go through
    ImuState.retract so the rotation is perturbed on the right.
    """
    f0 = np.asarray(f(state))
    jac = np.zeros((f0.size, dim))
    for j in range(dim):
        d = np.zeros(dim)
        d[j] = h
        fp = np.asarray(f(state.retract(d)))
        fm = np.asarray(f(state.retract(-d)))
        jac[:, j] = (fp - fm) / (2.0 * h)
    return jac


def rotation_tangent_diff(f, r, h=1e-6):
    """Central differences of f(R) under right perturbations of R."""
    f0 = np.asarray(f(r))
    jac = np.zeros((f0.size, 3))
    for j in range(3):
        d = np.zeros(3)
        d[j] = h
        jac[:, j] = (np.asarray(f(boxplus(r, d)))
                     - np.asarray(f(boxplus(r, -d)))) / (2.0 * h)
    return jac


def rel_error(analytic, numeric):
    """Max absolute difference scaled by the magnitude of the analytic part."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(1.0, np.max(np.abs(analytic)))
    return np.max(np.abs(analytic - numeric)) / scale
