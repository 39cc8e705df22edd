"""SO(3) maps and perturbation calculus.

Rotations are plain 3x3 orthonormal numpy arrays. Tangent vectors are
3-vectors in radians (axis * angle). All functions are pure; nothing here
holds state.

Conventions:
  - exp_so3 / log_so3 are the matrix exponential / logarithm restricted to
    SO(3) (Rodrigues closed form).
  - boxplus applies a perturbation on the right: R (+) d = R Exp(d); this is
    a body-frame (local) perturbation.
  - right_jacobian J_r satisfies Exp(xi + d) ~ Exp(xi) Exp(J_r(xi) d) to
    first order in d.
"""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

# Below this angle the closed forms divide ~0 by ~0; switch to Taylor series.
SMALL_ANGLE = 1e-5


def hat(v: np.ndarray) -> np.ndarray:
    """Map a 3-vector to its skew-symmetric matrix, hat(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of hat. Rejects matrices that are not skew-symmetric to 1e-9."""
    if np.max(np.abs(m + m.T)) > 1e-9:
        raise ValueError("vee: input is not skew-symmetric")
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def exp_so3(xi: np.ndarray) -> np.ndarray:
    """Rodrigues formula; second-order Taylor fallback near zero angle."""
    xi = np.asarray(xi, dtype=float)
    angle = np.linalg.norm(xi)
    w = hat(xi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + w + 0.5 * (w @ w)
    s = np.sin(angle) / angle
    half_sin = np.sin(0.5 * angle)
    c = 2.0 * half_sin * half_sin / (angle * angle)
    return np.eye(3) + s * w + c * (w @ w)


def log_so3(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to tangent vector with norm <= pi.

    At angle pi the axis sign is ambiguous; the branch whose axis vector is
    lexicographically largest is returned, and the condition is reported on
    the module logger.
    """
    trace = np.trace(r)
    cos_angle = np.clip(0.5 * (trace - 1.0), -1.0, 1.0)
    angle = np.arccos(cos_angle)
    a = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if angle < SMALL_ANGLE:
        # a = sin(angle) * axis; correct the sin to first order
        return a * (1.0 + angle * angle / 6.0)
    if np.pi - angle < 1e-6:
        logger.debug("log_so3: angle within 1e-6 of pi, axis branch chosen "
                     "lexicographically")
        # R ~ I + 2 hat(axis)^2 at angle pi; recover axis from the diagonal
        axis2 = np.clip((np.diag(r) + 1.0) * 0.5, 0.0, None)
        axis = np.sqrt(axis2)
        # off-diagonal terms fix the relative signs: R[i,j] = 2 ai aj (i != j)
        k = int(np.argmax(axis))
        if axis[k] > 0.0:
            for i in range(3):
                if i != k and r[k, i] + r[i, k] < 0.0:
                    axis[i] = -axis[i]
        if tuple(axis) < tuple(-axis):
            axis = -axis
        return angle * axis
    return a * angle / np.sin(angle)


def right_jacobian(xi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): d Exp(xi + d) = Exp(xi) Exp(J_r(xi) d) + O(d^2)."""
    xi = np.asarray(xi, dtype=float)
    angle = np.linalg.norm(xi)
    w = hat(xi)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * w + (w @ w) / 6.0
    a2 = angle * angle
    half_sin = np.sin(0.5 * angle)
    c1 = 2.0 * half_sin * half_sin / a2
    c2 = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) - c1 * w + c2 * (w @ w)


def right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse of the right Jacobian (valid for ||xi|| < 2*pi)."""
    xi = np.asarray(xi, dtype=float)
    angle = np.linalg.norm(xi)
    w = hat(xi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * w + (w @ w) / 12.0
    half = 0.5 * angle
    c = (1.0 - half / np.tan(half)) / (angle * angle)
    return np.eye(3) + 0.5 * w + c * (w @ w)


def boxplus(r: np.ndarray, dxi: np.ndarray) -> np.ndarray:
    """Right perturbation: R Exp(dxi)."""
    return r @ exp_so3(dxi)


def boxminus(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Tangent-space difference d with r1 = r2 Exp(d); inverse of boxplus."""
    return log_so3(r2.T @ r1)


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    """Orthonormality and determinant check used by the invariant tests."""
    if r.shape != (3, 3):
        return False
    ortho = np.linalg.norm(r.T @ r - np.eye(3))
    return ortho < tol and abs(np.linalg.det(r) - 1.0) < tol
