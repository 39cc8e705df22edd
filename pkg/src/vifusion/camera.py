"""Pinhole camera model and inverse-depth landmark parameterization.

A landmark is stored as the camera position where it was first seen (the
anchor, world frame), azimuth/elevation of the world-frame ray from that
anchor, and the inverse of the distance along the ray. Conversion to and
from Euclidean coordinates and the pinhole projection with its Jacobian
live here; everything is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BehindCameraError(ValueError):
    """Point has non-positive depth; the observation must be dropped."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def in_bounds(self, uv: np.ndarray) -> bool:
        u, v = uv
        return 0.0 <= u < self.width and 0.0 <= v < self.height


@dataclass(frozen=True)
class Extrinsics:
    """Camera pose in the IMU body frame: x_B = r_bc @ x_C + p_bc."""
    r_bc: np.ndarray
    p_bc: np.ndarray


@dataclass
class InverseDepthLandmark:
    """Anchor position (m, world), ray angles (rad), inverse depth (1/m)."""
    anchor: np.ndarray
    theta: float
    phi: float
    rho: float

    def copy(self) -> "InverseDepthLandmark":
        return InverseDepthLandmark(self.anchor.copy(), self.theta, self.phi,
                                    self.rho)

    def as_vector(self) -> np.ndarray:
        return np.array([self.anchor[0], self.anchor[1], self.anchor[2],
                         self.theta, self.phi, self.rho])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "InverseDepthLandmark":
        return cls(np.array(v[:3], dtype=float), float(v[3]), float(v[4]),
                   float(v[5]))


def project(f_c: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixels."""
    x, y, z = f_c
    if z <= 0.0:
        raise BehindCameraError(f"projection with depth z={z}")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def projection_jacobian(f_c: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """2x3 derivative of project with respect to the camera-frame point."""
    x, y, z = f_c
    if z <= 0.0:
        raise BehindCameraError(f"projection jacobian with depth z={z}")
    iz = 1.0 / z
    return np.array([[intr.fx * iz, 0.0, -intr.fx * x * iz * iz],
                     [0.0, intr.fy * iz, -intr.fy * y * iz * iz]])


def ray_direction(theta: float, phi: float) -> np.ndarray:
    """Unit ray for azimuth theta and elevation phi.

    theta = phi = 0 points along +z; theta rotates toward +x, positive phi
    dips toward -y.
    """
    cp = np.cos(phi)
    return np.array([cp * np.sin(theta), -np.sin(phi), cp * np.cos(theta)])


def ray_direction_jacobian(theta: float, phi: float) -> np.ndarray:
    """3x2 derivative of ray_direction with respect to (theta, phi)."""
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    return np.array([[cp * ct, -sp * st],
                     [0.0, -cp],
                     [-cp * st, -sp * ct]])


def angles_from_ray(tau: np.ndarray) -> tuple[float, float]:
    """Azimuth/elevation of a (not necessarily unit) ray.

    At the pole x = z = 0 the azimuth is indeterminate and fixed to 0.
    """
    x, y, z = tau
    hyp = np.hypot(x, z)
    if hyp == 0.0 and y == 0.0:
        raise ValueError("angles_from_ray: zero ray")
    theta = 0.0 if hyp == 0.0 else np.arctan2(x, z)
    phi = np.arctan2(-y, hyp)
    return float(theta), float(phi)


def inverse_depth_to_xyz(lm: InverseDepthLandmark) -> np.ndarray:
    """Euclidean world position: anchor + ray / rho."""
    if lm.rho == 0.0:
        raise ValueError("inverse_depth_to_xyz: zero inverse depth")
    return lm.anchor + ray_direction(lm.theta, lm.phi) / lm.rho
