"""Shared state and measurement types for the filter and the optimizer.

The IMU state is (R, p, v, b_a, b_g) with R a rotation matrix whose tangent
coordinate xi = Log(R) is the quantity actually stored in state vectors.
The 15-dim error ordering everywhere is (dxi, dp, dv, db_a, db_g): rotation
errors compose on the right (R Exp(dxi)), everything else is additive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .so3 import boxminus, boxplus, log_so3

IMU_DIM = 15
LM_DIM = 6


@dataclass
class ImuState:
    r: np.ndarray                      # rotation body->world
    p: np.ndarray                      # position, m
    v: np.ndarray                      # velocity, m/s
    ba: np.ndarray                     # accelerometer bias, m/s^2
    bg: np.ndarray                     # gyroscope bias, rad/s

    @classmethod
    def identity(cls) -> "ImuState":
        return cls(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(3),
                   np.zeros(3))

    @property
    def xi(self) -> np.ndarray:
        """Tangent coordinate of the orientation, Log(R)."""
        return log_so3(self.r)

    def copy(self) -> "ImuState":
        return ImuState(self.r.copy(), self.p.copy(), self.v.copy(),
                        self.ba.copy(), self.bg.copy())

    def retract(self, delta: np.ndarray) -> "ImuState":
        """Apply a 15-dim error: rotation via boxplus, the rest additively."""
        return ImuState(boxplus(self.r, delta[0:3]),
                        self.p + delta[3:6],
                        self.v + delta[6:9],
                        self.ba + delta[9:12],
                        self.bg + delta[12:15])

    def local_delta(self, other: "ImuState") -> np.ndarray:
        """15-dim error d with other = self.retract(d)."""
        return np.concatenate([boxminus(other.r, self.r),
                               other.p - self.p,
                               other.v - self.v,
                               other.ba - self.ba,
                               other.bg - self.bg])


@dataclass(frozen=True)
class ImuSample:
    """One inertial measurement with the interval to the next sample."""
    t: float                           # timestamp, s
    accel: np.ndarray                  # measured specific force, m/s^2
    gyro: np.ndarray                   # measured angular rate, rad/s
    dt: float                          # seconds to the next sample

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("ImuSample.dt must be positive")


@dataclass(frozen=True)
class BiasPair:
    bg: np.ndarray
    ba: np.ndarray

    @classmethod
    def zero(cls) -> "BiasPair":
        return cls(np.zeros(3), np.zeros(3))


def _as_cov(value, name: str) -> np.ndarray:
    """Accept a scalar density/std or a full 3x3 covariance block."""
    m = np.asarray(value, dtype=float)
    if m.ndim == 0:
        m = float(m) ** 2 * np.eye(3)
    if m.shape != (3, 3):
        raise ValueError(f"{name} must be scalar or 3x3")
    if np.max(np.abs(m - m.T)) > 1e-12:
        raise ValueError(f"{name} must be symmetric")
    return m


@dataclass
class NoiseModel:
    """Sensor noise parameters shared by the filter and the optimizer.

    sigma_a / sigma_g are continuous-time white-noise PSD matrices (density
    squared); sigma_bad / sigma_bgd are discrete random-walk covariances per
    keyframe interval, zero by default so biases stay constant in the
    filter. Scalars passed to the constructor are taken as densities (or
    per-interval standard deviations for the bias blocks) and squared.
    """
    sigma_a: np.ndarray = 2e-3         # accel white noise PSD
    sigma_g: np.ndarray = 1.7e-4       # gyro white noise PSD
    sigma_bad: np.ndarray = 0.0        # accel bias walk per keyframe interval
    sigma_bgd: np.ndarray = 0.0        # gyro bias walk per keyframe interval
    pixel_sigma: float = 1.0           # feature noise at scale 1, pixels
    gravity: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.sigma_a = _as_cov(self.sigma_a, "sigma_a")
        self.sigma_g = _as_cov(self.sigma_g, "sigma_g")
        self.sigma_bad = _as_cov(self.sigma_bad, "sigma_bad")
        self.sigma_bgd = _as_cov(self.sigma_bgd, "sigma_bgd")
        self.gravity = np.asarray(self.gravity, dtype=float)

    def pixel_cov(self, scale: float = 1.0) -> np.ndarray:
        s = self.pixel_sigma * scale
        return s * s * np.eye(2)


@dataclass(frozen=True)
class FeatureObservation:
    """Pixel measurement of one landmark with its 2x2 covariance."""
    landmark_id: int
    pixel: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        w = np.linalg.eigvalsh(self.cov)
        if w[0] < 0.0:
            raise ValueError("FeatureObservation.cov must be PSD")
