"""Deterministic synthetic worlds: analytic trajectories, IMU synthesis,
landmark fields, pinhole feature tracks with labeled corruption, and the
dataset CSV layout.

IMU samples are generated by inverting the discrete propagation model, so
with zero corruption the filter's prediction reproduces the analytic
trajectory exactly in rotation and velocity; the position picks up only the
left-rectangle quadrature remainder of the model itself, which cancels over
whole trajectory periods.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Extrinsics, Intrinsics
from .so3 import exp_so3, log_so3
from .state import ImuSample


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "circle"               # circle | lissajous | figure-eight |
                                       # stationary
    center: tuple = (0.0, 0.0, 1.0)
    radius: float = 2.0                # circle radius, m
    amplitudes: tuple = (1.5, 1.0, 0.3)        # lissajous / figure-eight, m
    frequencies: tuple = (0.4, 0.5, 0.3)       # lissajous angular freqs
    period: float = 10.0               # circle / figure-eight loop, s
    yaw_policy: str = "tangent"        # tangent | fixed
    duration: float = 120.0
    imu_rate: float = 200.0
    frame_rate: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.imu_rate <= 0 or self.frame_rate <= 0:
            raise ValueError("rates must be positive")
        ratio = self.imu_rate / self.frame_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("imu_rate must be an integer multiple of "
                             "frame_rate")
        if self.kind not in ("circle", "lissajous", "figure-eight",
                             "stationary"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.yaw_policy not in ("tangent", "fixed"):
            raise ValueError(f"unknown yaw policy {self.yaw_policy!r}")


@dataclass(frozen=True)
class WorldSpec:
    landmark_count: int = 200
    distribution: str = "cylinder"     # cylinder (shell) | box
    cylinder_radius: float = 6.0
    z_range: tuple = (-1.0, 3.0)
    box_center: tuple = (0.0, 0.0, 1.0)
    box_extents: tuple = (12.0, 12.0, 4.0)
    gravity: tuple = (0.0, 0.0, -9.81)

    def __post_init__(self):
        if self.distribution not in ("cylinder", "box"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.cylinder_radius <= 0 or any(e <= 0 for e in self.box_extents):
            raise ValueError("extents must be positive")


@dataclass(frozen=True)
class CorruptionSpec:
    """Sensor corruption; defaults are MEMS-grade noise densities."""
    accel_psd: float = 2e-3            # white-noise density, (m/s^2)/sqrt(Hz)
    gyro_psd: float = 1.7e-4           # (rad/s)/sqrt(Hz)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    pixel_sigma: float = 1.0
    outlier_prob: float = 0.0
    outlier_range_px: float | None = None      # None: uniform in bounds
    dropout_prob: float = 0.0

    @classmethod
    def clean(cls) -> "CorruptionSpec":
        return cls(accel_psd=0.0, gyro_psd=0.0, pixel_sigma=0.0)

    def __post_init__(self):
        for p in (self.outlier_prob, self.dropout_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must be within [0, 1]")


@dataclass
class SyntheticDataset:
    imu_t: np.ndarray                  # (n,) sample times, s
    gyro: np.ndarray                   # (n, 3) measured rates
    accel: np.ndarray                  # (n, 3) measured specific force
    imu_dt: float
    gt_r: np.ndarray                   # (n+1, 3, 3) true attitude at k*dt
    gt_p: np.ndarray                   # (n+1, 3)
    gt_v: np.ndarray                   # (n+1, 3)
    gt_bg: np.ndarray                  # (3,) constant true biases
    gt_ba: np.ndarray
    frame_t: np.ndarray                # (f,)
    frame_ids: np.ndarray              # (f,)
    obs_frame: np.ndarray              # (m,) frame id per observation
    obs_lm: np.ndarray                 # (m,) landmark id
    obs_uv: np.ndarray                 # (m, 2)
    obs_outlier: np.ndarray            # (m,) bool
    world_ids: np.ndarray              # (l,)
    world_xyz: np.ndarray              # (l, 3)
    gravity: np.ndarray = field(default_factory=lambda: np.array(
        [0.0, 0.0, -9.81]))

    def imu_samples(self) -> list[ImuSample]:
        return [ImuSample(float(t), self.accel[k].copy(),
                          self.gyro[k].copy(), self.imu_dt)
                for k, t in enumerate(self.imu_t)]

    def frame_observations(self, frame_id: int):
        mask = self.obs_frame == frame_id
        return (self.obs_lm[mask], self.obs_uv[mask],
                self.obs_outlier[mask])

    def gt_state_at(self, t: float):
        k = int(round(t / self.imu_dt))
        k = min(max(k, 0), self.gt_p.shape[0] - 1)
        return self.gt_r[k], self.gt_p[k], self.gt_v[k]


# ---------------------------------------------------------------------------
# analytic trajectories


def _position_derivatives(spec: TrajectorySpec, t: np.ndarray):
    """Closed-form p, v, a at times t (arrays shaped (..., 3))."""
    t = np.asarray(t, dtype=float)
    c = np.array(spec.center)
    zeros = np.zeros(t.shape + (3,))
    if spec.kind == "stationary":
        p = zeros + c
        return p, zeros.copy(), zeros.copy()
    if spec.kind == "circle":
        om = 2.0 * np.pi / spec.period
        r = spec.radius
        cos, sin = np.cos(om * t), np.sin(om * t)
        p = np.stack([r * cos, r * sin, np.zeros_like(t)], axis=-1) + c
        v = np.stack([-r * om * sin, r * om * cos, np.zeros_like(t)],
                     axis=-1)
        a = np.stack([-r * om * om * cos, -r * om * om * sin,
                      np.zeros_like(t)], axis=-1)
        return p, v, a
    if spec.kind == "figure-eight":
        om = 2.0 * np.pi / spec.period
        ax, ay = spec.amplitudes[0], spec.amplitudes[1]
        p = np.stack([ax * np.sin(om * t),
                      0.5 * ay * np.sin(2.0 * om * t),
                      np.zeros_like(t)], axis=-1) + c
        v = np.stack([ax * om * np.cos(om * t),
                      ay * om * np.cos(2.0 * om * t),
                      np.zeros_like(t)], axis=-1)
        a = np.stack([-ax * om * om * np.sin(om * t),
                      -2.0 * ay * om * om * np.sin(2.0 * om * t),
                      np.zeros_like(t)], axis=-1)
        return p, v, a
    # lissajous
    amp = np.array(spec.amplitudes)
    frq = np.array(spec.frequencies)
    phase = np.array([0.0, np.pi / 2.0, 0.0])
    arg = np.multiply.outer(t, frq) + phase
    p = amp * np.sin(arg) + c
    v = amp * frq * np.cos(arg)
    a = -amp * frq * frq * np.sin(arg)
    return p, v, a


def analytic_pose(spec: TrajectorySpec, t: float):
    """Ground-truth pose and kinematics at one instant.

    Returns (R body->world, p, v, a_world, omega_body)."""
    p, v, a = _position_derivatives(spec, np.asarray(float(t)))
    if spec.yaw_policy == "fixed" or spec.kind == "stationary":
        return np.eye(3), p, v, a, np.zeros(3)
    planar = v[0] ** 2 + v[1] ** 2
    if planar < 1e-12:
        return np.eye(3), p, v, a, np.zeros(3)
    yaw = np.arctan2(v[1], v[0])
    yaw_rate = (v[0] * a[1] - v[1] * a[0]) / planar
    cy, sy = np.cos(yaw), np.sin(yaw)
    r = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    return r, p, v, a, np.array([0.0, 0.0, yaw_rate])


def _pose_batch(spec: TrajectorySpec, t: np.ndarray):
    """Vectorized attitude/position/velocity at many times."""
    p, v, a = _position_derivatives(spec, t)
    n = t.shape[0]
    r = np.tile(np.eye(3), (n, 1, 1))
    if spec.yaw_policy == "tangent" and spec.kind != "stationary":
        planar = v[:, 0] ** 2 + v[:, 1] ** 2
        ok = planar >= 1e-12
        yaw = np.where(ok, np.arctan2(v[:, 1], v[:, 0]), 0.0)
        cy, sy = np.cos(yaw), np.sin(yaw)
        r[:, 0, 0] = cy
        r[:, 0, 1] = -sy
        r[:, 1, 0] = sy
        r[:, 1, 1] = cy
    return r, p, v


# ---------------------------------------------------------------------------
# sensor synthesis


def synthesize_imu(spec: TrajectorySpec, corruption: CorruptionSpec,
                   gravity: np.ndarray, rng: np.random.Generator):
    """Measured rates and specific forces on the IMU grid.

    The noise-free measurements invert the discrete propagation: rotation
    increments come from relative attitudes, specific force from velocity
    differences, so zero-corruption streams re-integrate exactly up to the
    position quadrature of the model.
    """
    dt = 1.0 / spec.imu_rate
    n = int(round(spec.duration * spec.imu_rate))
    t_states = np.arange(n + 1) * dt
    r_all, p_all, v_all = _pose_batch(spec, t_states)

    gyro = np.zeros((n, 3))
    accel = np.zeros((n, 3))
    rel = np.einsum("kji,kjl->kil", r_all[:-1], r_all[1:])   # R_k^T R_{k+1}
    for k in range(n):
        gyro[k] = log_so3(rel[k]) / dt
    dv = (v_all[1:] - v_all[:-1]) / dt - gravity
    accel = np.einsum("kji,kj->ki", r_all[:-1], dv)

    bg = np.array(corruption.gyro_bias)
    ba = np.array(corruption.accel_bias)
    gyro += bg
    accel += ba
    if corruption.gyro_psd > 0.0:
        gyro += rng.normal(scale=corruption.gyro_psd / np.sqrt(dt),
                           size=(n, 3))
    if corruption.accel_psd > 0.0:
        accel += rng.normal(scale=corruption.accel_psd / np.sqrt(dt),
                            size=(n, 3))
    return (t_states[:-1], gyro, accel, dt, r_all, p_all, v_all, bg, ba)


def make_world(world: WorldSpec, rng: np.random.Generator):
    """Landmark ids and world positions for the configured distribution."""
    n = world.landmark_count
    ids = np.arange(n)
    if world.distribution == "cylinder":
        angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
        z = rng.uniform(world.z_range[0], world.z_range[1], size=n)
        xyz = np.stack([world.cylinder_radius * np.cos(angle),
                        world.cylinder_radius * np.sin(angle), z], axis=1)
    else:
        center = np.array(world.box_center)
        ext = np.array(world.box_extents)
        xyz = center + rng.uniform(-0.5, 0.5, size=(n, 3)) * ext
    return ids, xyz


def synthesize_frames(spec: TrajectorySpec, world_xyz: np.ndarray,
                      corruption: CorruptionSpec, intr: Intrinsics,
                      ex: Extrinsics, rng: np.random.Generator):
    """Per-frame labeled feature observations through the true poses.

    Pixel noise is clipped at six sigmas so labeled inliers never stray
    further than that from the exact projection; outliers are resampled
    pixels, labeled, and dropout removes the association entirely.
    """
    stride = int(round(spec.imu_rate / spec.frame_rate))
    dt = 1.0 / spec.imu_rate
    n_frames = int(round(spec.duration * spec.frame_rate))
    frame_ids = np.arange(n_frames)
    frame_t = frame_ids * stride * dt

    r_all, p_all, _ = _pose_batch(spec, frame_t)
    obs_frame, obs_lm, obs_uv, obs_flag = [], [], [], []
    for f in range(n_frames):
        r_wc = r_all[f] @ ex.r_bc
        cam = p_all[f] + r_all[f] @ ex.p_bc
        pts_c = (world_xyz - cam) @ r_wc
        visible = pts_c[:, 2] > 1e-6
        z = np.where(visible, pts_c[:, 2], 1.0)
        u = intr.fx * pts_c[:, 0] / z + intr.cx
        v = intr.fy * pts_c[:, 1] / z + intr.cy
        visible &= (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        idx = np.flatnonzero(visible)
        if idx.size == 0:
            continue
        if corruption.dropout_prob > 0.0:
            idx = idx[rng.random(idx.size) >= corruption.dropout_prob]
        if idx.size == 0:
            continue
        uv = np.stack([u[idx], v[idx]], axis=1)
        if corruption.pixel_sigma > 0.0:
            noise = rng.normal(scale=corruption.pixel_sigma,
                               size=uv.shape)
            lim = 6.0 * corruption.pixel_sigma
            uv = uv + np.clip(noise, -lim, lim)
            uv[:, 0] = np.clip(uv[:, 0], 0.0, intr.width - 1e-6)
            uv[:, 1] = np.clip(uv[:, 1], 0.0, intr.height - 1e-6)
        flags = np.zeros(idx.size, dtype=bool)
        if corruption.outlier_prob > 0.0:
            flags = rng.random(idx.size) < corruption.outlier_prob
            n_out = int(np.sum(flags))
            if n_out:
                if corruption.outlier_range_px is not None:
                    span = corruption.outlier_range_px
                    shift = rng.uniform(-span, span, size=(n_out, 2))
                    bad = uv[flags] + shift
                    bad[:, 0] = np.clip(bad[:, 0], 0.0, intr.width - 1e-6)
                    bad[:, 1] = np.clip(bad[:, 1], 0.0, intr.height - 1e-6)
                else:
                    bad = np.stack(
                        [rng.uniform(0.0, intr.width, size=n_out),
                         rng.uniform(0.0, intr.height, size=n_out)], axis=1)
                uv[flags] = bad
        obs_frame.append(np.full(idx.size, f))
        obs_lm.append(idx)
        obs_uv.append(uv)
        obs_flag.append(flags)

    if obs_frame:
        return (frame_t, frame_ids, np.concatenate(obs_frame),
                np.concatenate(obs_lm), np.vstack(obs_uv),
                np.concatenate(obs_flag))
    return (frame_t, frame_ids, np.zeros(0, dtype=int),
            np.zeros(0, dtype=int), np.zeros((0, 2)),
            np.zeros(0, dtype=bool))


def make_dataset(spec: TrajectorySpec, world: WorldSpec,
                 corruption: CorruptionSpec, intr: Intrinsics,
                 ex: Extrinsics) -> SyntheticDataset:
    """Full seeded dataset: world, IMU stream, frames, ground truth."""
    root = np.random.SeedSequence(spec.seed)
    rng_world, rng_imu, rng_frames = [np.random.default_rng(s)
                                      for s in root.spawn(3)]
    gravity = np.array(world.gravity)
    ids, xyz = make_world(world, rng_world)
    (imu_t, gyro, accel, dt, r_all, p_all, v_all, bg,
     ba) = synthesize_imu(spec, corruption, gravity, rng_imu)
    (frame_t, frame_ids, obs_frame, obs_lm, obs_uv,
     obs_flag) = synthesize_frames(spec, xyz, corruption, intr, ex,
                                   rng_frames)
    return SyntheticDataset(imu_t, gyro, accel, dt, r_all, p_all, v_all,
                            bg, ba, frame_t, frame_ids, obs_frame, obs_lm,
                            obs_uv, obs_flag, ids, xyz, gravity)


# ---------------------------------------------------------------------------
# quaternions (file format only; internal math stays matrix-valued)


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    t = np.trace(r)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s,
                          (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
        elif i == 1:
            s = np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
            q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                          0.25 * s, (r[1, 2] + r[2, 1]) / s])
        else:
            s = np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
            q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                          (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    q = q / np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    return q


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# dataset files

IMU_HEADER = ["timestamp_ns", "wx", "wy", "wz", "ax", "ay", "az"]
FRAMES_HEADER = ["timestamp_ns", "frame_id"]
OBS_HEADER = ["frame_id", "landmark_id", "u", "v", "outlier_flag"]
GT_HEADER = ["timestamp_ns", "px", "py", "pz", "qw", "qx", "qy", "qz",
             "vx", "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz"]
WORLD_HEADER = ["landmark_id", "x", "y", "z"]


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _ns(t: float) -> int:
    return int(round(t * 1e9))


def write_dataset(ds: SyntheticDataset, path) -> None:
    """EuRoC-style CSV directory layout; floats keep full precision."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "imu.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMU_HEADER)
        for k, t in enumerate(ds.imu_t):
            w.writerow([_ns(t)] + [_fmt(x) for x in ds.gyro[k]]
                       + [_fmt(x) for x in ds.accel[k]])
    with open(path / "frames.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FRAMES_HEADER)
        for t, fid in zip(ds.frame_t, ds.frame_ids):
            w.writerow([_ns(t), int(fid)])
    with open(path / "observations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OBS_HEADER)
        for k in range(ds.obs_frame.shape[0]):
            w.writerow([int(ds.obs_frame[k]), int(ds.obs_lm[k]),
                        _fmt(ds.obs_uv[k, 0]), _fmt(ds.obs_uv[k, 1]),
                        int(ds.obs_outlier[k])])
    dt = ds.imu_dt
    with open(path / "groundtruth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GT_HEADER)
        for k in range(ds.gt_p.shape[0]):
            q = rotation_to_quat(ds.gt_r[k])
            row = ([_ns(k * dt)] + [_fmt(x) for x in ds.gt_p[k]]
                   + [_fmt(x) for x in q] + [_fmt(x) for x in ds.gt_v[k]]
                   + [_fmt(x) for x in ds.gt_bg]
                   + [_fmt(x) for x in ds.gt_ba])
            w.writerow(row)
    with open(path / "world.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WORLD_HEADER)
        for lid, xyz in zip(ds.world_ids, ds.world_xyz):
            w.writerow([int(lid)] + [_fmt(x) for x in xyz])


def _read_rows(path, header):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        got = next(r)
        if got != header:
            raise ValueError(f"{path}: unexpected header {got!r}")
        return [row for row in r]


def read_dataset(path, gravity=(0.0, 0.0, -9.81)) -> SyntheticDataset:
    path = Path(path)
    imu_rows = _read_rows(path / "imu.csv", IMU_HEADER)
    imu_t = np.array([int(r[0]) for r in imu_rows], dtype=float) * 1e-9
    gyro = np.array([[float(x) for x in r[1:4]] for r in imu_rows])
    accel = np.array([[float(x) for x in r[4:7]] for r in imu_rows])
    dt = float(np.median(np.diff(imu_t))) if imu_t.size > 1 else 0.005

    frame_rows = _read_rows(path / "frames.csv", FRAMES_HEADER)
    frame_t = np.array([int(r[0]) for r in frame_rows], dtype=float) * 1e-9
    frame_ids = np.array([int(r[1]) for r in frame_rows])

    obs_rows = _read_rows(path / "observations.csv", OBS_HEADER)
    obs_frame = np.array([int(r[0]) for r in obs_rows], dtype=int)
    obs_lm = np.array([int(r[1]) for r in obs_rows], dtype=int)
    obs_uv = (np.array([[float(r[2]), float(r[3])] for r in obs_rows])
              if obs_rows else np.zeros((0, 2)))
    obs_flag = np.array([bool(int(r[4])) for r in obs_rows], dtype=bool)

    gt_rows = _read_rows(path / "groundtruth.csv", GT_HEADER)
    gt_p = np.array([[float(x) for x in r[1:4]] for r in gt_rows])
    gt_r = np.array([quat_to_rotation(np.array([float(x) for x in r[4:8]]))
                     for r in gt_rows])
    gt_v = np.array([[float(x) for x in r[8:11]] for r in gt_rows])
    gt_bg = np.array([float(x) for x in gt_rows[0][11:14]])
    gt_ba = np.array([float(x) for x in gt_rows[0][14:17]])

    world_rows = _read_rows(path / "world.csv", WORLD_HEADER)
    world_ids = np.array([int(r[0]) for r in world_rows])
    world_xyz = np.array([[float(x) for x in r[1:4]] for r in world_rows])

    return SyntheticDataset(imu_t, gyro, accel, dt, gt_r, gt_p, gt_v,
                            gt_bg, gt_ba, frame_t, frame_ids, obs_frame,
                            obs_lm, obs_uv, obs_flag, world_ids, world_xyz,
                            np.array(gravity))
