import numpy as np
import pytest

from vifusion.camera import Extrinsics, Intrinsics
from vifusion.ekf import propagate_state
from vifusion.simulate import (CorruptionSpec, SyntheticDataset,
                               TrajectorySpec, WorldSpec, analytic_pose,
                               make_dataset, make_world, quat_to_rotation,
                               read_dataset, rotation_to_quat,
                               synthesize_imu, write_dataset, GT_HEADER,
                               IMU_HEADER, OBS_HEADER)
from vifusion.state import ImuSample, ImuState, NoiseModel

from helpers import random_rotation

K = Intrinsics(fx=320.0, fy=320.0, cx=320.0, cy=240.0, width=640, height=480)
# camera optical axis along body +x (forward), x right (-y body), y down
R_BC = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
EX = Extrinsics(R_BC, np.array([0.05, 0.0, 0.02]))
GRAVITY = np.array([0.0, 0.0, -9.81])
CLEAN = CorruptionSpec.clean()


def test_stationary_pose():
    spec = TrajectorySpec(kind="stationary", duration=5.0)
    r, p, v, a, om = analytic_pose(spec, 2.0)
    assert np.allclose(r, np.eye(3))
    assert np.allclose(p, spec.center)
    assert np.allclose(v, 0.0)
    assert np.allclose(a, 0.0)
    assert np.allclose(om, 0.0)


def test_circle_centripetal_acceleration():
    spec = TrajectorySpec(kind="circle", radius=2.0, period=10.0)
    om = 2.0 * np.pi / spec.period
    for t in (0.0, 1.3, 4.7):
        _, p, v, a, _ = analytic_pose(spec, t)
        assert np.isclose(np.linalg.norm(a), spec.radius * om * om)
        assert np.isclose(np.linalg.norm(v), spec.radius * om)


def test_velocity_matches_position_derivative():
    rng = np.random.default_rng(110)
    for kind in ("circle", "lissajous", "figure-eight"):
        spec = TrajectorySpec(kind=kind, duration=20.0)
        h = 1e-5
        for _ in range(20):
            t = rng.uniform(0.1, 19.9)
            _, p_plus, _, _, _ = analytic_pose(spec, t + h)
            _, p_minus, _, _, _ = analytic_pose(spec, t - h)
            _, _, v, a, _ = analytic_pose(spec, t)
            fd_v = (p_plus - p_minus) / (2.0 * h)
            assert np.allclose(fd_v, v, atol=1e-6)
            _, _, v_plus, _, _ = analytic_pose(spec, t + h)
            _, _, v_minus, _, _ = analytic_pose(spec, t - h)
            assert np.allclose((v_plus - v_minus) / (2.0 * h), a, atol=1e-6)


def test_stationary_specific_force_is_minus_gravity():
    spec = TrajectorySpec(kind="stationary", duration=1.0)
    rng = np.random.default_rng(111)
    t, gyro, accel, dt, *_ = synthesize_imu(spec, CLEAN, GRAVITY, rng)
    assert np.allclose(accel, -GRAVITY, atol=1e-12)
    assert np.allclose(gyro, 0.0, atol=1e-12)


def test_zero_corruption_round_trip_integration():
    # default circle spans whole loops in 10 s: the prediction-only filter
    # must track the analytic trajectory to under a millimeter
    spec = TrajectorySpec(kind="circle", duration=10.0)
    rng = np.random.default_rng(112)
    t, gyro, accel, dt, r_all, p_all, v_all, _, _ = synthesize_imu(
        spec, CLEAN, GRAVITY, rng)
    nm = NoiseModel(gravity=GRAVITY)
    x = ImuState(r_all[0].copy(), p_all[0].copy(), v_all[0].copy(),
                 np.zeros(3), np.zeros(3))
    for k in range(t.size):
        x = propagate_state(x, ImuSample(t[k], accel[k], gyro[k], dt), nm)
    assert np.linalg.norm(x.p - p_all[-1]) < 1e-3
    assert np.linalg.norm(x.v - v_all[-1]) < 1e-6
    assert np.max(np.abs(x.r - r_all[-1])) < 1e-6


def test_same_seed_bit_identical():
    spec = TrajectorySpec(duration=2.0, seed=7)
    world = WorldSpec(landmark_count=50)
    corr = CorruptionSpec(accel_psd=2e-3, gyro_psd=1.7e-4, pixel_sigma=1.0,
                          outlier_prob=0.1, dropout_prob=0.05)
    a = make_dataset(spec, world, corr, K, EX)
    b = make_dataset(spec, world, corr, K, EX)
    assert np.array_equal(a.gyro, b.gyro)
    assert np.array_equal(a.accel, b.accel)
    assert np.array_equal(a.obs_uv, b.obs_uv)
    assert np.array_equal(a.obs_outlier, b.obs_outlier)
    c = make_dataset(TrajectorySpec(duration=2.0, seed=8), world, corr, K, EX)
    assert not np.array_equal(a.gyro, c.gyro)


def test_frames_on_axis_and_visibility():
    # a landmark straight ahead of the first pose lands on the principal
    # point; one behind the camera never appears
    spec = TrajectorySpec(kind="stationary", duration=0.5, seed=1)
    r0, p0, *_ = analytic_pose(spec, 0.0)
    ahead = p0 + r0 @ (EX.r_bc @ np.array([0.0, 0.0, 4.0]) + EX.p_bc)
    behind = p0 + r0 @ (EX.r_bc @ np.array([0.0, 0.0, -4.0]) + EX.p_bc)
    world = WorldSpec(landmark_count=2)
    ds = make_dataset(spec, world, CLEAN, K, EX)
    ds.world_xyz = np.vstack([ahead, behind])
    from vifusion.simulate import synthesize_frames
    rng = np.random.default_rng(0)
    _, _, obs_frame, obs_lm, obs_uv, _ = synthesize_frames(
        spec, ds.world_xyz, CLEAN, K, EX, rng)
    assert set(obs_lm) == {0}
    assert np.allclose(obs_uv, [K.cx, K.cy], atol=1e-9)


def test_outlier_fraction_calibrated():
    spec = TrajectorySpec(duration=30.0, seed=3)
    world = WorldSpec(landmark_count=120)
    corr = CorruptionSpec(pixel_sigma=1.0, outlier_prob=0.2)
    ds = make_dataset(spec, world, corr, K, EX)
    assert ds.obs_frame.size > 10000
    frac = np.mean(ds.obs_outlier)
    assert abs(frac - 0.2) < 0.02


def test_inlier_labels_faithful():
    spec = TrajectorySpec(duration=10.0, seed=4)
    world = WorldSpec(landmark_count=100)
    sigma = 1.5
    corr = CorruptionSpec(pixel_sigma=sigma, outlier_prob=0.15)
    ds = make_dataset(spec, world, corr, K, EX)
    stride = int(round(spec.imu_rate / spec.frame_rate))
    for k in range(ds.obs_frame.shape[0]):
        if ds.obs_outlier[k]:
            continue
        f = ds.obs_frame[k]
        r = ds.gt_r[f * stride]
        p = ds.gt_p[f * stride]
        point = ds.world_xyz[ds.obs_lm[k]]
        pt_c = EX.r_bc.T @ (r.T @ (point - p) - EX.p_bc)
        true_uv = np.array([K.fx * pt_c[0] / pt_c[2] + K.cx,
                            K.fy * pt_c[1] / pt_c[2] + K.cy])
        err = np.linalg.norm(ds.obs_uv[k] - true_uv)
        assert err <= 6.0 * sigma * np.sqrt(2.0) + 1e-9


def test_dropout_removes_associations():
    spec = TrajectorySpec(duration=5.0, seed=5)
    world = WorldSpec(landmark_count=100)
    full = make_dataset(spec, world, CLEAN, K, EX)
    dropped = make_dataset(spec, world, CorruptionSpec(dropout_prob=0.3),
                           K, EX)
    assert dropped.obs_frame.size < full.obs_frame.size * 0.8


def test_quaternion_round_trip():
    rng = np.random.default_rng(113)
    for _ in range(100):
        r = random_rotation(rng)
        q = rotation_to_quat(r)
        assert np.isclose(np.linalg.norm(q), 1.0, atol=1e-12)
        assert np.allclose(quat_to_rotation(q), r, atol=1e-9)


def test_dataset_file_round_trip(tmp_path):
    spec = TrajectorySpec(duration=1.0, seed=6)
    world = WorldSpec(landmark_count=30)
    corr = CorruptionSpec(accel_psd=2e-3, gyro_psd=1.7e-4, pixel_sigma=1.0,
                          outlier_prob=0.1,
                          gyro_bias=(0.002, -0.001, 0.0005),
                          accel_bias=(0.03, 0.01, -0.02))
    ds = make_dataset(spec, world, corr, K, EX)
    write_dataset(ds, tmp_path / "data")
    back = read_dataset(tmp_path / "data")
    assert np.array_equal(back.gyro, ds.gyro)
    assert np.array_equal(back.accel, ds.accel)
    assert np.array_equal(back.obs_uv, ds.obs_uv)
    assert np.array_equal(back.obs_lm, ds.obs_lm)
    assert np.array_equal(back.obs_outlier, ds.obs_outlier)
    assert np.array_equal(back.world_xyz, ds.world_xyz)
    assert np.array_equal(back.gt_p, ds.gt_p)
    assert np.array_equal(back.gt_v, ds.gt_v)
    assert np.array_equal(back.gt_bg, ds.gt_bg)
    assert np.array_equal(back.gt_ba, ds.gt_ba)
    # attitude survives the quaternion round trip to tight tolerance
    assert np.max(np.abs(back.gt_r - ds.gt_r)) < 1e-9


def test_header_rows_exact(tmp_path):
    spec = TrajectorySpec(duration=0.5, seed=6)
    ds = make_dataset(spec, WorldSpec(landmark_count=5), CLEAN, K, EX)
    write_dataset(ds, tmp_path / "d")
    assert (tmp_path / "d" / "imu.csv").read_text().splitlines()[0] == \
        ",".join(IMU_HEADER)
    assert (tmp_path / "d" / "groundtruth.csv").read_text().splitlines()[0] \
        == ",".join(GT_HEADER)
    assert (tmp_path / "d" / "observations.csv").read_text().splitlines()[0] \
        == ",".join(OBS_HEADER)


def test_groundtruth_quaternions_unit_norm(tmp_path):
    spec = TrajectorySpec(duration=0.5, seed=6)
    ds = make_dataset(spec, WorldSpec(landmark_count=5), CLEAN, K, EX)
    write_dataset(ds, tmp_path / "d")
    import csv as csv_mod
    with open(tmp_path / "d" / "groundtruth.csv", newline="") as fh:
        rows = list(csv_mod.reader(fh))[1:]
    for row in rows:
        q = np.array([float(x) for x in row[4:8]])
        assert abs(np.linalg.norm(q) - 1.0) < 1e-9


def test_spec_validation():
    with pytest.raises(ValueError):
        TrajectorySpec(imu_rate=190.0, frame_rate=20.0)
    with pytest.raises(ValueError):
        TrajectorySpec(kind="spiral")
    with pytest.raises(ValueError):
        CorruptionSpec(outlier_prob=1.5)
    with pytest.raises(ValueError):
        WorldSpec(distribution="sphere")
