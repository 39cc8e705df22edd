"""Error-state EKF over an IMU state and inverse-depth landmarks.

State vector: 15-dim IMU block (xi, p, v, b_a, b_g) followed by 6 entries
per landmark (anchor xyz, theta, phi, rho). The covariance tracks the error
state: on-manifold for the orientation (right perturbation), additive for
everything else, plain additive for landmark coordinates.

Prediction consumes raw IMU samples; the visual update gates measurements
with a chi-square test on the innovation, picks a consensus set with a
1-point hypothesis scheme, and applies one stacked Kalman update.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import (BehindCameraError, Extrinsics, InverseDepthLandmark,
                     Intrinsics, ray_direction, ray_direction_jacobian)
from .so3 import boxplus, exp_so3, hat, log_so3, right_jacobian, right_jacobian_inv
from .state import (IMU_DIM, LM_DIM, FeatureObservation, ImuSample, ImuState,
                    NoiseModel)

logger = logging.getLogger(__name__)

# 95th percentile of chi-square with 2 degrees of freedom
CHI2_GATE_2DOF = 5.991


class FilterCapacityError(RuntimeError):
    """Landmark cap reached; prune before augmenting."""


@dataclass
class FilterConfig:
    landmark_cap: int = 50
    gate_threshold: float = CHI2_GATE_2DOF
    ransac_iters: int = 10
    rho_init: float = 0.1              # inverse-depth prior, 1/m
    sigma_rho: float = 0.5             # prior std of the inverse depth, 1/m
    joseph_update: bool = False        # covariance via Joseph form instead
                                       # of (I - KH) P


@dataclass
class FilterBelief:
    """Mean state plus covariance over IMU block and landmarks."""
    imu: ImuState
    ids: list[int] = field(default_factory=list)
    landmarks: list[InverseDepthLandmark] = field(default_factory=list)
    cov: np.ndarray = field(default_factory=lambda: np.zeros((IMU_DIM, IMU_DIM)))
    feedback_version: int = -1

    @property
    def num_landmarks(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return IMU_DIM + LM_DIM * len(self.ids)

    def landmark_slice(self, index: int) -> slice:
        return slice(IMU_DIM + LM_DIM * index, IMU_DIM + LM_DIM * (index + 1))

    def index_of(self, landmark_id: int) -> int:
        return self.ids.index(landmark_id)

    def copy(self) -> "FilterBelief":
        return FilterBelief(self.imu.copy(), list(self.ids),
                            [lm.copy() for lm in self.landmarks],
                            self.cov.copy(), self.feedback_version)

    def retract(self, delta: np.ndarray) -> "FilterBelief":
        """Apply a full error vector; landmark coordinates are additive."""
        out = self.copy()
        out.imu = self.imu.retract(delta[:IMU_DIM])
        for i, lm in enumerate(out.landmarks):
            d = delta[self.landmark_slice(i)]
            lm.anchor = lm.anchor + d[:3]
            lm.theta += d[3]
            lm.phi += d[4]
            lm.rho += d[5]
        return out


@dataclass
class UpdateReport:
    """Bookkeeping for one visual update step."""
    n_observed: int = 0
    n_behind: int = 0
    n_gated: int = 0
    n_consensus: int = 0
    used_ids: list[int] = field(default_factory=list)
    negative_depth_ids: list[int] = field(default_factory=list)
    prediction_only: bool = False
    singular_innovation: bool = False


def symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


# ---------------------------------------------------------------------------
# prediction


def propagate_state(x: ImuState, s: ImuSample, nm: NoiseModel) -> ImuState:
    """Discrete mean propagation over one IMU sample, biases held fixed."""
    r_new = x.r @ exp_so3((s.gyro - x.bg) * s.dt)
    p_new = x.p + x.v * s.dt
    v_new = x.v + (x.r @ (s.accel - x.ba) + nm.gravity) * s.dt
    return ImuState(r_new, p_new, v_new, x.ba.copy(), x.bg.copy())


def propagate_state_noisy(x: ImuState, s: ImuSample, nm: NoiseModel,
                          n_ad: np.ndarray, n_gd: np.ndarray) -> ImuState:
    """Noise-instrumented propagation backing the linearization.

    The same discrete white-noise vector that corrupts the accelerometer and
    gyroscope lines also drives the bias random walk, matching the structure
    of the process-noise Jacobian.
    """
    r_new = x.r @ exp_so3((s.gyro - x.bg - n_gd) * s.dt)
    p_new = x.p + x.v * s.dt
    v_new = x.v + (x.r @ (s.accel - x.ba - n_ad) + nm.gravity) * s.dt
    return ImuState(r_new, p_new, v_new, x.ba + n_ad, x.bg + n_gd)


def error_state_jacobians(x: ImuState, s: ImuSample) -> tuple[np.ndarray, np.ndarray]:
    """Discrete error-state transition Phi (15x15) and noise Jacobian G (15x6).

    The orientation rows are Jacobians of the raw tangent coordinate of the
    predicted rotation with respect to on-manifold input perturbations,
    which is why the inverse right Jacobian of the predicted attitude
    appears in them.
    """
    omega_dt = (s.gyro - x.bg) * s.dt
    incr = exp_so3(omega_dt)
    xi_pred = log_so3(x.r @ incr)
    jr_inv_pred = right_jacobian_inv(xi_pred)

    phi_xx = jr_inv_pred @ incr.T
    phi_xbg = -jr_inv_pred @ right_jacobian(omega_dt) * s.dt
    phi_vx = -x.r @ hat((s.accel - x.ba) * s.dt)
    phi_vba = -x.r * s.dt

    phi = np.eye(IMU_DIM)
    phi[0:3, 0:3] = phi_xx
    phi[0:3, 12:15] = phi_xbg
    phi[3:6, 6:9] = np.eye(3) * s.dt
    phi[6:9, 0:3] = phi_vx
    phi[6:9, 9:12] = phi_vba

    g = np.zeros((IMU_DIM, 6))
    g[0:3, 3:6] = phi_xbg                # same sensitivity as the bias column
    g[6:9, 0:3] = phi_vba
    g[9:12, 0:3] = np.eye(3)
    g[12:15, 3:6] = np.eye(3)
    return phi, g


def tangent_transition(x: ImuState, s: ImuSample
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Transition in the perturbation coordinates of the measurement model.

    The attitude rows of error_state_jacobians map into raw tangent
    coordinates of the predicted attitude; premultiplying them by the right
    Jacobian of the predicted attitude re-expresses them as on-manifold
    perturbations, the coordinates the visual update linearizes in. The
    filter must propagate its covariance in one consistent set of
    coordinates, so prediction uses this form (the raw form compounds a
    non-volume-preserving factor per sample and corrupts the covariance at
    large attitude angles).
    """
    omega_dt = (s.gyro - x.bg) * s.dt
    incr = exp_so3(omega_dt)
    phi = np.eye(IMU_DIM)
    phi[0:3, 0:3] = incr.T
    phi[0:3, 12:15] = -right_jacobian(omega_dt) * s.dt
    phi[3:6, 6:9] = np.eye(3) * s.dt
    phi[6:9, 0:3] = -x.r @ hat((s.accel - x.ba) * s.dt)
    phi[6:9, 9:12] = -x.r * s.dt

    g = np.zeros((IMU_DIM, 6))
    g[0:3, 3:6] = phi[0:3, 12:15]
    g[6:9, 0:3] = phi[6:9, 9:12]
    g[9:12, 0:3] = np.eye(3)
    g[12:15, 3:6] = np.eye(3)
    return phi, g


def process_noise(g: np.ndarray, nm: NoiseModel, dt: float) -> np.ndarray:
    """Additive process noise for one sample.

    The white-noise block is G Q G^T with Q = diag(sigma_a, sigma_g) / dt
    applied to the attitude/velocity rows; the bias rows use the separate
    random-walk covariances (zero by default, biases constant) instead of
    re-using the white noise, so no spurious velocity-bias cross terms
    appear.
    """
    g_w = g.copy()
    g_w[9:15, :] = 0.0
    q = np.zeros((6, 6))
    q[0:3, 0:3] = nm.sigma_a / dt
    q[3:6, 3:6] = nm.sigma_g / dt
    n = g_w @ q @ g_w.T
    n[9:12, 9:12] += nm.sigma_bad
    n[12:15, 12:15] += nm.sigma_bgd
    return n


def propagate_covariance(p: np.ndarray, phi: np.ndarray, g: np.ndarray,
                         nm: NoiseModel, dt: float) -> np.ndarray:
    """Covariance propagation: IMU block and cross terms move, landmarks stay."""
    out = p.copy()
    p_bb = p[:IMU_DIM, :IMU_DIM]
    out[:IMU_DIM, :IMU_DIM] = phi @ p_bb @ phi.T + process_noise(g, nm, dt)
    if p.shape[0] > IMU_DIM:
        p_bl = p[:IMU_DIM, IMU_DIM:]
        out[:IMU_DIM, IMU_DIM:] = phi @ p_bl
        out[IMU_DIM:, :IMU_DIM] = out[:IMU_DIM, IMU_DIM:].T
    return symmetrize(out)


def predict(belief: FilterBelief, samples: list[ImuSample],
            nm: NoiseModel) -> FilterBelief:
    """Propagate mean and covariance over a batch of IMU samples.

    The per-sample transition matrices are composed into a single 15x15
    transition plus accumulated noise, so the full covariance is touched
    once regardless of how many samples the batch holds.
    """
    out = belief.copy()
    x = out.imu
    phi_total = np.eye(IMU_DIM)
    noise_total = np.zeros((IMU_DIM, IMU_DIM))
    for s in samples:
        phi, g = tangent_transition(x, s)
        x = propagate_state(x, s, nm)
        phi_total = phi @ phi_total
        noise_total = phi @ noise_total @ phi.T + process_noise(g, nm, s.dt)
    out.imu = x
    p = out.cov
    p_new = p.copy()
    p_new[:IMU_DIM, :IMU_DIM] = (phi_total @ p[:IMU_DIM, :IMU_DIM]
                                 @ phi_total.T) + noise_total
    if p.shape[0] > IMU_DIM:
        p_new[:IMU_DIM, IMU_DIM:] = phi_total @ p[:IMU_DIM, IMU_DIM:]
        p_new[IMU_DIM:, :IMU_DIM] = p_new[:IMU_DIM, IMU_DIM:].T
    out.cov = symmetrize(p_new)
    return out


# ---------------------------------------------------------------------------
# measurement model


def _camera_point(x: ImuState, lm: InverseDepthLandmark,
                  ex: Extrinsics) -> np.ndarray:
    """Scaled camera-frame point rho * (landmark - camera center)."""
    r_cw = (x.r @ ex.r_bc).T
    w = lm.rho * (lm.anchor - x.p) + ray_direction(lm.theta, lm.phi)
    return r_cw @ w - lm.rho * (ex.r_bc.T @ ex.p_bc)


def predict_pixel(x: ImuState, lm: InverseDepthLandmark, ex: Extrinsics,
                  intr: Intrinsics) -> np.ndarray:
    f_c = _camera_point(x, lm, ex)
    if lm.rho <= 0.0 or f_c[2] <= 0.0:
        raise BehindCameraError("landmark behind camera or nonpositive depth")
    x_, y_, z_ = f_c
    return np.array([intr.fx * x_ / z_ + intr.cx, intr.fy * y_ / z_ + intr.cy])


def measurement_residual(x: ImuState, lm: InverseDepthLandmark,
                         obs: FeatureObservation, ex: Extrinsics,
                         intr: Intrinsics
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Innovation r = z - h(x, lm) with Jacobian blocks H_B (2x15), H_f (2x6).

    The projection is evaluated on the scaled camera point (rho times the
    metric point); the pinhole map is scale invariant so the pixel is
    unchanged while the Jacobians stay polynomial in rho.
    """
    f_c = _camera_point(x, lm, ex)
    if lm.rho <= 0.0 or f_c[2] <= 0.0:
        raise BehindCameraError("landmark behind camera or nonpositive depth")
    xc, yc, zc = f_c
    pred = np.array([intr.fx * xc / zc + intr.cx, intr.fy * yc / zc + intr.cy])
    r = obs.pixel - pred

    iz = 1.0 / zc
    dhdf = np.array([[intr.fx * iz, 0.0, -intr.fx * xc * iz * iz],
                     [0.0, intr.fy * iz, -intr.fy * yc * iz * iz]])
    r_cw = (x.r @ ex.r_bc).T
    w = lm.rho * (lm.anchor - x.p) + ray_direction(lm.theta, lm.phi)

    h_xi = dhdf @ ex.r_bc.T @ hat(x.r.T @ w)
    h_xyz = lm.rho * (dhdf @ r_cw)
    h_p = -h_xyz
    h_theta_phi = dhdf @ r_cw @ ray_direction_jacobian(lm.theta, lm.phi)
    cam_center = x.p + x.r @ ex.p_bc
    h_rho = (dhdf @ r_cw @ (lm.anchor - cam_center)).reshape(2, 1)

    h_b = np.zeros((2, IMU_DIM))
    h_b[:, 0:3] = -h_xi
    h_b[:, 3:6] = -h_p
    h_f = np.hstack([-h_xyz, -h_theta_phi, -h_rho])
    return r, h_b, h_f


def _batch_measurements(x: ImuState, landmarks: list[InverseDepthLandmark],
                        ex: Extrinsics, intr: Intrinsics):
    """Vectorized residual prediction and Jacobians for many landmarks.

    Returns (pred (c,2), h_b (c,2,15), h_f (c,2,6), valid (c,)) where rows
    with valid == False are behind the camera and must be skipped.
    """
    c = len(landmarks)
    anchors = np.array([lm.anchor for lm in landmarks]).reshape(c, 3)
    theta = np.array([lm.theta for lm in landmarks])
    phi = np.array([lm.phi for lm in landmarks])
    rho = np.array([lm.rho for lm in landmarks])

    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    m = np.stack([cp * st, -sp, cp * ct], axis=1)
    dm = np.zeros((c, 3, 2))
    dm[:, 0, 0] = cp * ct
    dm[:, 0, 1] = -sp * st
    dm[:, 1, 1] = -cp
    dm[:, 2, 0] = -cp * st
    dm[:, 2, 1] = -sp * ct

    r_cw = (x.r @ ex.r_bc).T
    w = rho[:, None] * (anchors - x.p) + m
    f_c = w @ r_cw.T - rho[:, None] * (ex.r_bc.T @ ex.p_bc)
    valid = (f_c[:, 2] > 0.0) & (rho > 0.0)
    z_safe = np.where(f_c[:, 2] > 0.0, f_c[:, 2], 1.0)

    iz = 1.0 / z_safe
    pred = np.stack([intr.fx * f_c[:, 0] * iz + intr.cx,
                     intr.fy * f_c[:, 1] * iz + intr.cy], axis=1)
    dhdf = np.zeros((c, 2, 3))
    dhdf[:, 0, 0] = intr.fx * iz
    dhdf[:, 0, 2] = -intr.fx * f_c[:, 0] * iz * iz
    dhdf[:, 1, 1] = intr.fy * iz
    dhdf[:, 1, 2] = -intr.fy * f_c[:, 1] * iz * iz

    u = w @ x.r                                   # R^T w, row per landmark
    hats = np.zeros((c, 3, 3))
    hats[:, 0, 1] = -u[:, 2]
    hats[:, 0, 2] = u[:, 1]
    hats[:, 1, 0] = u[:, 2]
    hats[:, 1, 2] = -u[:, 0]
    hats[:, 2, 0] = -u[:, 1]
    hats[:, 2, 1] = u[:, 0]

    dh_rbc = dhdf @ ex.r_bc.T
    h_xi = np.einsum("cij,cjk->cik", dh_rbc, hats)
    dh_rcw = dhdf @ r_cw
    h_xyz = rho[:, None, None] * dh_rcw
    h_theta_phi = np.einsum("cij,cjk->cik", dh_rcw, dm)
    cam_center = x.p + x.r @ ex.p_bc
    h_rho = np.einsum("cij,cj->ci", dh_rcw, anchors - cam_center)

    h_b = np.zeros((c, 2, IMU_DIM))
    h_b[:, :, 0:3] = -h_xi
    h_b[:, :, 3:6] = h_xyz
    h_f = np.zeros((c, 2, LM_DIM))
    h_f[:, :, 0:3] = -h_xyz
    h_f[:, :, 3:5] = -h_theta_phi
    h_f[:, :, 5] = -h_rho
    return pred, h_b, h_f, valid


# ---------------------------------------------------------------------------
# gating and update


def mahalanobis_gate(r: np.ndarray, h_kl: np.ndarray, p: np.ndarray,
                     sigma_obs: np.ndarray,
                     threshold: float = CHI2_GATE_2DOF) -> bool:
    """Chi-square innovation test for a single observation."""
    s = h_kl @ p @ h_kl.T + sigma_obs
    try:
        d = float(r @ np.linalg.solve(s, r))
    except np.linalg.LinAlgError:
        logger.warning("mahalanobis_gate: singular innovation covariance, "
                       "rejecting observation")
        return False
    return d < threshold


def _gate_distances(res: np.ndarray, s_blocks: np.ndarray) -> np.ndarray:
    """Batched 2-dof Mahalanobis distances; singular blocks map to +inf."""
    a = s_blocks[:, 0, 0]
    b = s_blocks[:, 0, 1]
    d = s_blocks[:, 1, 1]
    det = a * d - b * b
    ok = det > 0.0
    det_safe = np.where(ok, det, 1.0)
    r0, r1 = res[:, 0], res[:, 1]
    dist = (d * r0 * r0 - 2.0 * b * r0 * r1 + a * r1 * r1) / det_safe
    return np.where(ok, dist, np.inf)


def robust_update(belief: FilterBelief, observations: list[FeatureObservation],
                  ex: Extrinsics, intr: Intrinsics, nm: NoiseModel,
                  cfg: FilterConfig, rng: np.random.Generator
                  ) -> tuple[FilterBelief, UpdateReport]:
    """Gated, consensus-filtered stacked EKF update.

    Stage 1 draws single gated observations, applies each as a one-feature
    Kalman update on a copy of the mean and re-gates all residuals against
    the moved prediction (innovation covariance from the prior; the single
    update changes it little and the looser gate errs on acceptance). The
    largest consensus set wins. Stage 2 stacks the consensus residuals into
    one Kalman update of mean and covariance.
    """
    report = UpdateReport()
    matched = [(belief.index_of(o.landmark_id), o) for o in observations
               if o.landmark_id in belief.ids]
    report.n_observed = len(matched)
    if not matched:
        report.prediction_only = True
        return belief, report

    idxs = np.array([i for i, _ in matched])
    obs_px = np.array([o.pixel for _, o in matched])
    obs_cov = np.array([o.cov for _, o in matched])
    lms = [belief.landmarks[i] for i in idxs]

    pred, h_b, h_f, valid = _batch_measurements(belief.imu, lms, ex, intr)
    report.n_behind = int(np.sum(~valid))
    if not np.any(valid):
        report.prediction_only = True
        return belief, report

    # The gain needs the Jacobian of the prediction h, the negative of the
    # residual linearization blocks; with the residual z - h this gives the
    # contracting correction direction.
    n = belief.dim
    c = len(matched)
    h_stack = np.zeros((2 * c, n))
    for k in range(c):
        h_stack[2 * k:2 * k + 2, :IMU_DIM] = -h_b[k]
        h_stack[2 * k:2 * k + 2, belief.landmark_slice(idxs[k])] = -h_f[k]
    res = obs_px - pred

    pht = belief.cov @ h_stack.T                  # (n, 2c)
    s_full = h_stack @ pht
    s_blocks = np.array([s_full[2 * k:2 * k + 2, 2 * k:2 * k + 2] + obs_cov[k]
                         for k in range(c)])
    dist = _gate_distances(res, s_blocks)
    dist[~valid] = np.inf
    gated = np.flatnonzero(dist < cfg.gate_threshold)
    report.n_gated = len(gated)
    if len(gated) == 0:
        report.prediction_only = True
        return belief, report

    # stage 1: 1-point hypotheses, consensus by low innovation
    best = gated
    if len(gated) > 1 and cfg.ransac_iters > 0:
        best = np.array([], dtype=int)
        for _ in range(cfg.ransac_iters):
            pick = int(rng.choice(gated))
            try:
                k_gain = pht[:, 2 * pick:2 * pick + 2] @ np.linalg.inv(
                    s_blocks[pick])
            except np.linalg.LinAlgError:
                continue
            hyp = belief.retract(k_gain @ res[pick])
            hyp_pred, _, _, hyp_valid = _batch_measurements(
                hyp.imu, [hyp.landmarks[i] for i in idxs], ex, intr)
            hyp_res = obs_px - hyp_pred
            hyp_dist = _gate_distances(hyp_res, s_blocks)
            hyp_dist[~hyp_valid] = np.inf
            consensus = np.flatnonzero(hyp_dist < cfg.gate_threshold)
            if len(consensus) > len(best):
                best = consensus
            if len(best) == len(gated):
                break
        if len(best) == 0:
            best = gated
    report.n_consensus = len(best)
    report.used_ids = [int(matched[k][1].landmark_id) for k in best]

    rows = np.concatenate([[2 * k, 2 * k + 1] for k in best])
    h_used = h_stack[rows]
    r_used = res[best].reshape(-1)
    s_used = s_full[np.ix_(rows, rows)].copy()
    for j, k in enumerate(best):
        s_used[2 * j:2 * j + 2, 2 * j:2 * j + 2] += obs_cov[k]
    pht_used = pht[:, rows]
    try:
        gain = np.linalg.solve(s_used, pht_used.T).T
    except np.linalg.LinAlgError:
        logger.warning("robust_update: singular stacked innovation, "
                       "skipping update")
        report.singular_innovation = True
        report.prediction_only = True
        return belief, report

    out = belief.retract(gain @ r_used)
    if cfg.joseph_update:
        ikh = np.eye(n) - gain @ h_used
        sigma_blk = np.zeros((len(rows), len(rows)))
        for j, k in enumerate(best):
            sigma_blk[2 * j:2 * j + 2, 2 * j:2 * j + 2] = obs_cov[k]
        out.cov = ikh @ belief.cov @ ikh.T + gain @ sigma_blk @ gain.T
    else:
        out.cov = belief.cov - gain @ h_used @ belief.cov
    out.cov = symmetrize(out.cov)

    report.negative_depth_ids = [int(i) for i, lm in zip(out.ids, out.landmarks)
                                 if lm.rho <= 0.0]
    return out, report


# ---------------------------------------------------------------------------
# augmentation and pruning


def new_landmark_estimate(x: ImuState, pixel: np.ndarray, ex: Extrinsics,
                          intr: Intrinsics, rho0: float) -> InverseDepthLandmark:
    """Initial inverse-depth coordinates of a feature first seen at `pixel`."""
    anchor = x.r @ ex.p_bc + x.p
    h_vec = np.array([(pixel[0] - intr.cx) / intr.fx,
                      (pixel[1] - intr.cy) / intr.fy, 1.0])
    tau = x.r @ ex.r_bc @ h_vec
    x_w, y_w, z_w = tau
    theta = np.arctan2(x_w, z_w)
    phi = np.arctan2(-y_w, np.hypot(x_w, z_w))
    return InverseDepthLandmark(anchor, float(theta), float(phi), rho0)


def augmentation_jacobians(x: ImuState, pixel: np.ndarray, ex: Extrinsics,
                           intr: Intrinsics, num_landmarks: int
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of the new landmark coordinates.

    j_x (6 x (15+6m)) is the sensitivity to the existing error state, j_hrho
    (6x3) the sensitivity to (pixel noise u, v, inverse-depth prior).
    """
    h_vec = np.array([(pixel[0] - intr.cx) / intr.fx,
                      (pixel[1] - intr.cy) / intr.fy, 1.0])
    tau = x.r @ ex.r_bc @ h_vec
    xw, yw, zw = tau
    zeta = xw * xw + zw * zw
    if zeta <= 0.0:
        raise ValueError("augmentation at the bearing pole is degenerate")
    vsig = (zeta + yw * yw) * np.sqrt(zeta)
    dang_dtau = np.array([
        [zw / zeta, 0.0, -xw / zeta],
        [xw * yw / vsig, -zeta / vsig, yw * zw / vsig],
    ])

    n = IMU_DIM + LM_DIM * num_landmarks
    j_x = np.zeros((LM_DIM, n))
    j_x[0:3, 0:3] = -x.r @ hat(ex.p_bc)
    j_x[0:3, 3:6] = np.eye(3)
    j_x[3:5, 0:3] = -dang_dtau @ x.r @ hat(ex.r_bc @ h_vec)

    j_hrho = np.zeros((LM_DIM, 3))
    pix_to_ray = np.array([[1.0 / intr.fx, 0.0],
                           [0.0, 1.0 / intr.fy],
                           [0.0, 0.0]])
    j_hrho[3:5, 0:2] = dang_dtau @ x.r @ ex.r_bc @ pix_to_ray
    j_hrho[5, 2] = 1.0
    return j_x, j_hrho


def augment_landmark(belief: FilterBelief, obs: FeatureObservation,
                     ex: Extrinsics, intr: Intrinsics, rho0: float,
                     sigma_rho: float, cap: int | None = None) -> FilterBelief:
    """Append one landmark to the state and grow the covariance.

    The new rows of the covariance come from the block form of the
    augmentation Jacobian: the existing state block is untouched and the
    new landmark block is j_x P j_x^T + j_hrho Sigma j_hrho^T.
    """
    if cap is not None and belief.num_landmarks >= cap:
        raise FilterCapacityError(
            f"landmark cap {cap} reached; prune before augmenting")
    lm = new_landmark_estimate(belief.imu, obs.pixel, ex, intr, rho0)
    j_x, j_hrho = augmentation_jacobians(belief.imu, obs.pixel, ex, intr,
                                         belief.num_landmarks)
    sigma_hrho = np.zeros((3, 3))
    sigma_hrho[0:2, 0:2] = obs.cov
    sigma_hrho[2, 2] = sigma_rho ** 2

    n = belief.dim
    p = belief.cov
    out = belief.copy()
    out.ids.append(int(obs.landmark_id))
    out.landmarks.append(lm)
    p_new = np.zeros((n + LM_DIM, n + LM_DIM))
    p_new[:n, :n] = p
    cross = p @ j_x.T
    p_new[:n, n:] = cross
    p_new[n:, :n] = cross.T
    p_new[n:, n:] = j_x @ cross + j_hrho @ sigma_hrho @ j_hrho.T
    out.cov = symmetrize(p_new)
    return out


def prune_landmarks(belief: FilterBelief, visible_ids) -> FilterBelief:
    """Drop landmarks not in visible_ids, preserving the order of survivors."""
    visible = set(int(i) for i in visible_ids)
    keep = [k for k, lid in enumerate(belief.ids) if lid in visible]
    if len(keep) == len(belief.ids):
        return belief
    out = FilterBelief(belief.imu.copy(),
                       [belief.ids[k] for k in keep],
                       [belief.landmarks[k].copy() for k in keep],
                       feedback_version=belief.feedback_version)
    sel = list(range(IMU_DIM))
    for k in keep:
        sel.extend(range(IMU_DIM + LM_DIM * k, IMU_DIM + LM_DIM * (k + 1)))
    out.cov = belief.cov[np.ix_(sel, sel)].copy()
    return out


def nees(belief: FilterBelief, truth: ImuState) -> float:
    """Normalized estimation error squared of the IMU block against truth."""
    e = belief.imu.local_delta(truth)
    p_bb = belief.cov[:IMU_DIM, :IMU_DIM]
    return float(e @ np.linalg.solve(p_bb, e))
