"""Back-end-to-filter feedback.

After each window optimization the filter's current-frame state is refined
by a small fixed-anchor optimization (IMU factor from the optimized last
keyframe plus reprojections onto the optimized map), fused into the filter
as a direct pseudo-measurement of the IMU block, and the filter's landmark
set is topped up with optimized map points carrying analytically propagated
inverse-depth uncertainty. A version counter makes each back-end result
apply at most once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import Extrinsics, Intrinsics
from .ekf import (FilterBelief, FilterConfig, augment_landmark, symmetrize)
from .preintegration import PreintegratedDelta
from .state import IMU_DIM, FeatureObservation, ImuState, NoiseModel
from .window_ba import (SolverConfig, huber_cost, huber_weight, imu_factor,
                        reprojection_jacobians, reprojection_residual)

logger = logging.getLogger(__name__)


@dataclass
class BackendResult:
    """Immutable snapshot published by the window optimizer."""
    version: int
    last_keyframe_id: int
    last_keyframe_state: ImuState
    landmarks: dict[int, np.ndarray]
    landmark_covs: dict[int, np.ndarray]
    pose_covs: dict[int, np.ndarray]          # 15x15 per keyframe id


@dataclass
class StateCorrection:
    state: ImuState
    cov: np.ndarray                           # 15x15


@dataclass
class FeedbackReport:
    applied: bool = False
    stale: bool = False
    correction_ok: bool = False
    fuse_ok: bool = False
    injected: int = 0
    notes: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# stage 1: optimize the current frame against the optimized keyframe + map


def state_correction_optimize(kf_state: ImuState, delta: PreintegratedDelta,
                              frame_state: ImuState,
                              matches: list[FeatureObservation],
                              map_points: dict[int, np.ndarray],
                              ex: Extrinsics, intr: Intrinsics,
                              nm: NoiseModel, cfg: SolverConfig
                              ) -> StateCorrection | None:
    """Gauss-Newton over the 15-dim current-frame state, keyframe fixed.

    Cost: robustified IMU term between the optimized keyframe and the frame
    plus robustified reprojections of the frame's map matches. Returns the
    optimized state with the inverse of the final normal matrix as its
    covariance, or None when the optimization cannot make progress.
    """
    usable = [m for m in matches if m.landmark_id in map_points]
    state = frame_state.copy()

    def cost_and_normal(st: ImuState):
        h = np.zeros((IMU_DIM, IMU_DIM))
        b = np.zeros(IMU_DIM)
        cost = 0.0
        res, jac30 = imu_factor(delta, kf_state, st, nm, cfg)
        jac = jac30[:, 15:30]
        chi2 = float(res @ res)
        cost += huber_cost(chi2, cfg.huber_imu_sq)
        w = huber_weight(chi2, cfg.huber_imu_sq)
        h += w * jac.T @ jac
        b -= w * jac.T @ res
        for m in usable:
            try:
                r, j_pose, _ = reprojection_jacobians(
                    st, map_points[m.landmark_id], m, ex, intr)
            except Exception:
                continue
            inv_cov = np.linalg.inv(m.cov)
            chi2 = float(r @ inv_cov @ r)
            cost += huber_cost(chi2, cfg.huber_visual_sq)
            w = huber_weight(chi2, cfg.huber_visual_sq)
            j15 = np.zeros((2, IMU_DIM))
            j15[:, 0:6] = j_pose
            h += w * j15.T @ inv_cov @ j15
            b -= w * j15.T @ inv_cov @ r
        return cost, h, b

    damping = cfg.damping_floor
    cost, h, b = cost_and_normal(state)
    for _ in range(cfg.max_iterations):
        stepped = False
        for _ in range(6):
            try:
                dx = np.linalg.solve(h + damping * np.eye(IMU_DIM), b)
            except np.linalg.LinAlgError:
                return None
            if not np.all(np.isfinite(dx)):
                return None
            candidate = state.retract(dx)
            cost1, h1, b1 = cost_and_normal(candidate)
            if cost1 <= cost * (1.0 + 1e-12) + 1e-15:
                stepped = True
                break
            damping = max(damping, cfg.damping_floor) * 10.0
        if not stepped:
            logger.debug("state correction: damping failed, keeping last "
                         "iterate")
            break
        state, cost, h, b = candidate, cost1, h1, b1
        damping = max(cfg.damping_floor, damping / 10.0)
        if np.max(np.abs(dx)) < cfg.step_tol:
            break
    try:
        cov = np.linalg.inv(h)
    except np.linalg.LinAlgError:
        return None
    return StateCorrection(state, symmetrize(cov))


# ---------------------------------------------------------------------------
# stage 2: fuse the corrected state as a pseudo-measurement


def state_correction_fuse(belief: FilterBelief, corr: StateCorrection
                          ) -> tuple[FilterBelief, bool]:
    """Kalman update with the identity observation of the IMU block.

    The innovation is the tangent-space difference between the optimized
    and filtered states (rotation handled on-manifold); the gain follows
    the standard form with the correction covariance as measurement noise.
    """
    r_star = belief.imu.local_delta(corr.state)
    p = belief.cov
    s = p[:IMU_DIM, :IMU_DIM] + corr.cov
    try:
        gain = np.linalg.solve(s.T, p[:, :IMU_DIM].T).T
    except np.linalg.LinAlgError:
        logger.warning("state correction fuse skipped: singular innovation")
        return belief, False
    out = belief.retract(gain @ r_star)
    out.cov = symmetrize(p - gain @ p[:IMU_DIM, :])
    return out, True


# ---------------------------------------------------------------------------
# stage 3: inject optimized map points as fresh filter landmarks


def inverse_depth_prior(point_w: np.ndarray, state: ImuState, ex: Extrinsics
                        ) -> tuple[float, np.ndarray, np.ndarray]:
    """Inverse distance of a map point with Jacobians.

    Returns (rho, d_rho/d_point (1x3), d_rho/d_pose (1x6)), the pose
    derivative taken against (dxi, dp) of the body state on-manifold.
    """
    r_wc = state.r @ ex.r_bc
    l_c = r_wc.T @ (point_w - (state.r @ ex.p_bc + state.p))
    norm = float(np.linalg.norm(l_c))
    if norm <= 0.0:
        raise ValueError("map point coincides with the camera center")
    rho = 1.0 / norm
    scale = -1.0 / norm ** 3
    j_l = scale * (l_c @ r_wc.T)
    from .so3 import hat
    j_rt = np.zeros(6)
    j_rt[0:3] = scale * (l_c @ (ex.r_bc.T @ hat(state.r.T @ (point_w
                                                             - state.p))))
    j_rt[3:6] = scale * (l_c @ (-r_wc.T))
    return rho, j_l.reshape(1, 3), j_rt.reshape(1, 6)


def map_correction_inject(belief: FilterBelief, result: BackendResult,
                          matches: list[FeatureObservation], ex: Extrinsics,
                          intr: Intrinsics, count: int,
                          rng: np.random.Generator, flt_cfg: FilterConfig
                          ) -> tuple[FilterBelief, int]:
    """Augment the filter with up to `count` optimized map points.

    Candidates are the current frame's matches against the optimized map
    that are not yet filter landmarks; the inverse-depth prior and its
    variance come from the optimized point, the map covariance and the
    back-end pose covariance.
    """
    candidates = [m for m in matches
                  if m.landmark_id in result.landmarks
                  and m.landmark_id not in belief.ids]
    if not candidates:
        return belief, 0
    count = min(count, len(candidates),
                flt_cfg.landmark_cap - belief.num_landmarks)
    if count <= 0:
        return belief, 0
    picked = rng.choice(len(candidates), size=count, replace=False)

    pose_cov = result.pose_covs.get(result.last_keyframe_id)
    sigma_rt = (pose_cov[0:6, 0:6] if pose_cov is not None
                else np.zeros((6, 6)))
    out = belief
    injected = 0
    for idx in sorted(int(i) for i in picked):
        obs = candidates[idx]
        point_w = result.landmarks[obs.landmark_id]
        try:
            rho, j_l, j_rt = inverse_depth_prior(point_w, out.imu, ex)
        except ValueError:
            continue
        if rho <= 0.0:
            continue
        l_c = (out.imu.r @ ex.r_bc).T @ (point_w - (out.imu.r @ ex.p_bc
                                                    + out.imu.p))
        if l_c[2] <= 0.0:
            continue
        sigma_l = result.landmark_covs.get(obs.landmark_id,
                                           np.zeros((3, 3)))
        var = float((j_l @ sigma_l @ j_l.T + j_rt @ sigma_rt @ j_rt.T)[0, 0])
        out = augment_landmark(out, obs, ex, intr, rho,
                               float(np.sqrt(max(var, 0.0))),
                               cap=flt_cfg.landmark_cap)
        injected += 1
    return out, injected


# ---------------------------------------------------------------------------
# full cycle


def feedback_cycle(belief: FilterBelief, result: BackendResult,
                   delta: PreintegratedDelta,
                   observations: list[FeatureObservation], ex: Extrinsics,
                   intr: Intrinsics, nm: NoiseModel, solver_cfg: SolverConfig,
                   flt_cfg: FilterConfig, rng: np.random.Generator,
                   inject_count: int | None = None
                   ) -> tuple[FilterBelief, FeedbackReport]:
    """State correction, fuse, then map injection; degrades stage by stage.

    A result whose version is not newer than the last applied one is a
    no-op; the returned belief is stamped with the applied version.
    """
    report = FeedbackReport()
    if result.version <= belief.feedback_version:
        report.stale = True
        return belief, report

    matches = [m for m in observations if m.landmark_id in result.landmarks]
    corr = state_correction_optimize(result.last_keyframe_state, delta,
                                     belief.imu, matches, result.landmarks,
                                     ex, intr, nm, solver_cfg)
    out = belief
    if corr is not None:
        report.correction_ok = True
        out, fused = state_correction_fuse(out, corr)
        report.fuse_ok = fused
        if not fused:
            report.notes.append("fuse skipped: singular innovation")
    else:
        report.notes.append("state correction diverged, skipped")

    if inject_count is None:
        inject_count = flt_cfg.landmark_cap - out.num_landmarks
    if inject_count > 0:
        out = out if out is not belief else belief.copy()
        out, injected = map_correction_inject(out, result, matches, ex, intr,
                                              inject_count, rng, flt_cfg)
        report.injected = injected

    if out is belief:
        out = belief.copy()
    out.feedback_version = result.version
    report.applied = True
    return out, report
