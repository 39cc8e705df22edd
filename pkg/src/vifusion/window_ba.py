"""Sliding-window visual-inertial bundle adjustment.

The graph holds an ordered window of keyframes (15-dim states) and
Euclidean map points. Factors: one preintegrated-IMU-plus-bias factor per
consecutive keyframe pair, one reprojection factor per (keyframe, mapped
landmark) observation. The oldest keyframe is the gauge anchor and is held
constant. Gauss-Newton with a damping fallback solves the normal
equations, eliminating the landmark blocks by their Schur complement;
small problems can be solved densely for cross-checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Extrinsics, Intrinsics
from .preintegration import (PreintegratedDelta, bias_residual,
                             residual_jacobians)
from .state import FeatureObservation, ImuState, NoiseModel

KF_DIM = 15
POSE_COLS = 6          # (dxi, dp) columns touched by a reprojection factor


@dataclass
class Keyframe:
    id: int
    timestamp: float
    state: ImuState
    delta: PreintegratedDelta | None = None    # from the previous keyframe
    observations: list[FeatureObservation] = field(default_factory=list)


@dataclass
class SolverConfig:
    max_iterations: int = 10
    step_tol: float = 1e-10            # on the infinity norm of the step
    cost_tol: float = 1e-12            # relative cost decrease
    huber_visual_sq: float = 5.991     # threshold on the whitened chi-square
    huber_imu_sq: float | None = None  # None: IMU terms stay quadratic
    window_size: int = 10
    damping_floor: float = 1e-12
    sigma_bg_walk: float = 1e-4        # bias factor weight per interval
    sigma_ba_walk: float = 1e-3
    kf_max_interval: float = 0.5       # keyframe criterion 1, seconds
    kf_max_rotation: float = float(np.deg2rad(15.0))  # criterion 3, radians
    kf_min_interval: float = 0.4       # floor for the backend-idle criterion
    parallax_min: float = float(np.deg2rad(1.5))
    min_matches: int = 20

    def __post_init__(self):
        if (self.step_tol <= 0 or self.cost_tol <= 0
                or self.huber_visual_sq <= 0):
            raise ValueError("tolerances must be positive")

    def bias_walk_cov(self) -> np.ndarray:
        return np.diag([self.sigma_bg_walk ** 2] * 3
                       + [self.sigma_ba_walk ** 2] * 3)


@dataclass
class WindowGraph:
    keyframes: list[Keyframe] = field(default_factory=list)
    landmarks: dict[int, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "WindowGraph":
        kfs = [Keyframe(k.id, k.timestamp, k.state.copy(), k.delta,
                        k.observations) for k in self.keyframes]
        return WindowGraph(kfs, {i: p.copy() for i, p in
                                 self.landmarks.items()})

    def check_invariants(self):
        times = [k.timestamp for k in self.keyframes]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("keyframe timestamps must strictly increase")
        observers = _count_observers(self)
        for lid in self.landmarks:
            if observers.get(lid, 0) < 2:
                raise ValueError(f"landmark {lid} observed by fewer than "
                                 "two keyframes")


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    aborted: str | None = None
    damped_steps: int = 0
    dropped_observations: int = 0
    factor_chi2: dict = field(default_factory=dict)


def _count_observers(graph: WindowGraph) -> dict[int, int]:
    counts: dict[int, int] = {}
    for kf in graph.keyframes:
        for obs in kf.observations:
            counts[obs.landmark_id] = counts.get(obs.landmark_id, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# residuals and cost


def huber_cost(chi2: float, threshold_sq: float | None) -> float:
    """Robust cost of a squared whitened norm; quadratic below threshold,
    linear in the norm above it."""
    if threshold_sq is None or chi2 <= threshold_sq:
        return chi2
    return 2.0 * np.sqrt(threshold_sq * chi2) - threshold_sq


def huber_weight(chi2: float, threshold_sq: float | None) -> float:
    """IRLS weight matching huber_cost."""
    if threshold_sq is None or chi2 <= threshold_sq:
        return 1.0
    return float(np.sqrt(threshold_sq / chi2))


def reprojection_residual(state: ImuState, point_w: np.ndarray,
                          obs: FeatureObservation, ex: Extrinsics,
                          intr: Intrinsics) -> np.ndarray:
    """Predicted-minus-measured pixel for a Euclidean map point."""
    f_c = ex.r_bc.T @ (state.r.T @ (point_w - state.p) - ex.p_bc)
    if f_c[2] <= 0.0:
        from .camera import BehindCameraError
        raise BehindCameraError("map point behind camera")
    pix = np.array([intr.fx * f_c[0] / f_c[2] + intr.cx,
                    intr.fy * f_c[1] / f_c[2] + intr.cy])
    return pix - obs.pixel


def _batch_reprojection(state: ImuState, points_w: np.ndarray,
                        pixels: np.ndarray, ex: Extrinsics, intr: Intrinsics):
    """Residuals and Jacobians for all observations of one keyframe.

    Returns (res (c,2), j_pose (c,2,6), j_lm (c,2,3), valid (c,)); pose
    columns are (dxi, dp) of the observing keyframe.
    """
    c = points_w.shape[0]
    body = (points_w - state.p) @ state.r          # R^T (L - p), rows
    f_c = (body - ex.p_bc) @ ex.r_bc
    valid = f_c[:, 2] > 0.0
    z_safe = np.where(valid, f_c[:, 2], 1.0)
    iz = 1.0 / z_safe
    pred = np.stack([intr.fx * f_c[:, 0] * iz + intr.cx,
                     intr.fy * f_c[:, 1] * iz + intr.cy], axis=1)
    res = pred - pixels

    dhdf = np.zeros((c, 2, 3))
    dhdf[:, 0, 0] = intr.fx * iz
    dhdf[:, 0, 2] = -intr.fx * f_c[:, 0] * iz * iz
    dhdf[:, 1, 1] = intr.fy * iz
    dhdf[:, 1, 2] = -intr.fy * f_c[:, 1] * iz * iz

    dh_rbc = dhdf @ ex.r_bc.T
    hats = np.zeros((c, 3, 3))
    hats[:, 0, 1] = -body[:, 2]
    hats[:, 0, 2] = body[:, 1]
    hats[:, 1, 0] = body[:, 2]
    hats[:, 1, 2] = -body[:, 0]
    hats[:, 2, 0] = -body[:, 1]
    hats[:, 2, 1] = body[:, 0]

    j_lm = dh_rbc @ state.r.T
    j_pose = np.zeros((c, 2, POSE_COLS))
    j_pose[:, :, 0:3] = np.einsum("cij,cjk->cik", dh_rbc, hats)
    j_pose[:, :, 3:6] = -j_lm
    return res, j_pose, j_lm, valid


def reprojection_jacobians(state: ImuState, point_w: np.ndarray,
                           obs: FeatureObservation, ex: Extrinsics,
                           intr: Intrinsics):
    """Scalar-path residual with Jacobians w.r.t. (dxi, dp) and the point."""
    res, j_pose, j_lm, valid = _batch_reprojection(
        state, point_w.reshape(1, 3), obs.pixel.reshape(1, 2), ex, intr)
    if not valid[0]:
        from .camera import BehindCameraError
        raise BehindCameraError("map point behind camera")
    return res[0], j_pose[0], j_lm[0]


def imu_factor(delta: PreintegratedDelta, state_i: ImuState,
               state_j: ImuState, nm: NoiseModel, cfg: SolverConfig):
    """Whitened stacked IMU + bias-walk residual (15,) and Jacobian (15x30).

    Columns are the 15-dim states of i then j in state order; the
    preintegration part is whitened by its propagated covariance, the bias
    part by the configured random-walk covariance.
    """
    from .state import BiasPair
    bias_i = BiasPair(state_i.bg, state_i.ba)
    res9, jac9 = residual_jacobians(delta, state_i, state_j, bias_i,
                                    nm.gravity, delta.dt)
    l_delta = np.linalg.cholesky(delta.cov)
    res9_w = np.linalg.solve(l_delta, res9)
    jac9_w = np.linalg.solve(l_delta, jac9)

    res_b = bias_residual(bias_i, BiasPair(state_j.bg, state_j.ba))
    l_bias = np.linalg.cholesky(cfg.bias_walk_cov())
    res_b_w = np.linalg.solve(l_bias, res_b)

    jac = np.zeros((15, 30))
    jac[0:9, 0:15] = jac9_w[:, 0:15]
    jac[0:9, 15:24] = jac9_w[:, 15:24]
    jac_b = np.zeros((6, 30))
    jac_b[0:3, 12:15] = -np.eye(3)
    jac_b[0:3, 27:30] = np.eye(3)
    jac_b[3:6, 9:12] = -np.eye(3)
    jac_b[3:6, 24:27] = np.eye(3)
    jac[9:15, :] = np.linalg.solve(l_bias, jac_b)

    res = np.concatenate([res9_w, res_b_w])
    return res, jac


def _imu_whitened(kf_i: Keyframe, kf_j: Keyframe, nm: NoiseModel,
                  cfg: SolverConfig):
    return imu_factor(kf_j.delta, kf_i.state, kf_j.state, nm, cfg)


def total_cost(graph: WindowGraph, nm: NoiseModel, cfg: SolverConfig,
               ex: Extrinsics, intr: Intrinsics) -> float:
    """Sum of robustified IMU and reprojection error terms."""
    cost = 0.0
    for k in range(1, len(graph.keyframes)):
        kf_i, kf_j = graph.keyframes[k - 1], graph.keyframes[k]
        if kf_j.delta is None:
            continue
        res, _ = _imu_whitened(kf_i, kf_j, nm, cfg)
        cost += huber_cost(float(res @ res), cfg.huber_imu_sq)
    for kf in graph.keyframes:
        mapped = [o for o in kf.observations if o.landmark_id in
                  graph.landmarks]
        if not mapped:
            continue
        pts = np.array([graph.landmarks[o.landmark_id] for o in mapped])
        pix = np.array([o.pixel for o in mapped])
        res, _, _, valid = _batch_reprojection(kf.state, pts, pix, ex, intr)
        inv_cov = np.array([np.linalg.inv(o.cov) for o in mapped])
        chi2 = np.einsum("ci,cij,cj->c", res, inv_cov, res)
        for c2, ok in zip(chi2, valid):
            if ok:
                cost += huber_cost(float(c2), cfg.huber_visual_sq)
    return cost


# ---------------------------------------------------------------------------
# Gauss-Newton solver


class _Layout:
    """Column bookkeeping.

    The oldest keyframe anchors the gauge: its pose block (dxi, dp) is held
    constant while its velocity and biases stay free (they are observable,
    not gauge freedoms, and freezing them would press the anchor's velocity
    error into every window). All other keyframes contribute their full
    15-dim state; landmark columns follow the keyframe block.
    """

    def __init__(self, graph: WindowGraph):
        self.kf_offset: dict[int, int] = {}
        self.kf_dims: dict[int, list[int]] = {}
        off = 0
        for k, kf in enumerate(graph.keyframes):
            dims = list(range(6, KF_DIM)) if k == 0 else list(range(KF_DIM))
            self.kf_dims[kf.id] = dims
            self.kf_offset[kf.id] = off
            off += len(dims)
        self.n_pose = off
        self.lm_ids = sorted(graph.landmarks.keys())
        self.lm_index = {lid: i for i, lid in enumerate(self.lm_ids)}
        self.n_lm = 3 * len(self.lm_ids)


def _assemble(graph: WindowGraph, nm: NoiseModel, cfg: SolverConfig,
              ex: Extrinsics, intr: Intrinsics, layout: _Layout):
    """Normal equations in Schur-ready block form.

    Returns (a_pose, b_pose, c_blocks, b_cross, b_lm, cost, dropped) where
    the landmark Hessian c_blocks is (n_lm, 3, 3) block-diagonal and
    b_cross is the dense pose-landmark coupling (n_pose x 3*n_lm).
    """
    n_p, n_l = layout.n_pose, len(layout.lm_ids)
    a_pose = np.zeros((n_p, n_p))
    b_pose = np.zeros(n_p)
    c_blocks = np.zeros((n_l, 3, 3))
    b_cross = np.zeros((n_p, 3 * n_l))
    b_lm = np.zeros(3 * n_l)
    cost = 0.0
    dropped = 0

    for k in range(1, len(graph.keyframes)):
        kf_i, kf_j = graph.keyframes[k - 1], graph.keyframes[k]
        if kf_j.delta is None:
            continue
        res, jac = _imu_whitened(kf_i, kf_j, nm, cfg)
        chi2 = float(res @ res)
        cost += huber_cost(chi2, cfg.huber_imu_sq)
        w = huber_weight(chi2, cfg.huber_imu_sq)
        sw = np.sqrt(w)
        res, jac = res * sw, jac * sw
        cols = []
        dims_i = layout.kf_dims[kf_i.id]
        dims_j = layout.kf_dims[kf_j.id]
        cols.append((layout.kf_offset[kf_i.id], len(dims_i),
                     jac[:, 0:15][:, dims_i]))
        cols.append((layout.kf_offset[kf_j.id], len(dims_j),
                     jac[:, 15:30][:, dims_j]))
        for (off_a, na, j_a) in cols:
            b_pose[off_a:off_a + na] -= j_a.T @ res
            for (off_b, nb, j_b) in cols:
                a_pose[off_a:off_a + na, off_b:off_b + nb] += j_a.T @ j_b

    for kf in graph.keyframes:
        mapped = [o for o in kf.observations if o.landmark_id in
                  graph.landmarks]
        if not mapped:
            continue
        pts = np.array([graph.landmarks[o.landmark_id] for o in mapped])
        pix = np.array([o.pixel for o in mapped])
        res, j_pose, j_lm, valid = _batch_reprojection(kf.state, pts, pix,
                                                       ex, intr)
        dropped += int(np.sum(~valid))
        inv_cov = np.array([np.linalg.inv(o.cov) for o in mapped])
        chi2 = np.einsum("ci,cij,cj->c", res, inv_cov, res)
        w = np.array([huber_weight(float(c2), cfg.huber_visual_sq)
                      for c2 in chi2])
        w = np.where(valid, w, 0.0)
        for c2, ok in zip(chi2, valid):
            if ok:
                cost += huber_cost(float(c2), cfg.huber_visual_sq)

        w_cov = inv_cov * w[:, None, None]
        lm_rows = np.array([layout.lm_index[o.landmark_id] for o in mapped])
        # landmark blocks and gradient
        jtw_lm = np.einsum("cik,cij->ckj", j_lm, w_cov)   # (c,3,2)
        np.add.at(c_blocks, lm_rows,
                  np.einsum("ckj,cjl->ckl", jtw_lm, j_lm))
        g_lm = np.einsum("ckj,cj->ck", jtw_lm, res)
        np.add.at(b_lm.reshape(n_l, 3), lm_rows, -g_lm)

        if 0 in layout.kf_dims[kf.id]:      # pose block free (not anchor)
            off = layout.kf_offset[kf.id]
            jtw_pose = np.einsum("cik,cij->ckj", j_pose, w_cov)  # (c,6,2)
            a_blk = np.einsum("ckj,cjl->kl", jtw_pose, j_pose)
            a_pose[off:off + POSE_COLS, off:off + POSE_COLS] += a_blk
            b_pose[off:off + POSE_COLS] -= np.einsum("ckj,cj->k", jtw_pose,
                                                     res)
            cross = np.einsum("ckj,cjl->ckl", jtw_pose, j_lm)    # (c,6,3)
            for c_i, l_i in enumerate(lm_rows):
                b_cross[off:off + POSE_COLS, 3 * l_i:3 * l_i + 3] += \
                    cross[c_i]
    return a_pose, b_pose, c_blocks, b_cross, b_lm, cost, dropped


def _solve_normal_equations(a_pose, b_pose, c_blocks, b_cross, b_lm, damping,
                            use_schur):
    """Solve for (pose step, landmark step); raises LinAlgError if the pose
    system is singular. Landmark blocks that are singular even after
    damping are frozen for this step."""
    n_p = a_pose.shape[0]
    n_l = c_blocks.shape[0]
    if n_l == 0:
        dx_pose = np.linalg.solve(a_pose + damping * np.eye(n_p), b_pose)
        return dx_pose, np.zeros(0), np.zeros(0, dtype=int)

    c_damped = c_blocks + damping * np.eye(3)[None, :, :]
    dets = np.linalg.det(c_damped)
    frozen = np.flatnonzero(dets < 1e-300)
    if len(frozen):
        c_damped[frozen] = np.eye(3)

    if use_schur:
        c_inv = np.linalg.inv(c_damped)
        if len(frozen):
            c_inv[frozen] = 0.0
        # fold the landmark blocks into the pose system
        bc = b_cross.reshape(n_p, n_l, 3)
        bc_cinv = np.einsum("pki,kij->pkj", bc, c_inv).reshape(n_p, 3 * n_l)
        a_red = (a_pose + damping * np.eye(n_p)
                 - bc_cinv @ b_cross.T)
        b_red = b_pose - bc_cinv @ b_lm
        dx_pose = np.linalg.solve(a_red, b_red)
        rhs = (b_lm - b_cross.T @ dx_pose).reshape(n_l, 3)
        dx_lm = np.einsum("kij,kj->ki", c_inv, rhs).reshape(-1)
    else:
        n = n_p + 3 * n_l
        h_full = np.zeros((n, n))
        h_full[:n_p, :n_p] = a_pose + damping * np.eye(n_p)
        h_full[:n_p, n_p:] = b_cross
        h_full[n_p:, :n_p] = b_cross.T
        for k in range(n_l):
            h_full[n_p + 3 * k:n_p + 3 * k + 3,
                   n_p + 3 * k:n_p + 3 * k + 3] = c_damped[k]
        if len(frozen):
            for k in frozen:
                sl = slice(n_p + 3 * k, n_p + 3 * k + 3)
                h_full[sl, :] = 0.0
                h_full[:, sl] = 0.0
                h_full[sl, sl] = np.eye(3)
        g_full = np.concatenate([b_pose, b_lm])
        if len(frozen):
            for k in frozen:
                g_full[n_p + 3 * k:n_p + 3 * k + 3] = 0.0
        dx = np.linalg.solve(h_full, g_full)
        dx_pose, dx_lm = dx[:n_p], dx[n_p:]
    if len(frozen):
        for k in frozen:
            dx_lm[3 * k:3 * k + 3] = 0.0
    return dx_pose, dx_lm, frozen


def _apply_step(graph: WindowGraph, layout: _Layout, dx_pose: np.ndarray,
                dx_lm: np.ndarray) -> WindowGraph:
    out = graph.copy()
    for kf in out.keyframes:
        dims = layout.kf_dims[kf.id]
        off = layout.kf_offset[kf.id]
        full = np.zeros(KF_DIM)
        full[dims] = dx_pose[off:off + len(dims)]
        kf.state = kf.state.retract(full)
    for lid, idx in layout.lm_index.items():
        out.landmarks[lid] = out.landmarks[lid] + dx_lm[3 * idx:3 * idx + 3]
    return out


def gauss_newton_solve(graph: WindowGraph, nm: NoiseModel, cfg: SolverConfig,
                       ex: Extrinsics, intr: Intrinsics,
                       use_schur: bool = True
                       ) -> tuple[WindowGraph, SolveReport]:
    """Iterate damped Gauss-Newton steps until tolerance or iteration cap.

    Accepted iterations never increase the cost; on a cost increase the
    damping grows and the step is retried, and the solve stops if damping
    cannot restore descent.
    """
    report = SolveReport()
    current = graph.copy()
    layout = _Layout(current)
    if len(current.keyframes) < 2:
        report.converged = True
        return current, report

    damping = cfg.damping_floor
    cost = total_cost(current, nm, cfg, ex, intr)
    report.initial_cost = cost
    report.final_cost = cost

    for it in range(cfg.max_iterations):
        try:
            (a_pose, b_pose, c_blocks, b_cross, b_lm, cost0,
             dropped) = _assemble(current, nm, cfg, ex, intr, layout)
        except np.linalg.LinAlgError as err:
            report.aborted = f"assembly failed: {err}"
            break
        report.dropped_observations += dropped

        accepted = False
        for _ in range(6):
            try:
                dx_pose, dx_lm, _ = _solve_normal_equations(
                    a_pose, b_pose, c_blocks, b_cross, b_lm, damping,
                    use_schur)
            except np.linalg.LinAlgError:
                report.aborted = "rank-deficient normal equations"
                break
            if not (np.all(np.isfinite(dx_pose))
                    and np.all(np.isfinite(dx_lm))):
                report.aborted = "non-finite step"
                break
            candidate = _apply_step(current, layout, dx_pose, dx_lm)
            cost1 = total_cost(candidate, nm, cfg, ex, intr)
            if cost1 <= cost0 * (1.0 + 1e-12) + 1e-15:
                accepted = True
                break
            damping = max(damping, cfg.damping_floor) * 10.0
            report.damped_steps += 1
        if not accepted:
            if report.aborted is None:
                report.aborted = "damping failed to restore descent"
            break

        current = candidate
        report.iterations = it + 1
        report.final_cost = cost1
        damping = max(cfg.damping_floor, damping / 10.0)
        step_norm = max(np.max(np.abs(dx_pose)) if dx_pose.size else 0.0,
                        np.max(np.abs(dx_lm)) if dx_lm.size else 0.0)
        if step_norm < cfg.step_tol or (cost0 - cost1) < cfg.cost_tol * max(
                1.0, cost0):
            report.converged = True
            break
        cost = cost1

    report.factor_chi2 = _factor_chi2(current, nm, cfg, ex, intr)
    return current, report


def _factor_chi2(graph: WindowGraph, nm: NoiseModel, cfg: SolverConfig,
                 ex: Extrinsics, intr: Intrinsics) -> dict:
    """Unrobustified chi-square per factor at the current estimate."""
    out: dict = {"imu": {}, "visual": {}}
    for k in range(1, len(graph.keyframes)):
        kf_i, kf_j = graph.keyframes[k - 1], graph.keyframes[k]
        if kf_j.delta is None:
            continue
        res, _ = _imu_whitened(kf_i, kf_j, nm, cfg)
        out["imu"][(kf_i.id, kf_j.id)] = float(res @ res)
    for kf in graph.keyframes:
        for obs in kf.observations:
            if obs.landmark_id not in graph.landmarks:
                continue
            try:
                r = reprojection_residual(kf.state,
                                          graph.landmarks[obs.landmark_id],
                                          obs, ex, intr)
            except Exception:
                continue
            out["visual"][(kf.id, obs.landmark_id)] = float(
                r @ np.linalg.solve(obs.cov, r))
    return out


def extract_covariances(graph: WindowGraph, nm: NoiseModel, cfg: SolverConfig,
                        ex: Extrinsics, intr: Intrinsics
                        ) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Block-diagonal covariances from the gauge-fixed normal matrix.

    Returns (pose_cov by keyframe id (15x15; zeros for the anchored
    keyframe), landmark_cov by landmark id (3x3)). Landmark blocks include
    the back-substituted pose uncertainty.
    """
    layout = _Layout(graph)
    a_pose, _, c_blocks, b_cross, _, _, _ = _assemble(graph, nm, cfg, ex,
                                                      intr, layout)
    n_p = layout.n_pose
    n_l = len(layout.lm_ids)
    jitter = 1e-12
    if n_l:
        c_inv = np.linalg.inv(c_blocks + jitter * np.eye(3)[None])
        bc = b_cross.reshape(n_p, n_l, 3) if n_p else np.zeros((0, n_l, 3))
        bc_cinv = np.einsum("pki,kij->pkj", bc, c_inv).reshape(n_p, 3 * n_l)
        a_red = a_pose - bc_cinv @ b_cross.T
    else:
        a_red = a_pose
    pose_cov_full = (np.linalg.inv(a_red + jitter * np.eye(n_p))
                     if n_p else np.zeros((0, 0)))

    pose_cov = {}
    for kf in graph.keyframes:
        dims = layout.kf_dims[kf.id]
        off = layout.kf_offset[kf.id]
        block = np.zeros((KF_DIM, KF_DIM))
        block[np.ix_(dims, dims)] = pose_cov_full[off:off + len(dims),
                                                  off:off + len(dims)]
        pose_cov[kf.id] = block

    lm_cov: dict[int, np.ndarray] = {}
    for lid, k in layout.lm_index.items():
        base = c_inv[k]
        if n_p:
            b_k = b_cross[:, 3 * k:3 * k + 3]
            base = base + base @ b_k.T @ pose_cov_full @ b_k @ base
        lm_cov[lid] = 0.5 * (base + base.T)
    return pose_cov, lm_cov


# ---------------------------------------------------------------------------
# window management, keyframe policy, map bootstrap


def select_keyframe(current_state: ImuState, current_time: float,
                    last_kf_state: ImuState, last_kf_time: float,
                    backend_idle: bool, cfg: SolverConfig) -> bool:
    """Keyframe test: long gap, idle back-end, or large rotation."""
    gap = current_time - last_kf_time
    if gap > cfg.kf_max_interval:
        return True
    from .so3 import boxminus
    angle = float(np.linalg.norm(boxminus(current_state.r, last_kf_state.r)))
    if angle > cfg.kf_max_rotation:
        return True
    if backend_idle and gap >= cfg.kf_min_interval:
        return True
    return False


def triangulate_midpoint(c1: np.ndarray, d1: np.ndarray, c2: np.ndarray,
                         d2: np.ndarray) -> np.ndarray | None:
    """Midpoint of the closest segment between two world rays.

    Returns None when the rays are near parallel or the closest points lie
    behind either camera.
    """
    d1 = d1 / np.linalg.norm(d1)
    d2 = d2 / np.linalg.norm(d2)
    b = float(d1 @ d2)
    denom = 1.0 - b * b
    if denom < 1e-12:
        return None
    dc = c2 - c1
    s = float((d1 - b * d2) @ dc) / denom
    t = float((b * d1 - d2) @ dc) / denom
    if s <= 0.0 or t <= 0.0:
        return None
    return 0.5 * (c1 + s * d1 + c2 + t * d2)


def _world_ray(state: ImuState, pixel: np.ndarray, ex: Extrinsics,
               intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera center and unit ray of a pixel in the world frame."""
    center = state.p + state.r @ ex.p_bc
    h_vec = np.array([(pixel[0] - intr.cx) / intr.fx,
                      (pixel[1] - intr.cy) / intr.fy, 1.0])
    ray = state.r @ ex.r_bc @ h_vec
    return center, ray / np.linalg.norm(ray)


def initialize_map(ref_kf: Keyframe, cur_kf: Keyframe, nm: NoiseModel,
                   cfg: SolverConfig, ex: Extrinsics, intr: Intrinsics
                   ) -> tuple[WindowGraph, SolveReport] | None:
    """Triangulate high-parallax matches between two keyframes and refine.

    Returns None when too few matches have enough parallax (the caller
    resets the reference frame and retries later).
    """
    obs_ref = {o.landmark_id: o for o in ref_kf.observations}
    points: dict[int, np.ndarray] = {}
    for obs in cur_kf.observations:
        ref = obs_ref.get(obs.landmark_id)
        if ref is None:
            continue
        c1, d1 = _world_ray(ref_kf.state, ref.pixel, ex, intr)
        c2, d2 = _world_ray(cur_kf.state, obs.pixel, ex, intr)
        parallax = np.arccos(np.clip(d1 @ d2, -1.0, 1.0))
        if parallax < cfg.parallax_min:
            continue
        point = triangulate_midpoint(c1, d1, c2, d2)
        if point is None:
            continue
        points[obs.landmark_id] = point
    if len(points) < cfg.min_matches:
        return None
    graph = WindowGraph([ref_kf, cur_kf], points)
    return gauss_newton_solve(graph, nm, cfg, ex, intr)


def slide_window(graph: WindowGraph, new_kf: Keyframe,
                 window_size: int | None = None) -> WindowGraph:
    """Append a keyframe, evict beyond the window, drop orphan landmarks.

    Landmarks kept must remain observable by at least two keyframes in the
    window; the new oldest keyframe becomes the gauge anchor implicitly
    (position 0 is always anchored by the solver).
    """
    out = WindowGraph(list(graph.keyframes) + [new_kf],
                      dict(graph.landmarks))
    if window_size is not None:
        while len(out.keyframes) > window_size:
            out.keyframes.pop(0)
    observers = _count_observers(out)
    out.landmarks = {lid: p for lid, p in out.landmarks.items()
                     if observers.get(lid, 0) >= 2}
    return out


def extend_map(graph: WindowGraph, ex: Extrinsics, intr: Intrinsics,
               cfg: SolverConfig) -> int:
    """Triangulate unmapped landmarks observed by two or more keyframes.

    For each candidate the widest-baseline pair of observers is used; the
    number of landmarks added is returned.
    """
    seen: dict[int, list[tuple[Keyframe, FeatureObservation]]] = {}
    for kf in graph.keyframes:
        for obs in kf.observations:
            if obs.landmark_id in graph.landmarks:
                continue
            seen.setdefault(obs.landmark_id, []).append((kf, obs))
    added = 0
    for lid, pairs in seen.items():
        if len(pairs) < 2:
            continue
        centers = [(kf.state.p + kf.state.r @ ex.p_bc) for kf, _ in pairs]
        best, best_base = None, -1.0
        for a in range(len(pairs)):
            for b in range(a + 1, len(pairs)):
                base = float(np.linalg.norm(centers[a] - centers[b]))
                if base > best_base:
                    best, best_base = (a, b), base
        a, b = best
        kf_a, obs_a = pairs[a]
        kf_b, obs_b = pairs[b]
        c1, d1 = _world_ray(kf_a.state, obs_a.pixel, ex, intr)
        c2, d2 = _world_ray(kf_b.state, obs_b.pixel, ex, intr)
        parallax = np.arccos(np.clip(d1 @ d2, -1.0, 1.0))
        if parallax < cfg.parallax_min:
            continue
        point = triangulate_midpoint(c1, d1, c2, d2)
        if point is None:
            continue
        graph.landmarks[lid] = point
        added += 1
    return added
