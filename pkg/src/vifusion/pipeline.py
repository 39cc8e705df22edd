"""End-to-end estimation runs: filter loop, back-end, feedback, artifacts.

Two coordination modes: `single_thread` solves the window synchronously at
each keyframe (fully deterministic, used by the benchmark suite); otherwise
the back-end runs in its own thread, receiving keyframe snapshots through a
queue and publishing versioned results the filter loop polls. A back-end
result is applied by the feedback stage at the first filter step after it
arrives, and only when it belongs to the newest keyframe.
"""

from __future__ import annotations

import csv
import json
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .ekf import (FilterBelief, augment_landmark, nees, predict,
                  prune_landmarks, robust_update)
from .evaluate import Trajectory, ate_rmse, horn_align
from .feedback import BackendResult, feedback_cycle
from .preintegration import BiasPair, PreintegratedDelta, integrate
from .simulate import (SyntheticDataset, make_dataset, read_dataset,
                       rotation_to_quat, write_dataset, GT_HEADER)
from .state import IMU_DIM, FeatureObservation, ImuSample, ImuState
from .window_ba import (Keyframe, WindowGraph, extend_map,
                        extract_covariances, gauss_newton_solve,
                        initialize_map, select_keyframe, slide_window)

DIAG_HEADER = ["frame_id", "timestamp_ns", "px", "py", "pz",
               "qw", "qx", "qy", "qz", "vx", "vy", "vz",
               "bgx", "bgy", "bgz", "bax", "bay", "baz",
               "nees", "n_matched", "n_gated", "n_consensus",
               "n_landmarks", "feedback_version", "prediction_only"]


def _fmt(x: float) -> str:
    return f"{x:.17g}"


class Backend:
    """Window optimizer wrapper producing versioned result snapshots."""

    def __init__(self, nm, solver_cfg, ex, intr):
        self.nm = nm
        self.cfg = solver_cfg
        self.ex = ex
        self.intr = intr
        self.graph = WindowGraph()
        self.version = 0
        self.aborts = 0
        self.solves = 0

    def bootstrap(self, graph: WindowGraph) -> BackendResult:
        self.graph = graph
        return self._publish()

    def process(self, kf: Keyframe) -> BackendResult:
        self.graph = slide_window(self.graph, kf, self.cfg.window_size)
        extend_map(self.graph, self.ex, self.intr, self.cfg)
        solved, report = gauss_newton_solve(self.graph, self.nm, self.cfg,
                                            self.ex, self.intr)
        self.solves += 1
        if report.aborted is not None:
            self.aborts += 1
        else:
            self.graph = solved
        return self._publish()

    def _publish(self) -> BackendResult:
        pose_cov, lm_cov = extract_covariances(self.graph, self.nm, self.cfg,
                                               self.ex, self.intr)
        last = self.graph.keyframes[-1]
        self.version += 1
        return BackendResult(
            version=self.version,
            last_keyframe_id=last.id,
            last_keyframe_state=last.state.copy(),
            landmarks={lid: p.copy() for lid, p in
                       self.graph.landmarks.items()},
            landmark_covs=lm_cov,
            pose_covs=pose_cov)


class ThreadedBackend:
    """Runs the Backend on its own thread; keyframes queue in, the newest
    result is polled by the filter loop."""

    def __init__(self, backend: Backend):
        self.backend = backend
        self.inbox: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._latest: BackendResult | None = None
        self._busy = False
        self._stop = False
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        while True:
            kf = self.inbox.get()
            if kf is None:
                return
            self._busy = True
            try:
                result = self.backend.process(kf)
                with self._lock:
                    self._latest = result
            finally:
                self._busy = False

    def submit(self, kf: Keyframe):
        self.inbox.put(kf)

    def bootstrap(self, graph: WindowGraph):
        result = self.backend.bootstrap(graph)
        with self._lock:
            self._latest = result

    def poll(self) -> BackendResult | None:
        with self._lock:
            return self._latest

    @property
    def idle(self) -> bool:
        return not self._busy and self.inbox.empty()

    def shutdown(self):
        if not self._stop:
            self._stop = True
            self.inbox.put(None)
            self._thread.join(timeout=10.0)


@dataclass
class _RunState:
    """Mutable bookkeeping of the frame loop."""
    belief: FilterBelief
    delta: PreintegratedDelta | None = None
    last_kf_state: ImuState | None = None
    last_kf_time: float = 0.0
    last_kf_id: int = -1
    next_kf_id: int = 0
    ref_kf: Keyframe | None = None
    map_ready: bool = False
    pending: BackendResult | None = None
    applied_versions: int = 0
    fuse_failures: int = 0
    total_matched: int = 0
    total_consensus: int = 0
    keyframes: int = 0


def _initial_belief(ds: SyntheticDataset, cfg: RunConfig) -> FilterBelief:
    state = ImuState(ds.gt_r[0].copy(), ds.gt_p[0].copy(),
                     ds.gt_v[0].copy(), np.zeros(3), np.zeros(3))
    init = cfg.init
    diag = np.concatenate([
        np.full(3, init.sigma_xi ** 2), np.full(3, init.sigma_p ** 2),
        np.full(3, init.sigma_v ** 2), np.full(3, init.sigma_ba ** 2),
        np.full(3, init.sigma_bg ** 2)])
    return FilterBelief(state, cov=np.diag(diag))


def _fresh_delta(belief: FilterBelief) -> PreintegratedDelta:
    return PreintegratedDelta(bias=BiasPair(belief.imu.bg.copy(),
                                            belief.imu.ba.copy()))


def run_pipeline(cfg: RunConfig) -> dict:
    """Execute one configured run; writes artifacts and returns metrics."""
    t_start = time.perf_counter()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.dataset:
        ds = read_dataset(cfg.dataset, gravity=cfg.world.gravity)
    else:
        ds = make_dataset(cfg.trajectory, cfg.world, cfg.corruption,
                          cfg.camera.intrinsics(), cfg.camera.extrinsics())
    intr = cfg.camera.intrinsics()
    ex = cfg.camera.extrinsics()
    nm = cfg.noise.noise_model(ds.gravity)
    fcfg = cfg.filter
    scfg = cfg.solver

    seq = np.random.SeedSequence(cfg.seed)
    ransac_rng, augment_rng, feedback_rng = [np.random.default_rng(s)
                                             for s in seq.spawn(3)]

    stride = int(round((ds.frame_t[1] - ds.frame_t[0]) / ds.imu_dt)) \
        if len(ds.frame_t) > 1 else 1

    backend = Backend(nm, scfg, ex, intr)
    threaded = None
    if cfg.mode == "full" and not cfg.single_thread:
        threaded = ThreadedBackend(backend)

    rs = _RunState(belief=_initial_belief(ds, cfg))
    pixel_cov = nm.pixel_cov()
    sigma_px = float(np.sqrt(pixel_cov[0, 0]))

    diag_rows = []
    est_rows = []
    est_rotations = []
    est_positions = []
    nees_values = []
    loop_start = time.perf_counter()

    for f_idx, frame_id in enumerate(ds.frame_ids):
        t_f = float(ds.frame_t[f_idx])
        if f_idx > 0:
            k0 = (f_idx - 1) * stride
            k1 = f_idx * stride
            samples = [ImuSample(float(ds.imu_t[k]), ds.accel[k],
                                 ds.gyro[k], ds.imu_dt)
                       for k in range(k0, min(k1, len(ds.imu_t)))]
            rs.belief = predict(rs.belief, samples, nm)
            if rs.delta is not None:
                for s in samples:
                    rs.delta = integrate(rs.delta, s, nm)

        lm_ids, uv, _flags = ds.frame_observations(int(frame_id))
        observations = [FeatureObservation(int(lid), uv[i].copy(),
                                           pixel_cov.copy())
                        for i, lid in enumerate(lm_ids)]

        rs.belief, report = robust_update(rs.belief, observations, ex, intr,
                                          nm, fcfg, ransac_rng)
        rs.total_matched += report.n_observed
        rs.total_consensus += report.n_consensus

        visible = set(int(i) for i in lm_ids)
        visible -= set(report.negative_depth_ids)
        rs.belief = prune_landmarks(rs.belief, visible)

        if cfg.mode == "full":
            _maybe_feedback(rs, cfg, observations, ex, intr, nm,
                            feedback_rng, threaded, backend)

        rs.belief = _top_up_landmarks(rs.belief, observations, ex, intr,
                                      fcfg, augment_rng)

        gt_idx = min(int(frame_id) * stride, ds.gt_p.shape[0] - 1)
        truth = ImuState(ds.gt_r[gt_idx], ds.gt_p[gt_idx], ds.gt_v[gt_idx],
                         np.asarray(ds.gt_ba, dtype=float),
                         np.asarray(ds.gt_bg, dtype=float))
        step_nees = nees(rs.belief, truth)
        nees_values.append(step_nees)

        if cfg.mode == "full":
            _maybe_keyframe(rs, cfg, t_f, observations, nm, ex, intr,
                            threaded, backend)

        st = rs.belief.imu
        q = rotation_to_quat(st.r)
        ts_ns = int(round(t_f * 1e9))
        est_rotations.append(st.r.copy())
        est_positions.append(st.p.copy())
        est_rows.append([ts_ns] + [_fmt(x) for x in st.p]
                        + [_fmt(x) for x in q] + [_fmt(x) for x in st.v]
                        + [_fmt(x) for x in st.bg]
                        + [_fmt(x) for x in st.ba])
        diag_rows.append(
            [int(frame_id), ts_ns] + [_fmt(x) for x in st.p]
            + [_fmt(x) for x in q] + [_fmt(x) for x in st.v]
            + [_fmt(x) for x in st.bg] + [_fmt(x) for x in st.ba]
            + [_fmt(step_nees), report.n_observed, report.n_gated,
               report.n_consensus, rs.belief.num_landmarks,
               rs.belief.feedback_version, int(report.prediction_only)])

    loop_elapsed = time.perf_counter() - loop_start
    if threaded is not None:
        threaded.shutdown()

    with open(out_dir / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAG_HEADER)
        w.writerows(diag_rows)
    with open(out_dir / "estimate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GT_HEADER)
        w.writerows(est_rows)

    est_traj = Trajectory(
        np.array([r[0] for r in est_rows], dtype=float) * 1e-9,
        np.array(est_rotations), np.array(est_positions))
    gt_idx = np.minimum(ds.frame_ids * stride, ds.gt_p.shape[0] - 1)
    gt_traj = Trajectory(ds.frame_t.copy(), ds.gt_r[gt_idx],
                         ds.gt_p[gt_idx])
    tol = 0.5 / _frame_rate(ds)
    try:
        _, _, aligned = horn_align(est_traj, gt_traj, tol)
        rmse = ate_rmse(aligned, gt_traj, tol)
    except Exception:
        rmse = float("nan")

    metrics = {
        "sequence": cfg.label(),
        "mode": cfg.mode,
        "seed": cfg.seed,
        "ate_rmse": rmse,
        "mean_nees": float(np.mean(nees_values)) if nees_values else None,
        "inlier_rate": (rs.total_consensus / rs.total_matched
                        if rs.total_matched else None),
        "keyframe_count": rs.keyframes,
        "feedback_applied": rs.applied_versions,
        "backend_solves": backend.solves,
        "degradations": backend.aborts + rs.fuse_failures,
        "frames": len(diag_rows),
    }
    deterministic = dict(metrics)
    metrics["wall_time"] = time.perf_counter() - t_start
    metrics["frame_loop_hz"] = (len(diag_rows) / loop_elapsed
                                if loop_elapsed > 0 else None)
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    metrics["_deterministic"] = deterministic
    return metrics


def _frame_rate(ds: SyntheticDataset) -> float:
    if len(ds.frame_t) > 1:
        return 1.0 / float(ds.frame_t[1] - ds.frame_t[0])
    return 20.0


def _top_up_landmarks(belief: FilterBelief, observations, ex, intr, fcfg,
                      rng) -> FilterBelief:
    """Fill the landmark budget with fresh inverse-depth initializations."""
    candidates = [o for o in observations if o.landmark_id not in belief.ids]
    free = fcfg.landmark_cap - belief.num_landmarks
    if free <= 0 or not candidates:
        return belief
    picked = rng.choice(len(candidates), size=min(free, len(candidates)),
                        replace=False)
    out = belief
    for idx in sorted(int(i) for i in picked):
        out = augment_landmark(out, candidates[idx], ex, intr,
                               fcfg.rho_init, fcfg.sigma_rho,
                               cap=fcfg.landmark_cap)
    return out


def _maybe_feedback(rs: _RunState, cfg, observations, ex, intr, nm,
                    feedback_rng, threaded, backend) -> None:
    result = rs.pending
    if threaded is not None:
        polled = threaded.poll()
        if polled is not None and polled.version > rs.belief.feedback_version:
            result = polled
    if result is None or rs.delta is None:
        return
    if result.last_keyframe_id != rs.last_kf_id:
        rs.pending = None
        return
    belief, report = feedback_cycle(
        rs.belief, result, rs.delta, observations, ex, intr, nm, cfg.solver,
        cfg.filter, feedback_rng, inject_count=cfg.feedback_inject)
    if report.applied:
        rs.belief = belief
        rs.applied_versions += 1
        if not report.fuse_ok:
            rs.fuse_failures += 1
    rs.pending = None


def _maybe_keyframe(rs: _RunState, cfg, t_f, observations, nm, ex, intr,
                    threaded, backend) -> None:
    scfg = cfg.solver
    if not rs.map_ready:
        if t_f < cfg.map_init_time:
            return
        snapshot = Keyframe(rs.next_kf_id, t_f, rs.belief.imu.copy(), None,
                            observations)
        if rs.ref_kf is None:
            rs.ref_kf = snapshot
            rs.next_kf_id += 1
            rs.delta = _fresh_delta(rs.belief)
            return
        ref_ids = {o.landmark_id for o in rs.ref_kf.observations}
        common = sum(1 for o in observations if o.landmark_id in ref_ids)
        if common < scfg.min_matches:
            rs.ref_kf = snapshot
            rs.next_kf_id += 1
            rs.delta = _fresh_delta(rs.belief)
            return
        snapshot.delta = rs.delta
        init = initialize_map(rs.ref_kf, snapshot, nm, scfg, ex, intr)
        if init is None:
            return
        graph, _report = init
        rs.map_ready = True
        rs.last_kf_state = snapshot.state
        rs.last_kf_time = t_f
        rs.last_kf_id = snapshot.id
        rs.next_kf_id += 1
        rs.keyframes += 2
        rs.delta = _fresh_delta(rs.belief)
        if threaded is not None:
            threaded.bootstrap(graph)
        else:
            rs.pending = backend.bootstrap(graph)
        return

    idle = threaded.idle if threaded is not None else True
    if not select_keyframe(rs.belief.imu, t_f, rs.last_kf_state,
                           rs.last_kf_time, idle, scfg):
        return
    kf = Keyframe(rs.next_kf_id, t_f, rs.belief.imu.copy(), rs.delta,
                  observations)
    rs.next_kf_id += 1
    rs.keyframes += 1
    rs.last_kf_state = kf.state
    rs.last_kf_time = t_f
    rs.last_kf_id = kf.id
    rs.delta = _fresh_delta(rs.belief)
    if threaded is not None:
        threaded.submit(kf)
    else:
        rs.pending = backend.process(kf)


def simulate_to_dir(cfg: RunConfig, out_dir) -> Path:
    """Generate the configured dataset and write its CSV directory."""
    ds = make_dataset(cfg.trajectory, cfg.world, cfg.corruption,
                      cfg.camera.intrinsics(), cfg.camera.extrinsics())
    out = Path(out_dir)
    write_dataset(ds, out)
    return out
