"""Trajectory alignment and error metrics.

Estimated and reference trajectories are associated by mutual nearest
timestamps, rigidly aligned by the closed-form least-squares fit (no scale:
inertial fusion observes it), and scored by translational RMSE.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .simulate import GT_HEADER, quat_to_rotation


class EvaluationError(RuntimeError):
    pass


@dataclass
class Trajectory:
    t: np.ndarray                  # (n,) seconds, strictly increasing
    r: np.ndarray                  # (n, 3, 3)
    p: np.ndarray                  # (n, 3)

    def __post_init__(self):
        if np.any(np.diff(self.t) <= 0.0):
            raise ValueError("timestamps must strictly increase")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if rows[0] != GT_HEADER:
            raise ValueError(f"{path}: unexpected trajectory header")
        t = np.array([int(r[0]) for r in rows[1:]], dtype=float) * 1e-9
        p = np.array([[float(x) for x in r[1:4]] for r in rows[1:]])
        r_mats = np.array([quat_to_rotation(np.array(
            [float(x) for x in row[4:8]])) for row in rows[1:]])
        return cls(t, r_mats, p)


def associate(t_est: np.ndarray, t_ref: np.ndarray, tol: float):
    """Mutual-nearest-neighbor timestamp pairs within tol seconds."""
    if t_est.size == 0 or t_ref.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    nearest_ref = np.clip(np.searchsorted(t_ref, t_est), 1, t_ref.size - 1) \
        if t_ref.size > 1 else np.zeros(t_est.size, dtype=int)
    if t_ref.size > 1:
        left = nearest_ref - 1
        pick_left = (np.abs(t_est - t_ref[left])
                     <= np.abs(t_est - t_ref[nearest_ref]))
        nearest_ref = np.where(pick_left, left, nearest_ref)
    nearest_est = np.clip(np.searchsorted(t_est, t_ref), 1, t_est.size - 1) \
        if t_est.size > 1 else np.zeros(t_ref.size, dtype=int)
    if t_est.size > 1:
        left = nearest_est - 1
        pick_left = (np.abs(t_ref - t_est[left])
                     <= np.abs(t_ref - t_est[nearest_est]))
        nearest_est = np.where(pick_left, left, nearest_est)
    idx_est = []
    idx_ref = []
    for i, j in enumerate(nearest_ref):
        if nearest_est[j] == i and abs(t_est[i] - t_ref[j]) <= tol:
            idx_est.append(i)
            idx_ref.append(j)
    return np.array(idx_est, dtype=int), np.array(idx_ref, dtype=int)


def horn_align(est: Trajectory, ref: Trajectory, tol: float = 0.025
               ) -> tuple[np.ndarray, np.ndarray, Trajectory]:
    """Closed-form rigid alignment of est onto ref.

    Returns (R, t, aligned estimate) minimizing sum |R p_est + t - p_ref|^2
    over the associated pairs. Needs at least three pairs; collinear points
    still produce the least-squares translation.
    """
    idx_e, idx_r = associate(est.t, ref.t, tol)
    if idx_e.size < 3:
        raise EvaluationError(
            f"alignment needs >= 3 associated pairs, got {idx_e.size}")
    a = est.p[idx_e]
    b = ref.p[idx_r]
    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    cov = (b - mu_b).T @ (a - mu_a)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    t = mu_b - r @ mu_a
    aligned = Trajectory(est.t.copy(),
                         np.einsum("ij,njk->nik", r, est.r),
                         est.p @ r.T + t)
    return r, t, aligned


def ate_rmse(est: Trajectory, ref: Trajectory, tol: float = 0.025) -> float:
    """Translational RMSE over associated pairs (no alignment applied)."""
    idx_e, idx_r = associate(est.t, ref.t, tol)
    if idx_e.size == 0:
        raise EvaluationError("no associated pairs for the error metric")
    err = est.p[idx_e] - ref.p[idx_r]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def aligned_ate_rmse(est: Trajectory, ref: Trajectory,
                     tol: float = 0.025) -> float:
    _, _, aligned = horn_align(est, ref, tol)
    return ate_rmse(aligned, ref, tol)


COMPARE_HEADER = ["sequence", "mode", "ate_rmse", "mean_nees", "inlier_rate",
                  "keyframe_count", "reduction_pct"]
GAP = "MISSING"


def compare_runs(metrics_list: list[dict]) -> tuple[list[list[str]], bool]:
    """Rows of the per-run comparison table.

    One row per run; full-mode rows carry the error reduction against the
    ekf-only run of the same sequence. Missing fields become explicit gap
    markers and flip the ok flag.
    """
    ok = True
    ekf_by_seq = {}
    for m in metrics_list:
        if m.get("mode") == "ekf-only" and "ate_rmse" in m:
            ekf_by_seq[m.get("sequence", "?")] = m["ate_rmse"]
    rows = []
    for m in metrics_list:
        seq = m.get("sequence", "?")
        mode = m.get("mode", GAP)
        row = [str(seq), str(mode)]
        for key in ("ate_rmse", "mean_nees", "inlier_rate",
                    "keyframe_count"):
            if key in m and m[key] is not None:
                row.append(f"{m[key]:.6g}")
            else:
                row.append(GAP)
                ok = False
        reduction = ""
        if mode == "full" and "ate_rmse" in m and seq in ekf_by_seq:
            base = ekf_by_seq[seq]
            if base > 0.0:
                reduction = f"{(1.0 - m['ate_rmse'] / base) * 100.0:.2f}"
        row.append(reduction)
        rows.append(row)
    return rows, ok


def write_comparison(rows: list[list[str]], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_HEADER)
        w.writerows(rows)
