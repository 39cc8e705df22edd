"""On-manifold IMU preintegration between keyframes.

Accumulates relative rotation/position/velocity deltas at a fixed
linearization bias, together with first-order bias Jacobians and a 9x9
noise covariance ordered (dxi, dp, dv). Deltas can be corrected for a new
bias estimate without re-integration, and the module provides the 9-dim
preintegration residual used by the window optimizer plus its analytic
Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .so3 import exp_so3, hat, log_so3, right_jacobian, right_jacobian_inv
from .state import BiasPair, ImuSample, ImuState, NoiseModel


@dataclass
class PreintegratedDelta:
    """Relative motion increments over [i, j] at the linearization bias."""
    d_r: np.ndarray = field(default_factory=lambda: np.eye(3))
    d_p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dt: float = 0.0
    bias: BiasPair = field(default_factory=BiasPair.zero)
    # first-order sensitivity of the deltas to the linearization bias
    dr_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dp_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dp_dba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dv_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dv_dba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    cov: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))

    def copy(self) -> "PreintegratedDelta":
        return PreintegratedDelta(
            self.d_r.copy(), self.d_p.copy(), self.d_v.copy(), self.dt,
            BiasPair(self.bias.bg.copy(), self.bias.ba.copy()),
            self.dr_dbg.copy(), self.dp_dbg.copy(), self.dp_dba.copy(),
            self.dv_dbg.copy(), self.dv_dba.copy(), self.cov.copy())


def integrate(delta: PreintegratedDelta, s: ImuSample,
              nm: NoiseModel) -> PreintegratedDelta:
    """Fold one IMU sample into the delta; returns a new value.

    Position/velocity increments use the current rotation delta and the
    bias-compensated measurements; the noise covariance propagates through
    the per-sample linearization A Sigma A^T + B Q B^T with Q the discrete
    white-noise covariance.
    """
    out = delta.copy()
    a = s.accel - delta.bias.ba
    omega_dt = (s.gyro - delta.bias.bg) * s.dt
    incr = exp_so3(omega_dt)
    jr = right_jacobian(omega_dt)
    d_r = delta.d_r
    d_r_a_hat = d_r @ hat(a)

    # noise propagation, error ordering (dxi, dp, dv)
    a_mat = np.eye(9)
    a_mat[0:3, 0:3] = incr.T
    a_mat[3:6, 0:3] = -0.5 * d_r_a_hat * s.dt * s.dt
    a_mat[3:6, 6:9] = np.eye(3) * s.dt
    a_mat[6:9, 0:3] = -d_r_a_hat * s.dt
    b_mat = np.zeros((9, 6))
    b_mat[0:3, 3:6] = jr * s.dt
    b_mat[3:6, 0:3] = 0.5 * d_r * s.dt * s.dt
    b_mat[6:9, 0:3] = d_r * s.dt
    q = np.zeros((6, 6))
    q[0:3, 0:3] = nm.sigma_a / s.dt
    q[3:6, 3:6] = nm.sigma_g / s.dt
    out.cov = a_mat @ delta.cov @ a_mat.T + b_mat @ q @ b_mat.T
    out.cov = 0.5 * (out.cov + out.cov.T)

    # bias Jacobians (first-order recursions at the linearization bias)
    out.dp_dba = delta.dp_dba + delta.dv_dba * s.dt - 0.5 * d_r * s.dt * s.dt
    out.dp_dbg = (delta.dp_dbg + delta.dv_dbg * s.dt
                  - 0.5 * d_r_a_hat @ delta.dr_dbg * s.dt * s.dt)
    out.dv_dba = delta.dv_dba - d_r * s.dt
    out.dv_dbg = delta.dv_dbg - d_r_a_hat @ delta.dr_dbg * s.dt
    out.dr_dbg = incr.T @ delta.dr_dbg - jr * s.dt

    # delta means
    out.d_p = delta.d_p + delta.d_v * s.dt + 0.5 * d_r @ a * s.dt * s.dt
    out.d_v = delta.d_v + d_r @ a * s.dt
    out.d_r = d_r @ incr
    out.dt = delta.dt + s.dt
    return out


def integrate_all(samples, bias: BiasPair, nm: NoiseModel) -> PreintegratedDelta:
    delta = PreintegratedDelta(bias=BiasPair(bias.bg.copy(), bias.ba.copy()))
    for s in samples:
        delta = integrate(delta, s, nm)
    return delta


def correct_for_bias(delta: PreintegratedDelta, new_bias: BiasPair
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First-order update of the deltas for a changed bias estimate."""
    dbg = new_bias.bg - delta.bias.bg
    dba = new_bias.ba - delta.bias.ba
    d_r = delta.d_r @ exp_so3(delta.dr_dbg @ dbg)
    d_p = delta.d_p + delta.dp_dbg @ dbg + delta.dp_dba @ dba
    d_v = delta.d_v + delta.dv_dbg @ dbg + delta.dv_dba @ dba
    return d_r, d_p, d_v


def preintegration_residual(delta: PreintegratedDelta, x_i: ImuState,
                            x_j: ImuState, bias_i: BiasPair,
                            gravity: np.ndarray, dt_ij: float) -> np.ndarray:
    """9-dim residual (r_dR, r_dp, r_dv) of the states against the deltas.

    bias_i is the current bias estimate at keyframe i; its offset from the
    linearization bias enters through the stored bias Jacobians.
    """
    d_r, d_p, d_v = correct_for_bias(delta, bias_i)
    r_i_t = x_i.r.T
    r_rot = log_so3(d_r.T @ (r_i_t @ x_j.r))
    r_p = r_i_t @ (x_j.p - x_i.p - x_i.v * dt_ij
                   - 0.5 * gravity * dt_ij * dt_ij) - d_p
    r_v = r_i_t @ (x_j.v - x_i.v - gravity * dt_ij) - d_v
    return np.concatenate([r_rot, r_p, r_v])


#: column layout of the residual Jacobian returned below
RESIDUAL_COLUMNS = ("dxi_i", "dp_i", "dv_i", "dba_i", "dbg_i",
                    "dxi_j", "dp_j", "dv_j")


def residual_jacobians(delta: PreintegratedDelta, x_i: ImuState,
                       x_j: ImuState, bias_i: BiasPair, gravity: np.ndarray,
                       dt_ij: float) -> tuple[np.ndarray, np.ndarray]:
    """Residual and its 9x24 Jacobian.

    Columns follow RESIDUAL_COLUMNS: on-manifold attitude perturbations for
    both keyframes, additive position/velocity/bias perturbations, bias
    columns belonging to keyframe i (the residual does not involve the
    biases of j).
    """
    dbg = bias_i.bg - delta.bias.bg
    dba = bias_i.ba - delta.bias.ba
    corr = delta.dr_dbg @ dbg
    d_r = delta.d_r @ exp_so3(corr)

    r_i_t = x_i.r.T
    rel = r_i_t @ x_j.r
    r_rot = log_so3(d_r.T @ rel)
    r_p = r_i_t @ (x_j.p - x_i.p - x_i.v * dt_ij
                   - 0.5 * gravity * dt_ij * dt_ij) - (
        delta.d_p + delta.dp_dbg @ dbg + delta.dp_dba @ dba)
    r_v = r_i_t @ (x_j.v - x_i.v - gravity * dt_ij) - (
        delta.d_v + delta.dv_dbg @ dbg + delta.dv_dba @ dba)
    res = np.concatenate([r_rot, r_p, r_v])

    jr_inv = right_jacobian_inv(r_rot)
    jac = np.zeros((9, 24))
    # rotation block
    jac[0:3, 0:3] = -jr_inv @ x_j.r.T @ x_i.r
    jac[0:3, 15:18] = jr_inv
    jac[0:3, 12:15] = (-jr_inv @ exp_so3(r_rot).T
                       @ right_jacobian(corr) @ delta.dr_dbg)
    # position block
    u_p = r_i_t @ (x_j.p - x_i.p - x_i.v * dt_ij
                   - 0.5 * gravity * dt_ij * dt_ij)
    jac[3:6, 0:3] = hat(u_p)
    jac[3:6, 3:6] = -r_i_t
    jac[3:6, 6:9] = -r_i_t * dt_ij
    jac[3:6, 9:12] = -delta.dp_dba
    jac[3:6, 12:15] = -delta.dp_dbg
    jac[3:6, 18:21] = r_i_t
    # velocity block
    u_v = r_i_t @ (x_j.v - x_i.v - gravity * dt_ij)
    jac[6:9, 0:3] = hat(u_v)
    jac[6:9, 6:9] = -r_i_t
    jac[6:9, 9:12] = -delta.dv_dba
    jac[6:9, 12:15] = -delta.dv_dbg
    jac[6:9, 21:24] = r_i_t
    return res, jac


def bias_residual(bias_i: BiasPair, bias_j: BiasPair) -> np.ndarray:
    """Random-walk residual (b_gj - b_gi, b_aj - b_ai)."""
    return np.concatenate([bias_j.bg - bias_i.bg, bias_j.ba - bias_i.ba])


def apply_delta(x_i: ImuState, delta: PreintegratedDelta,
                gravity: np.ndarray) -> ImuState:
    """State at j implied by the state at i and noise-free deltas.

    Inverts the relative-motion measurement model; the preintegration
    residual of (x_i, apply_delta(x_i, delta)) vanishes by construction.
    """
    dt = delta.dt
    r_j = x_i.r @ delta.d_r
    p_j = (x_i.p + x_i.v * dt + 0.5 * gravity * dt * dt
           + x_i.r @ delta.d_p)
    v_j = x_i.v + gravity * dt + x_i.r @ delta.d_v
    return ImuState(r_j, p_j, v_j, x_i.ba.copy(), x_i.bg.copy())


def slice_samples(samples: list[ImuSample], t0: float,
                  t1: float) -> list[ImuSample]:
    """IMU samples covering [t0, t1), splitting straddling samples.

    A sample whose interval crosses a boundary is cut there; the inner part
    carries the measurement linearly interpolated at the cut time, so
    integrating adjacent windows reproduces integrating the whole stream.
    """
    out: list[ImuSample] = []
    for k, s in enumerate(samples):
        end = s.t + s.dt
        if end <= t0 or s.t >= t1:
            continue
        lo, hi = max(s.t, t0), min(end, t1)
        if hi - lo <= 0.0:
            continue
        if lo == s.t:
            accel, gyro = s.accel, s.gyro
        else:
            frac = (lo - s.t) / s.dt
            nxt = samples[k + 1] if k + 1 < len(samples) else s
            accel = s.accel + (nxt.accel - s.accel) * frac
            gyro = s.gyro + (nxt.gyro - s.gyro) * frac
        out.append(ImuSample(lo, accel, gyro, hi - lo))
    return out
