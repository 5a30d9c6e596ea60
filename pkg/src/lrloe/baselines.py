"""Classical comparison filters: multiplicative EKF, quaternion UKF, complementary filter.

All three keep the orientation as a quaternion and, where they carry a
covariance, a 3-dimensional navigation-frame error ``δ`` with
``q = rotvec_quat(δ) ⊙ q_hat`` -- the same deviation used by the learned
estimator. Every step consumes the gyro reading at ``t`` and the stacked
accelerometer/magnetometer reading at ``t+1``, and accepts a leading batch
axis.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import quat
from .estimator import predict_measurement
from .sensors import NoiseConfig, WorldConfig


class FilterDivergence(RuntimeError):
    """Covariance trace exceeded the configured ceiling."""


def _sym_psd(P: np.ndarray, floor: float = 0.0) -> np.ndarray:
    P = 0.5 * (P + np.swapaxes(P, -1, -2))
    w, V = np.linalg.eigh(P)
    w = np.maximum(w, floor)
    P = (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _blown_up(state, P: np.ndarray) -> np.ndarray:
    """Updated divergence mask; raises instead when the state is strict."""
    tr = np.trace(P, axis1=-2, axis2=-1)
    bad = ~np.isfinite(tr) | (tr > state.trace_ceiling)
    if state.strict and np.any(bad):
        raise FilterDivergence(
            f"covariance trace {np.nanmax(tr):.3g} above ceiling {state.trace_ceiling:.3g}"
        )
    return np.logical_or(state.diverged, bad)


def default_noise_matrices(noise: NoiseConfig, T: float) -> tuple[np.ndarray, np.ndarray]:
    """``Q_proc = Σ_ω T² I₃`` and ``R_meas = diag(Σ_a I₃, Σ_m I₃)``."""
    Q = noise.sigma_gyro * T * T * np.eye(3)
    R = np.diag([noise.sigma_acc] * 3 + [noise.sigma_mag] * 3)
    return Q, R


def measurement_jacobian(q_pred: np.ndarray, world: WorldConfig) -> np.ndarray:
    """``∂y/∂δ`` at ``δ = 0``, shape ``(..., 6, 3)``."""
    Rt = np.swapaxes(quat.to_rotation(q_pred), -1, -2)
    Ha = -Rt @ quat.skew(world.g_n)
    Hm = Rt @ quat.skew(world.m_n)
    return np.concatenate([Ha, Hm], axis=-2)


# -- EKF ----------------------------------------------------------------------


@dataclass(frozen=True)
class EkfState:
    q_hat: np.ndarray
    P: np.ndarray
    Q_proc: np.ndarray
    R_meas: np.ndarray
    trace_ceiling: float = 1e3
    eig_floor: float = 0.0
    # strict states raise FilterDivergence; batched runs set ``diverged`` instead
    strict: bool = True
    diverged: np.ndarray | bool = False

    @classmethod
    def initial(cls, q_hat, noise: NoiseConfig, T: float, init_std: float = 0.1, **kw) -> "EkfState":
        q_hat = quat.normalize(q_hat)
        Q, R = default_noise_matrices(noise, T)
        P = np.broadcast_to(max(init_std, 1e-6) ** 2 * np.eye(3), q_hat.shape[:-1] + (3, 3)).copy()
        return cls(q_hat, P, Q, R, **kw)


def ekf_step(state: EkfState, y_gyro, y_meas, world: WorldConfig) -> EkfState:
    q_pred = quat.hamilton(state.q_hat, quat.exp_q(0.5 * world.T * np.asarray(y_gyro, dtype=float)))
    P = state.P + state.Q_proc
    H = measurement_jacobian(q_pred, world)
    Ht = np.swapaxes(H, -1, -2)
    S = H @ P @ Ht + state.R_meas
    K = np.swapaxes(np.linalg.solve(S, H @ P), -1, -2)
    innovation = np.asarray(y_meas, dtype=float) - predict_measurement(q_pred, world)
    delta = np.einsum("...ij,...j->...i", K, innovation)
    q_hat = quat.hamilton(quat.rotvec_quat(delta), q_pred)
    A = np.eye(3) - K @ H
    P = A @ P @ np.swapaxes(A, -1, -2) + K @ state.R_meas @ np.swapaxes(K, -1, -2)
    P = _sym_psd(P, state.eig_floor)
    diverged = _blown_up(state, P)
    return replace(state, q_hat=q_hat, P=P, diverged=diverged)


def ekf_gain(state: EkfState, q_pred, world: WorldConfig) -> np.ndarray:
    """Kalman gain the EKF would use at ``q_pred`` (for inspection and tests)."""
    P = state.P + state.Q_proc
    H = measurement_jacobian(q_pred, world)
    S = H @ P @ np.swapaxes(H, -1, -2) + state.R_meas
    return np.swapaxes(np.linalg.solve(S, H @ P), -1, -2)


# -- UKF ----------------------------------------------------------------------


def ukf_weights(n: int, alpha: float, beta: float, kappa: float):
    lam = alpha * alpha * (n + kappa) - n
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + (1.0 - alpha * alpha + beta)
    return wm, wc, n + lam


def quat_mean(qs: np.ndarray, weights: np.ndarray, init=None, max_iter: int = 100, tol: float = 1e-10):
    """Weighted barycentre of quaternions ``qs[..., i, :]`` by iterated log-averaging.

    Returns ``(mean, deviations)`` where ``deviations[..., i, :]`` is the
    rotation vector of ``qs_i ⊙ conj(mean)``.
    """
    qs = np.asarray(qs, dtype=float)
    weights = np.asarray(weights, dtype=float)
    mean = qs[..., 0, :] if init is None else np.asarray(init, dtype=float)
    for _ in range(max_iter):
        dev = quat.quat_rotvec(quat.hamilton(qs, quat.conj(mean)[..., None, :]))
        shift = np.einsum("i,...ij->...j", weights, dev)
        mean = quat.hamilton(quat.rotvec_quat(shift), mean)
        if np.max(np.linalg.norm(shift, axis=-1)) < tol:
            break
    dev = quat.quat_rotvec(quat.hamilton(qs, quat.conj(mean)[..., None, :]))
    return mean, dev


@dataclass(frozen=True)
class UkfState:
    q_hat: np.ndarray
    P: np.ndarray
    Q_proc: np.ndarray
    R_meas: np.ndarray
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    trace_ceiling: float = 1e3
    eig_floor: float = 0.0
    strict: bool = True
    diverged: np.ndarray | bool = False

    @classmethod
    def initial(cls, q_hat, noise: NoiseConfig, T: float, init_std: float = 0.1, **kw) -> "UkfState":
        q_hat = quat.normalize(q_hat)
        Q, R = default_noise_matrices(noise, T)
        P = np.broadcast_to(max(init_std, 1e-6) ** 2 * np.eye(3), q_hat.shape[:-1] + (3, 3)).copy()
        return cls(q_hat, P, Q, R, **kw)


def sigma_points(q_hat: np.ndarray, P: np.ndarray, scale: float):
    """Seven sigma points around ``q_hat`` and their rotation-vector offsets."""
    Lc = np.linalg.cholesky(_sym_psd(P, 1e-30) * scale)
    cols = np.swapaxes(Lc, -1, -2)
    zero = np.zeros(P.shape[:-2] + (1, 3))
    d = np.concatenate([zero, cols, -cols], axis=-2)
    return quat.hamilton(quat.rotvec_quat(d), q_hat[..., None, :]), d


def ukf_step(state: UkfState, y_gyro, y_meas, world: WorldConfig) -> UkfState:
    wm, wc, scale = ukf_weights(3, state.alpha, state.beta, state.kappa)
    step_q = quat.exp_q(0.5 * world.T * np.asarray(y_gyro, dtype=float))
    chi, _ = sigma_points(state.q_hat, state.P, scale)
    chi = quat.hamilton(chi, step_q[..., None, :])
    mean, dev = quat_mean(chi, wm, init=chi[..., 0, :])
    P = np.einsum("i,...ij,...ik->...jk", wc, dev, dev) + state.Q_proc
    P = _sym_psd(P)

    chi, d = sigma_points(mean, P, scale)
    z = predict_measurement(chi, world)
    z_bar = np.einsum("i,...ij->...j", wm, z)
    dz = z - z_bar[..., None, :]
    S = np.einsum("i,...ij,...ik->...jk", wc, dz, dz) + state.R_meas
    Pxz = np.einsum("i,...ij,...ik->...jk", wc, d, dz)
    K = np.swapaxes(np.linalg.solve(S, np.swapaxes(Pxz, -1, -2)), -1, -2)
    delta = np.einsum("...ij,...j->...i", K, np.asarray(y_meas, dtype=float) - z_bar)
    q_hat = quat.hamilton(quat.rotvec_quat(delta), mean)
    P = P - K @ S @ np.swapaxes(K, -1, -2)
    P = _sym_psd(P, state.eig_floor)
    diverged = _blown_up(state, P)
    return replace(state, q_hat=q_hat, P=P, diverged=diverged)


# -- complementary filter -----------------------------------------------------


@dataclass(frozen=True)
class CfState:
    q_hat: np.ndarray
    k_acc: float = 0.01
    k_mag: float = 0.005

    def __post_init__(self):
        for name in ("k_acc", "k_mag"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def tilt_correction(q: np.ndarray, y_acc: np.ndarray, world: WorldConfig) -> np.ndarray:
    """Rotation vector aligning the measured gravity direction with ``g_n``."""
    g_meas = quat.rotate(q, -np.asarray(y_acc, dtype=float))
    return quat.from_two_vectors(g_meas, np.broadcast_to(world.g_n, g_meas.shape))


def heading_correction(q: np.ndarray, y_mag: np.ndarray, world: WorldConfig) -> np.ndarray:
    """Rotation vector about the vertical aligning the horizontal field directions."""
    up = world.g_n / np.linalg.norm(world.g_n)
    m_meas = quat.rotate(q, np.asarray(y_mag, dtype=float))
    h_meas = m_meas - np.sum(m_meas * up, axis=-1, keepdims=True) * up
    h_ref = world.m_n - np.dot(world.m_n, up) * up
    psi = np.arctan2(np.cross(h_meas, h_ref) @ up, h_meas @ h_ref)
    return psi[..., None] * up


def cf_step(state: CfState, y_gyro, y_meas, world: WorldConfig) -> CfState:
    y_meas = np.asarray(y_meas, dtype=float)
    q = quat.hamilton(state.q_hat, quat.exp_q(0.5 * world.T * np.asarray(y_gyro, dtype=float)))
    if state.k_acc > 0.0:
        q = quat.hamilton(quat.rotvec_quat(state.k_acc * tilt_correction(q, y_meas[..., :3], world)), q)
    if state.k_mag > 0.0:
        q = quat.hamilton(quat.rotvec_quat(state.k_mag * heading_correction(q, y_meas[..., 3:], world)), q)
    return replace(state, q_hat=q)


# -- whole-record runners -------------------------------------------------------


def run_filter(step_fn, state, gyro: np.ndarray, meas: np.ndarray, world: WorldConfig):
    """Run ``step_fn`` over a record; returns estimates shaped ``(..., N, 4)``.

    Raises :class:`FilterDivergence` from the step function unchanged.
    """
    n = gyro.shape[-2]
    out = np.empty(state.q_hat.shape[:-1] + (n, 4))
    out[..., 0, :] = state.q_hat
    for k in range(n - 1):
        state = step_fn(state, gyro[..., k, :], meas[..., k + 1, :], world)
        out[..., k + 1, :] = state.q_hat
    return out, state
