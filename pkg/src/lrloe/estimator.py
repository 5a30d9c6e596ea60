"""Deviation-form orientation estimator driven by a pluggable gain.

One step, for gyro reading ``y_ω,t`` and stacked accelerometer/magnetometer
reading ``y_{t+1}``::

    q_pred  = q_hat ⊙ exp_q(T/2 · y_ω,t)
    y_pred  = (-R{q_pred}^T g_n ; R{q_pred}^T m_n)
    eta_hat = K_{t+1} (y_{t+1} - y_pred)        K from provider(eta_hat_t)
    q_hat   = rotvec_quat(eta_hat) ⊙ q_pred

``eta_hat`` is a rotation vector expressed in the navigation frame. All
functions accept a leading batch axis, so a set of independent runs can be
stepped together.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import quat
from .sensors import ImuSample, WorldConfig

STATE_DIM = 3
MEAS_DIM = 6
ACTION_DIM = STATE_DIM * MEAS_DIM


class GainProvider(Protocol):
    def provide(self, eta_hat: np.ndarray, deterministic: bool = False) -> np.ndarray:
        """Return gains of shape ``eta_hat.shape[:-1] + (3, 6)``."""
        ...


@dataclass(frozen=True)
class EstimatorState:
    q_hat: np.ndarray
    eta_hat: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, q_hat: np.ndarray) -> "EstimatorState":
        q_hat = quat.normalize(q_hat)
        return cls(q_hat, np.zeros(q_hat.shape[:-1] + (STATE_DIM,)), 0)


def check_gain(K: np.ndarray, k_max: float = 1.0) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    if K.shape[-2:] != (STATE_DIM, MEAS_DIM):
        raise ValueError(f"gain must be 3x6, got {K.shape[-2:]}")
    if not np.all(np.isfinite(K)):
        raise ValueError("gain has non-finite entries")
    if np.any(np.abs(K) > k_max):
        raise ValueError(f"gain entries exceed k_max={k_max}")
    return K


class ZeroGain:
    """Open-loop control: the correction is always zero."""

    def provide(self, eta_hat, deterministic=False):
        eta_hat = np.asarray(eta_hat)
        return np.zeros(eta_hat.shape[:-1] + (STATE_DIM, MEAS_DIM))


class ConstantGain:
    def __init__(self, K: np.ndarray, k_max: float = 1.0):
        self.K = check_gain(K, k_max)

    def provide(self, eta_hat, deterministic=False):
        eta_hat = np.asarray(eta_hat)
        return np.broadcast_to(self.K, eta_hat.shape[:-1] + self.K.shape[-2:]).copy()


def time_update(state: EstimatorState, y_gyro: np.ndarray, T: float) -> np.ndarray:
    return quat.hamilton(state.q_hat, quat.exp_q(0.5 * T * np.asarray(y_gyro, dtype=float)))


def predict_measurement(q_pred: np.ndarray, world: WorldConfig) -> np.ndarray:
    Rt = np.swapaxes(quat.to_rotation(q_pred), -1, -2)
    return np.concatenate([-(Rt @ world.g_n), Rt @ world.m_n], axis=-1)


def correct(
    q_pred: np.ndarray, innovation: np.ndarray, K: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    eta_hat = np.einsum("...ij,...j->...i", K, innovation)
    q_hat = quat.hamilton(quat.rotvec_quat(eta_hat), q_pred)
    # a zero correction returns q_pred untouched (no renormalisation round-off)
    still = ~np.any(eta_hat != 0.0, axis=-1, keepdims=True)
    return np.where(still, q_pred, q_hat), eta_hat


def step(
    state: EstimatorState,
    y_gyro: np.ndarray,
    y_meas: np.ndarray,
    provider: GainProvider,
    world: WorldConfig,
    deterministic: bool = False,
) -> EstimatorState:
    """Advance one sample: gyro ``y_gyro`` at ``t``, stacked acc/mag ``y_meas`` at ``t+1``."""
    q_pred = time_update(state, y_gyro, world.T)
    innovation = np.asarray(y_meas, dtype=float) - predict_measurement(q_pred, world)
    K = provider.provide(state.eta_hat, deterministic)
    q_hat, eta_hat = correct(q_pred, innovation, K)
    return EstimatorState(q_hat, eta_hat, state.t + 1)


def step_sample(
    state: EstimatorState,
    gyro: ImuSample,
    meas: ImuSample,
    provider: GainProvider,
    world: WorldConfig,
    deterministic: bool = False,
) -> EstimatorState:
    """:func:`step` taking the gyro from ``gyro`` and acc/mag from the next sample ``meas``."""
    y = np.concatenate([meas.y_acc, meas.y_mag], axis=-1)
    return step(state, gyro.y_gyro, y, provider, world, deterministic)


def error_state(q_true: np.ndarray, q_hat: np.ndarray) -> np.ndarray:
    """Navigation-frame rotation vector of ``q_true ⊙ conj(q_hat)``."""
    return quat.quat_rotvec(quat.hamilton(q_true, quat.conj(q_hat)))


def run(
    q_hat0: np.ndarray,
    gyro: np.ndarray,
    meas: np.ndarray,
    provider: GainProvider,
    world: WorldConfig,
    deterministic: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Filter a whole record.

    ``gyro`` and ``meas`` have shape ``(..., N, 3)`` and ``(..., N, 6)``.
    Returns estimates ``(..., N, 4)`` (row 0 is ``q_hat0``) and applied
    corrections ``(..., N, 3)`` (row 0 is zero).
    """
    gyro = np.asarray(gyro, dtype=float)
    meas = np.asarray(meas, dtype=float)
    n = gyro.shape[-2]
    batch = np.broadcast_shapes(np.shape(q_hat0)[:-1], gyro.shape[:-2])
    q_out = np.empty(batch + (n, 4))
    eta_out = np.zeros(batch + (n, STATE_DIM))
    state = EstimatorState.initial(np.broadcast_to(q_hat0, batch + (4,)))
    q_out[..., 0, :] = state.q_hat
    for k in range(n - 1):
        state = step(state, gyro[..., k, :], meas[..., k + 1, :], provider, world, deterministic)
        q_out[..., k + 1, :] = state.q_hat
        eta_out[..., k + 1, :] = state.eta_hat
    return q_out, eta_out
