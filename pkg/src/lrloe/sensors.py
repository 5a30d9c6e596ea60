"""Ground-truth trajectories and synthetic gyro/accelerometer/magnetometer data.

Truth follows ``q_{t+1} = q_t ⊙ exp_q(T/2 ω_t)`` with the gyro reading
``ω_t + e_ω``. Accelerometer and magnetometer readings are the navigation
vectors rotated into the body frame (``R{q}^T``) plus isotropic Gaussian noise.
Linear acceleration is taken to be zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import quat

DIP_ANGLE = math.radians(67.0)

# noise variances used for training data; inference raises the gyro variance
TRAIN_GYRO_VAR = 0.0003
TRAIN_ACC_VAR = 0.0005
TRAIN_MAG_VAR = 0.0003
INFERENCE_GYRO_VAR = 0.03

PROFILE_KINDS = ("constant", "sinusoid-sum", "drastic")


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 stream keyed on ``(seed, *keys)``; independent across keys."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class NoiseConfig:
    """Per-axis noise *variances* (``Σ = var·I₃``) and the generator seed."""

    sigma_gyro: float = TRAIN_GYRO_VAR
    sigma_acc: float = TRAIN_ACC_VAR
    sigma_mag: float = TRAIN_MAG_VAR
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("sigma_gyro", "sigma_acc", "sigma_mag"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be a nonnegative variance")

    @classmethod
    def zero(cls, rng_seed: int = 0) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, rng_seed)

    def with_seed(self, seed: int) -> "NoiseConfig":
        return replace(self, rng_seed=int(seed))


def _default_mag() -> np.ndarray:
    return np.array([math.cos(DIP_ANGLE), 0.0, -math.sin(DIP_ANGLE)])


@dataclass(frozen=True)
class WorldConfig:
    g_n: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 9.81]))
    m_n: np.ndarray = field(default_factory=_default_mag)
    T: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "g_n", np.asarray(self.g_n, dtype=float))
        object.__setattr__(self, "m_n", np.asarray(self.m_n, dtype=float))
        if abs(np.linalg.norm(self.m_n) - 1.0) > 1e-9:
            raise ValueError("m_n must be a unit vector")
        if not self.T > 0.0:
            raise ValueError("sample period T must be positive")


@dataclass(frozen=True)
class ProfileSpec:
    """Parametric angular-velocity profile.

    ``constant``: ``ω(t) = amplitudes[0]``.
    ``sinusoid-sum``: ``ω(t) = Σ_k amplitudes[k] sin(2π frequencies[k] t)``.
    ``drastic``: the sinusoid sum plus, inside ``burst``, an extra
    ``burst_amplitude · sin(2π burst_frequency (t - t0)) · burst_axis``.
    """

    kind: str
    amplitudes: tuple = ((0.0, 0.0, 0.0),)
    frequencies: tuple = (0.0,)
    duration: float = 10.0
    burst: tuple = (0.0, 0.0)
    burst_amplitude: float = 0.0
    burst_frequency: float = 1.0
    burst_axis: tuple = (1.0, 1.0, 1.0)
    name: str = ""

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if not self.duration > 0.0:
            raise ValueError("profile duration must be positive")
        amps = np.asarray(self.amplitudes, dtype=float)
        if amps.ndim != 2 or amps.shape[1] != 3:
            raise ValueError("amplitudes must be a list of 3-vectors")
        if self.kind != "constant" and len(self.frequencies) != len(amps):
            raise ValueError("one frequency per amplitude term is required")
        if self.kind == "drastic":
            t0, t1 = self.burst
            if not 0.0 <= t0 < t1 <= self.duration:
                raise ValueError("burst window must lie inside the duration")


def generate_profile(spec: ProfileSpec, T: float = 0.01) -> np.ndarray:
    """Sample ``ω_true`` on the grid ``t_k = k T``, ``k < round(duration / T)``."""
    n = int(round(spec.duration / T))
    if n < 1:
        raise ValueError("profile duration shorter than one sample")
    t = np.arange(n) * T
    amps = np.asarray(spec.amplitudes, dtype=float)
    if spec.kind == "constant":
        return np.tile(amps[0], (n, 1))
    freqs = np.asarray(spec.frequencies, dtype=float)
    omega = np.sin(2.0 * np.pi * t[:, None] * freqs[None, :]) @ amps
    if spec.kind == "drastic":
        t0, t1 = spec.burst
        inside = (t >= t0) & (t < t1)
        axis = np.asarray(spec.burst_axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        wave = spec.burst_amplitude * np.sin(2.0 * np.pi * spec.burst_frequency * (t - t0))
        omega = omega + np.where(inside, wave, 0.0)[:, None] * axis
    return omega


def burst_mask(spec: ProfileSpec, T: float = 0.01) -> np.ndarray:
    n = int(round(spec.duration / T))
    t = np.arange(n) * T
    t0, t1 = spec.burst
    return (t >= t0) & (t < t1)


# Named profiles: gentle training motion, simple and medium inference motion,
# and a drastic high-rate burst.
PROFILES = {
    "training": ProfileSpec(
        "sinusoid-sum",
        amplitudes=((0.3, 0.0, 0.0), (0.0, 0.3, 0.0), (0.0, 0.0, 0.3)),
        frequencies=(0.2, 0.25, 0.15),
        duration=12.6,
        name="training",
    ),
    "simple": ProfileSpec(
        "sinusoid-sum",
        amplitudes=((0.4, 0.3, 0.2),),
        frequencies=(0.2,),
        duration=10.0,
        name="simple",
    ),
    "medium": ProfileSpec(
        "sinusoid-sum",
        amplitudes=((0.5, 0.0, 0.3), (0.0, 0.6, 0.0), (0.2, 0.2, 0.6)),
        frequencies=(0.3, 0.5, 0.8),
        duration=10.0,
        name="medium",
    ),
    "drastic": ProfileSpec(
        "drastic",
        amplitudes=((0.3, 0.2, 0.0), (0.0, 0.2, 0.3)),
        frequencies=(0.2, 0.3),
        duration=10.0,
        burst=(3.0, 7.0),
        burst_amplitude=12.0,
        burst_frequency=4.0,
        burst_axis=(1.0, 1.0, 1.0),
        name="drastic",
    ),
}


def get_profile(name: str, duration: float | None = None) -> ProfileSpec:
    try:
        spec = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
    if duration is not None:
        spec = replace(spec, duration=float(duration))
    return spec


@dataclass(frozen=True)
class ImuSample:
    y_gyro: np.ndarray
    y_acc: np.ndarray
    y_mag: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled ground truth and sensor readings.

    Row ``k`` holds time ``t[k]``, the true orientation ``q_true[k]``, the true
    rate ``omega[k]`` applied over ``[t_k, t_{k+1})`` and the readings taken at
    ``t_k``. ``q_true`` may be ``None`` for inference-only recordings.
    """

    t: np.ndarray
    q_true: np.ndarray | None
    omega: np.ndarray | None
    gyro: np.ndarray
    acc: np.ndarray
    mag: np.ndarray
    T: float = 0.01

    def __len__(self) -> int:
        return len(self.t)

    def sample(self, k: int) -> ImuSample:
        return ImuSample(self.gyro[k], self.acc[k], self.mag[k])

    @property
    def measurements(self) -> np.ndarray:
        """Stacked ``(acc, mag)`` readings, shape ``(N, 6)``."""
        return np.concatenate([self.acc, self.mag], axis=-1)

    def window(self, start: int, stop: int) -> "Trajectory":
        sl = slice(start, stop)
        return Trajectory(
            t=self.t[sl],
            q_true=None if self.q_true is None else self.q_true[sl],
            omega=None if self.omega is None else self.omega[sl],
            gyro=self.gyro[sl],
            acc=self.acc[sl],
            mag=self.mag[sl],
            T=self.T,
        )


def propagate_truth(q: np.ndarray, omega: np.ndarray, T: float) -> np.ndarray:
    return quat.hamilton(q, quat.exp_q(0.5 * T * np.asarray(omega, dtype=float)))


def integrate(q0: np.ndarray, omega: np.ndarray, T: float) -> np.ndarray:
    """Orientation sequence starting at ``q0`` driven by the rows of ``omega``.

    Returns one quaternion per row; the last rate row is not applied.
    """
    omega = np.asarray(omega, dtype=float)
    steps = quat.exp_q(0.5 * T * omega)
    out = np.empty(omega.shape[:-1] + (4,))
    q = np.broadcast_to(np.asarray(q0, dtype=float), out[..., 0, :].shape)
    out[..., 0, :] = q
    for k in range(omega.shape[-2] - 1):
        q = quat.hamilton(q, steps[..., k, :])
        out[..., k + 1, :] = q
    return out


def ideal_measurements(q: np.ndarray, world: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free ``(y_acc, y_mag)`` for orientations ``q`` (any batch shape)."""
    Rt = np.swapaxes(quat.to_rotation(q), -1, -2)
    return -(Rt @ world.g_n), Rt @ world.m_n


def synth_measurements(
    q: np.ndarray,
    omega: np.ndarray,
    world: WorldConfig,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> ImuSample:
    """Noisy readings at orientation(s) ``q`` with true rate(s) ``omega``.

    Noise is drawn gyro, accelerometer, magnetometer in that order, each with
    the shape of ``omega``.
    """
    omega = np.asarray(omega, dtype=float)
    acc, mag = ideal_measurements(q, world)
    shape = omega.shape
    e_w = math.sqrt(noise.sigma_gyro) * rng.standard_normal(shape)
    e_a = math.sqrt(noise.sigma_acc) * rng.standard_normal(shape)
    e_m = math.sqrt(noise.sigma_mag) * rng.standard_normal(shape)
    return ImuSample(omega + e_w, acc + e_a, mag + e_m)


def simulate(
    spec: ProfileSpec,
    world: WorldConfig | None = None,
    noise: NoiseConfig | None = None,
    q0: np.ndarray | None = None,
) -> Trajectory:
    """Simulate a full trajectory; the noise stream is seeded by ``noise.rng_seed``."""
    world = world or WorldConfig()
    noise = noise or NoiseConfig()
    q0 = quat.IDENTITY if q0 is None else quat.normalize(q0)
    omega = generate_profile(spec, world.T)
    q_true = integrate(q0, omega, world.T)
    rng = np.random.default_rng(noise.rng_seed)
    return with_noise(q_true, omega, world, noise, rng)


def with_noise(
    q_true: np.ndarray,
    omega: np.ndarray,
    world: WorldConfig,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> Trajectory:
    """Wrap a precomputed truth with a fresh measurement realisation."""
    s = synth_measurements(q_true, omega, world, noise, rng)
    n = omega.shape[-2]
    return Trajectory(
        t=np.arange(n) * world.T,
        q_true=q_true,
        omega=omega,
        gyro=s.y_gyro,
        acc=s.y_acc,
        mag=s.y_mag,
        T=world.T,
    )
