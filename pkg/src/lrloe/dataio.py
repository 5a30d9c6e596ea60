"""Trajectory CSV files, train/inference splits, configs and checkpoints on disk.

Dataset files are plain CSV with a header row::

    t,wx,wy,wz,ax,ay,az,mx,my,mz[,qw,qx,qy,qz]

in seconds, rad/s, m/s², normalised field units and unit quaternions
(scalar first, body to navigation). Lines starting with ``#`` before the
header are comments. Numbers are written with 17 significant digits so a
save/load round trip is exact.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import quat
from .sensors import NoiseConfig, ProfileSpec, Trajectory, WorldConfig, integrate, generate_profile, with_noise, derive_rng

IMU_COLUMNS = ("t", "wx", "wy", "wz", "ax", "ay", "az", "mx", "my", "mz")
TRUTH_COLUMNS = ("qw", "qx", "qy", "qz")
NOMINAL_T = 0.01
CONFIG_VERSION = 1


class DatasetError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- datasets --------------------------------------------------------------------


def dataset_text(traj: Trajectory, comment: str | None = None) -> str:
    cols = IMU_COLUMNS + (TRUTH_COLUMNS if traj.q_true is not None else ())
    parts = [traj.t[:, None], traj.gyro, traj.acc, traj.mag]
    if traj.q_true is not None:
        parts.append(traj.q_true)
    table = np.hstack(parts)
    lines = []
    if comment:
        lines += ["# " + c for c in comment.splitlines()]
    lines.append(",".join(cols))
    lines += [",".join(_fmt(v) for v in row) for row in table]
    return "\n".join(lines) + "\n"


def save_dataset(traj: Trajectory, path, comment: str | None = None) -> None:
    _atomic_write(path, dataset_text(traj, comment).encode())


def load_dataset(path, expected_T: float = NOMINAL_T, tol: float = 1e-6) -> Trajectory:
    """Parse a dataset file; errors name the offending line."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    lineno = 0
    while lineno < len(lines) and lines[lineno].startswith("#"):
        lineno += 1
    if lineno >= len(lines):
        raise DatasetError(f"{path}: no header row")
    header = tuple(h.strip() for h in lines[lineno].split(","))
    if header not in (IMU_COLUMNS, IMU_COLUMNS + TRUTH_COLUMNS):
        raise DatasetError(f"{path}: row {lineno + 1}: unexpected header {','.join(header)}")
    ncol = len(header)
    rows = []
    for i, line in enumerate(csv.reader(lines[lineno + 1 :]), start=lineno + 2):
        if not line:
            continue
        if len(line) != ncol:
            raise DatasetError(f"{path}: row {i}: expected {ncol} columns, found {len(line)}")
        try:
            vals = [float(v) for v in line]
        except ValueError:
            raise DatasetError(f"{path}: row {i}: non-numeric field") from None
        if not all(math.isfinite(v) for v in vals):
            raise DatasetError(f"{path}: row {i}: NaN or infinite value")
        if rows and not vals[0] > rows[-1][1][0]:
            raise DatasetError(f"{path}: row {i}: time is not strictly increasing")
        if ncol == 14 and abs(math.sqrt(sum(v * v for v in vals[10:])) - 1.0) > 1e-6:
            raise DatasetError(f"{path}: row {i}: quaternion is not unit length")
        rows.append((i, vals))
    if len(rows) < 2:
        raise DatasetError(f"{path}: need at least two samples")
    data = np.array([v for _, v in rows])
    t = data[:, 0]
    dt = np.diff(t)
    T = (t[-1] - t[0]) / (len(t) - 1)
    off = np.abs(dt - T)
    if np.max(off) > tol:
        bad = int(np.argmax(off)) + 1
        raise DatasetError(f"{path}: row {rows[bad][0]}: sample grid is not uniform")
    if abs(T - expected_T) > tol:
        raise DatasetError(f"{path}: sample period {T:.9g} s differs from {expected_T} s")
    return Trajectory(
        t=t,
        q_true=data[:, 10:14].copy() if ncol == 14 else None,
        omega=None,
        gyro=data[:, 1:4].copy(),
        acc=data[:, 4:7].copy(),
        mag=data[:, 7:10].copy(),
        T=float(expected_T),
    )


# -- splits ------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Sample-index windows ``train = [train_start, train_stop)``, ``infer = [train_stop, infer_stop)``."""

    train_start: int
    train_stop: int
    infer_stop: int
    episode_len: int = 1000

    def __post_init__(self):
        if not 0 <= self.train_start < self.train_stop <= self.infer_stop:
            raise ValueError("windows must be ordered and non-empty")
        if self.episode_len < 1:
            raise ValueError("episode length must be positive")

    @classmethod
    def halves(cls, n: int, episode_len: int = 1000) -> "SplitSpec":
        return cls(0, n // 2, n, episode_len)

    def check(self, n: int) -> None:
        if self.infer_stop > n:
            raise ValueError(f"split reaches sample {self.infer_stop} but the file has {n}")

    def train(self, traj: Trajectory) -> Trajectory:
        self.check(len(traj))
        return traj.window(self.train_start, self.train_stop)

    def infer(self, traj: Trajectory) -> Trajectory:
        self.check(len(traj))
        return traj.window(self.train_stop, self.infer_stop)


def sample_episode(traj: Trajectory, split: SplitSpec, length: int | None, rng: np.random.Generator) -> Trajectory:
    """Uniformly placed contiguous slice of ``length`` samples inside the train window."""
    length = split.episode_len if length is None else int(length)
    split.check(len(traj))
    room = split.train_stop - split.train_start - length
    if room < 0:
        raise ValueError(f"train window holds {split.train_stop - split.train_start} samples, need {length}")
    start = split.train_start + int(rng.integers(0, room + 1))
    return traj.window(start, start + length)


# -- synthetic stand-in for a recorded dataset --------------------------------------

SYNTHETIC_NOTE = "synthetic stand-in dataset generated by the lrloe simulator, not a real recording"

SYNTHETIC_PROFILE = ProfileSpec(
    "sinusoid-sum",
    amplitudes=((0.6, 0.1, 0.0), (0.0, 0.5, 0.2), (0.1, 0.0, 0.8), (0.3, 0.3, 0.3)),
    frequencies=(0.07, 0.13, 0.11, 0.37),
    duration=100.0,
    name="synthetic-recording",
)


def synthetic_dataset(
    seed: int = 0,
    duration: float = 100.0,
    noise: NoiseConfig | None = None,
    world: WorldConfig | None = None,
) -> Trajectory:
    """Handheld-like motion with a non-trivial start attitude, sampled at 100 Hz."""
    world = world or WorldConfig()
    noise = noise or NoiseConfig()
    spec = dataclasses.replace(SYNTHETIC_PROFILE, duration=float(duration))
    q0 = quat.from_euler_zyx(np.radians([30.0, 10.0, -5.0]))
    omega = generate_profile(spec, world.T)
    q_true = integrate(q0, omega, world.T)
    return with_noise(q_true, omega, world, noise, derive_rng(seed, 7))


# -- configs ------------------------------------------------------------------------


def config_dict(cfg) -> dict:
    return {"version": CONFIG_VERSION, "trainer": cfg.to_dict()}


def save_config(cfg, path) -> None:
    """Write every field, defaults included, so the file alone reproduces a run."""
    _atomic_write(path, (json.dumps(config_dict(cfg), indent=2, sort_keys=True) + "\n").encode())


def parse_config(obj: dict, overrides: dict | None = None):
    from .train import TrainerConfig

    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(obj) - {"version", "trainer"}
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    if obj.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {obj.get('version')!r}")
    fields = dict(obj.get("trainer", {}))
    fields.update(overrides or {})
    known = {f.name for f in dataclasses.fields(TrainerConfig)}
    unknown = set(fields) - known
    if unknown:
        raise ConfigError(f"unknown trainer keys: {sorted(unknown)}")
    try:
        return TrainerConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: dict | None = None):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(obj, overrides)


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(data: bytes, path) -> None:
    _atomic_write(path, data)


def load_checkpoint(path):
    """Returns ``(agent, meta)``; raises :class:`lrloe.nn.CheckpointError` on corruption."""
    from .train import Agent

    return Agent.from_bytes(Path(path).read_bytes())


# -- training logs ----------------------------------------------------------------------

LOG_COLUMNS = ("step", "episode_cost", "drift", "lambda", "alpha", "validation")


def training_log_text(records: list[dict]) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for r in records:
        lines.append(",".join([str(int(r["step"]))] + [_fmt(r[c]) for c in LOG_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def read_training_log(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DatasetError(f"{path}: no data")
    missing = set(LOG_COLUMNS) - set(rows[0])
    if missing:
        raise DatasetError(f"{path}: missing columns {sorted(missing)}")
    return {c: np.array([float(r[c]) for r in rows]) for c in LOG_COLUMNS}
