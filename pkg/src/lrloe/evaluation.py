"""Monte-Carlo evaluation: Euler/geodesic RMSE, divergence counts and comparison reports.

Every method sees exactly the same data: run ``i`` of a comparison draws its
measurement noise from ``derive_rng(seed, i, 0)`` and its initial estimate
perturbation from ``derive_rng(seed, i, 1)``, whatever methods are included
and however the runs are chunked across workers.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import quat
from .baselines import CfState, EkfState, UkfState, cf_step, ekf_step, quat_mean, run_filter, ukf_step
from .diagnostics import Envelope, fit_envelope, mean_square_curve
from .estimator import ZeroGain, error_state, run
from .sensors import NoiseConfig, ProfileSpec, Trajectory, WorldConfig, derive_rng, generate_profile, integrate, with_noise

DIVERGENCE_ANGLE = 90.0  # degrees
DIVERGENCE_TIME = 1.0  # seconds
CHUNK = 25  # runs per work unit; fixed so results never depend on --jobs
METHODS = ("lrloe", "ekf", "ukf", "cf", "openloop")


def wrap_deg(d):
    """Wrap angles in degrees to ``(-180, 180]``."""
    return -((180.0 - np.asarray(d, dtype=float)) % 360.0 - 180.0)


@dataclass
class RunResult:
    t: np.ndarray
    q_true: np.ndarray  # (N, 4)
    q_est: np.ndarray  # (N, 4)

    def __post_init__(self):
        if len(self.t) == 0:
            raise ValueError("empty run")
        if not len(self.t) == len(self.q_true) == len(self.q_est):
            raise ValueError("run arrays differ in length")

    @property
    def error_angle(self) -> np.ndarray:
        """Geodesic error in degrees at each step."""
        return np.degrees(quat.geodesic(self.q_true, self.q_est))

    @property
    def rmse(self) -> np.ndarray:
        return rmse_euler(self)


def euler_deg(q):
    return np.degrees(quat.to_euler_zyx(q))


def rmse_euler(run: RunResult) -> np.ndarray:
    """Per-axis ``(yaw, pitch, roll)`` RMSE in degrees with wrapped differences."""
    d = wrap_deg(euler_deg(run.q_est) - euler_deg(run.q_true))
    return np.sqrt(np.mean(d * d, axis=-2))


def rmse_euler_batch(q_true: np.ndarray, q_est: np.ndarray) -> np.ndarray:
    d = wrap_deg(euler_deg(q_est) - euler_deg(q_true))
    return np.sqrt(np.mean(d * d, axis=-2))


def longest_excursion(angle_deg: np.ndarray, threshold: float = DIVERGENCE_ANGLE) -> np.ndarray:
    """Longest run of consecutive samples above ``threshold`` along the last axis."""
    above = np.asarray(angle_deg) > threshold
    best = np.zeros(above.shape[:-1], dtype=int)
    cur = np.zeros_like(best)
    for k in range(above.shape[-1]):
        cur = np.where(above[..., k], cur + 1, 0)
        best = np.maximum(best, cur)
    return best


def diverged(angle_deg: np.ndarray, T: float, threshold=DIVERGENCE_ANGLE, duration=DIVERGENCE_TIME) -> np.ndarray:
    """Runs whose error stays above ``threshold`` degrees for more than ``duration`` seconds."""
    angle_deg = np.asarray(angle_deg, dtype=float)
    bad = ~np.all(np.isfinite(angle_deg), axis=-1)
    angle_deg = np.where(np.isfinite(angle_deg), angle_deg, 180.0)
    return bad | (longest_excursion(angle_deg, threshold) * T > duration)


# -- methods -----------------------------------------------------------------------


@dataclass
class MethodSpec:
    """Picklable description of an estimator; ``policy`` holds checkpoint bytes."""

    name: str
    policy: bytes | None = None
    filter_noise: NoiseConfig | None = None
    init_std: float = 0.1
    k_acc: float = 0.01
    k_mag: float = 0.005
    deterministic: bool = True


def run_method(spec: MethodSpec, gyro, meas, q_hat0, world: WorldConfig, noise: NoiseConfig, rng=None):
    """Estimates ``(runs, N, 4)`` plus a per-run flag for covariance blow-up."""
    runs = gyro.shape[0]
    flags = np.zeros(runs, dtype=bool)
    fnoise = spec.filter_noise or noise
    if spec.name == "openloop":
        q, _ = run(q_hat0, gyro, meas, ZeroGain(), world)
    elif spec.name == "lrloe":
        from .train import Agent, PolicyGain

        if spec.policy is None:
            raise ValueError("lrloe needs a checkpoint")
        agent, _ = Agent.from_bytes(spec.policy)
        q, _ = run(q_hat0, gyro, meas, PolicyGain(agent.policy, rng), world, deterministic=spec.deterministic)
    elif spec.name == "ekf":
        st = EkfState.initial(q_hat0, fnoise, world.T, spec.init_std, strict=False)
        q, st = run_filter(ekf_step, st, gyro, meas, world)
        flags = np.broadcast_to(st.diverged, (runs,)).copy()
    elif spec.name == "ukf":
        st = UkfState.initial(q_hat0, fnoise, world.T, spec.init_std, strict=False)
        q, st = run_filter(ukf_step, st, gyro, meas, world)
        flags = np.broadcast_to(st.diverged, (runs,)).copy()
    elif spec.name == "cf":
        q, _ = run_filter(cf_step, CfState(quat.normalize(q_hat0), spec.k_acc, spec.k_mag), gyro, meas, world)
    else:
        raise ValueError(f"unknown method {spec.name!r}; choose from {', '.join(METHODS)}")
    return q, flags


# -- Monte Carlo ----------------------------------------------------------------


@dataclass
class MethodStats:
    yaw: tuple
    pitch: tuple
    roll: tuple
    geodesic: tuple
    cost: tuple
    diverged: int
    runs: int


@dataclass
class ComparisonReport:
    profile: str
    noise: NoiseConfig
    n_runs: int
    methods: dict = field(default_factory=dict)
    per_run: dict = field(default_factory=dict)  # name -> array (runs, 7)
    curves: dict = field(default_factory=dict)  # name -> (mean, se) of |eta_t|²

    RUN_COLUMNS = ("yaw", "pitch", "roll", "geodesic", "cost", "diverged", "filter_flag")
    COLUMNS = (
        "method", "yaw_mean", "yaw_std", "pitch_mean", "pitch_std", "roll_mean", "roll_std",
        "geodesic_mean", "geodesic_std", "cost_mean", "cost_std", "diverged", "runs",
    )

    def summary_rows(self) -> list[list]:
        rows = []
        for name, st in self.methods.items():
            rows.append([name, *st.yaw, *st.pitch, *st.roll, *st.geodesic, *st.cost, st.diverged, st.runs])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.summary_rows():
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method", "run", *self.RUN_COLUMNS))
        for name, arr in self.per_run.items():
            for i, row in enumerate(arr):
                w.writerow([name, i, *(repr(float(v)) for v in row[:5]), int(row[5]), int(row[6])])
        return buf.getvalue()


def _stat(x) -> tuple:
    x = np.asarray(x, dtype=float)
    return float(np.mean(x)), float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def aggregate(per_run: np.ndarray) -> MethodStats:
    """Summary statistics of one method's per-run table (columns as ``RUN_COLUMNS``)."""
    return MethodStats(
        yaw=_stat(per_run[:, 0]),
        pitch=_stat(per_run[:, 1]),
        roll=_stat(per_run[:, 2]),
        geodesic=_stat(per_run[:, 3]),
        cost=_stat(per_run[:, 4]),
        diverged=int(np.sum(per_run[:, 5] > 0)),
        runs=len(per_run),
    )


@dataclass
class SimScenario:
    """Fresh measurement noise per run on one simulated truth trajectory."""

    profile: ProfileSpec
    noise: NoiseConfig
    init_std: float = 0.1
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    q0: np.ndarray | None = None

    @property
    def name(self) -> str:
        return self.profile.name or self.profile.kind

    def truth(self):
        omega = generate_profile(self.profile, self.world.T)
        q0 = quat.IDENTITY if self.q0 is None else quat.normalize(self.q0)
        return integrate(q0, omega, self.world.T), omega

    def draw(self, indices):
        """``(gyro, meas, q_true, q_hat0)`` stacked over the given run indices."""
        q_true, omega = self.truth()
        trajs = [with_noise(q_true, omega, self.world, self.noise, derive_rng(self.seed, i, 0)) for i in indices]
        q0 = np.stack([perturbed_start(q_true[0], self.init_std, derive_rng(self.seed, i, 1)) for i in indices])
        gyro = np.stack([t.gyro for t in trajs])
        meas = np.stack([t.measurements for t in trajs])
        return gyro, meas, np.broadcast_to(q_true, (len(indices),) + q_true.shape), q0


@dataclass
class ReplayScenario:
    """One recorded trajectory replayed with a different initial estimate per run.

    ``init_std=None`` starts every run from the attitude solved from the first
    accelerometer/magnetometer sample instead.
    """

    traj: Trajectory
    noise: NoiseConfig
    init_std: float | None = 0.01
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    name: str = "recording"

    def draw(self, indices):
        n = len(indices)
        tr = self.traj
        if self.init_std is None:
            q_start = attitude_from_vectors(tr.acc[0], tr.mag[0], self.world)
            q0 = np.tile(q_start, (n, 1))
        else:
            if tr.q_true is None:
                raise ValueError("a perturbed start needs ground truth; use the measurement start instead")
            q0 = np.stack([perturbed_start(tr.q_true[0], self.init_std, derive_rng(self.seed, i, 1)) for i in indices])
        gyro = np.broadcast_to(tr.gyro, (n,) + tr.gyro.shape)
        meas = np.broadcast_to(tr.measurements, (n,) + tr.gyro.shape[:-1] + (6,))
        q_true = None if tr.q_true is None else np.broadcast_to(tr.q_true, (n,) + tr.q_true.shape)
        return gyro, meas, q_true, q0


def perturbed_start(q_true0, std: float, rng: np.random.Generator) -> np.ndarray:
    eps = std * rng.standard_normal(3)
    return quat.hamilton(quat.rotvec_quat(eps), q_true0)


def attitude_from_vectors(y_acc, y_mag, world: WorldConfig) -> np.ndarray:
    """Body-to-navigation attitude from one accelerometer/magnetometer pair (TRIAD)."""

    def frame(a, b):
        e1 = a / np.linalg.norm(a)
        e2 = np.cross(a, b)
        e2 = e2 / np.linalg.norm(e2)
        return np.column_stack([e1, e2, np.cross(e1, e2)])

    body = frame(-np.asarray(y_acc, dtype=float), np.asarray(y_mag, dtype=float))
    nav = frame(world.g_n, world.m_n)
    return rotation_to_quat(nav @ body.T)


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation matrix, picking the best-conditioned branch."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    cands = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    k = int(np.argmax(cands))
    if k == 0:
        w = 0.5 * math.sqrt(1.0 + tr)
        q = [w, (R[2, 1] - R[1, 2]) / (4 * w), (R[0, 2] - R[2, 0]) / (4 * w), (R[1, 0] - R[0, 1]) / (4 * w)]
    else:
        i = k - 1
        j, m = (i + 1) % 3, (i + 2) % 3
        r = math.sqrt(1.0 + R[i, i] - R[j, j] - R[m, m])
        v = np.zeros(3)
        v[i] = 0.5 * r
        v[j] = (R[j, i] + R[i, j]) / (2 * r)
        v[m] = (R[m, i] + R[i, m]) / (2 * r)
        q = [(R[m, j] - R[j, m]) / (2 * r), *v]
    return quat.canonical(quat.normalize(np.array(q)))


def _evaluate_chunk(args):
    specs, scenario, indices, keep = args
    gyro, meas, qt, q0 = scenario.draw(indices)
    world = scenario.world
    out = {}
    for spec in specs:
        rng = derive_rng(scenario.seed, indices[0], 2)
        q, flags = run_method(spec, gyro, meas, q0, world, scenario.noise, rng)
        if qt is None:
            out[spec.name] = (None, None, q if keep else None)
            continue
        err = error_state(qt, q)
        sq = np.sum(err * err, axis=-1)
        angle = np.degrees(quat.geodesic(qt, q))
        rm = rmse_euler_batch(qt, q)
        geo = np.sqrt(np.mean(angle**2, axis=-1))
        cost = np.mean(np.minimum(sq[:, 1:], math.pi**2), axis=-1)
        div = diverged(angle, world.T) | flags
        table = np.column_stack([rm, geo, cost, div.astype(float), flags.astype(float)])
        out[spec.name] = (table, sq, q if keep else None)
    return out


def evaluate(specs: list[MethodSpec], scenario, n_runs: int, jobs: int = 1, keep_estimates: bool = False):
    """Run every method on runs ``0..n_runs-1`` of ``scenario``.

    Returns ``(report, estimates)``; ``estimates`` maps method names to
    ``(runs, N, 4)`` arrays when ``keep_estimates`` is set.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate method names")
    chunks = [list(range(i, min(i + CHUNK, n_runs))) for i in range(0, n_runs, CHUNK)]
    work = [(specs, scenario, idx, keep_estimates) for idx in chunks]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_evaluate_chunk, work))
    else:
        parts = [_evaluate_chunk(w) for w in work]
    report = ComparisonReport(scenario.name, scenario.noise, n_runs)
    estimates = {}
    for name in names:
        if keep_estimates:
            estimates[name] = np.concatenate([p[name][2] for p in parts])
        if parts[0][name][0] is None:
            continue
        table = np.concatenate([p[name][0] for p in parts])
        sq = np.concatenate([p[name][1] for p in parts])
        report.per_run[name] = table
        report.methods[name] = aggregate(table)
        se = sq.std(axis=0, ddof=1) / np.sqrt(len(sq)) if len(sq) > 1 else np.zeros(sq.shape[-1])
        report.curves[name] = (sq.mean(axis=0), se)
    return report, estimates


def monte_carlo(
    specs: list[MethodSpec],
    profile: ProfileSpec,
    noise: NoiseConfig,
    n_runs: int = 200,
    seed: int = 0,
    world: WorldConfig | None = None,
    init_std: float = 0.1,
    q0=None,
    jobs: int = 1,
) -> ComparisonReport:
    """Evaluate each method on ``n_runs`` shared noise realisations of ``profile``."""
    scenario = SimScenario(profile, noise, init_std, seed, world or WorldConfig(), q0)
    return evaluate(specs, scenario, n_runs, jobs)[0]


def read_runs_csv(text: str) -> dict[str, np.ndarray]:
    """Parse :meth:`ComparisonReport.runs_csv` back into per-method tables."""
    rows = list(csv.DictReader(io.StringIO(text)))
    out: dict[str, list] = {}
    for r in rows:
        out.setdefault(r["method"], []).append([float(r[c]) for c in ComparisonReport.RUN_COLUMNS])
    return {k: np.array(v) for k, v in out.items()}


# -- boundedness -----------------------------------------------------------------


def boundedness_report(errors: np.ndarray, z: float = 2.0, min_coverage: float = 0.95) -> Envelope:
    """Envelope fit to the mean-square error curve of runs shaped ``(runs, N, 3)``."""
    errors = np.asarray(errors, dtype=float)
    if errors.ndim != 3 or errors.shape[0] < 10:
        raise ValueError("need at least 10 runs shaped (runs, N, 3)")
    mean, se = mean_square_curve(errors)
    return fit_envelope(mean, se, z=z, min_coverage=min_coverage)


def drastic_comparison(
    checkpoint: bytes,
    profile: ProfileSpec,
    noise: NoiseConfig,
    n_runs: int = 50,
    seed: int = 0,
    world: WorldConfig | None = None,
    init_std: float = 0.1,
    jobs: int = 1,
) -> ComparisonReport:
    """Learned estimator, the three baselines and the open-loop control on one profile."""
    specs = [
        MethodSpec("lrloe", policy=checkpoint, init_std=init_std),
        MethodSpec("ekf", init_std=init_std),
        MethodSpec("ukf", init_std=init_std),
        MethodSpec("cf"),
        MethodSpec("openloop"),
    ]
    return monte_carlo(specs, profile, noise, n_runs, seed, world, init_std, jobs=jobs)


def mean_trace(q_est: np.ndarray) -> np.ndarray:
    """Per-step equal-weight quaternion mean over runs ``(runs, N, 4) -> (N, 4)``."""
    q = np.swapaxes(np.asarray(q_est, dtype=float), 0, 1)
    w = np.full(q.shape[1], 1.0 / q.shape[1])
    mean, _ = quat_mean(q, w, init=q[:, 0])
    return quat.canonical(mean)
