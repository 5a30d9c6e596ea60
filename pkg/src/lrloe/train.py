"""Lyapunov-constrained soft actor-critic for learning the estimator gain.

The environment is the closed-loop estimator of :mod:`lrloe.estimator` run
against simulated (or recorded) sensor data. The state is the last applied
correction ``eta_hat_t``, the action is the flattened 3x6 gain ``K_{t+1}``
and the cost is the squared rotation-vector error ``|eta_{t+1}|²`` against
ground truth.

One critic ``L(s, a) = f^T f`` is regressed onto the discounted cost-to-go
and doubles as the Lyapunov candidate. The policy minimises::

    J = E[ alpha (ln pi(a~|s) + H) + lam (ln L(s', a'~) - ln L(s, a) + alpha2) ]

with reparameterised ``a~ ~ pi(.|s)`` and ``a'~ ~ pi(.|s')``, and the
multipliers ``lam`` and ``alpha`` follow projected dual ascent.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import estimator, quat
from .dataio import SplitSpec, sample_episode
from .diagnostics import drift_statistic, fit_envelope, mean_square_curve
from .estimator import ACTION_DIM, MEAS_DIM, STATE_DIM, EstimatorState
from .nn import Adam, GaussianPolicy, LyapunovCritic, pack_tensors, soft_update, unpack_tensors
from .sensors import (
    NoiseConfig,
    ProfileSpec,
    Trajectory,
    WorldConfig,
    derive_rng,
    get_profile,
    integrate,
    generate_profile,
    with_noise,
)

log = logging.getLogger(__name__)

COST_CAP = math.pi**2


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    # standard estimator hyperparameters
    horizon: int = 1000
    batch: int = 256
    lr_actor: float = 1e-4
    lr_critic: float = 3e-4
    lr_lyapunov: float = 3e-4
    tau: float = 5e-3
    gamma: float = 0.999
    hidden: tuple = (128, 64, 32)
    # our choices
    alpha2: float = 0.01
    entropy_target: float = -80.0
    lr_lambda: float = 1e-5
    lr_alpha: float = 3e-4
    lambda_init: float = 1.0
    alpha_init: float = 1e-3
    alpha_min: float = 1e-8
    total_steps: int = 100_000
    warmup_steps: int = 1000
    # critic-only updates after warmup before the policy starts moving
    critic_lead: int = 2000
    replay_capacity: int = 10_000
    eval_every: int = 5000
    validation_episodes: int = 5
    validation_fraction: float = 0.2
    seed: int = 0
    # per-entry gain bounds for the accelerometer and magnetometer columns
    gain_bound_acc: float = 0.05
    gain_bound_mag: float = 0.5
    state_scale: float = 0.1
    action_scale: float = 0.1
    log_std_init: float = -4.0
    mean_init_scale: float = 1e-3
    warmup_range: float = 0.02
    init_std: float = 0.1
    profile: str = "training"
    sigma_gyro: float = 0.0003
    sigma_acc: float = 0.0005
    sigma_mag: float = 0.0003

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if not self.alpha2 > 0.0:
            raise ValueError("alpha2 must be positive")
        if self.batch <= 0 or self.replay_capacity < self.batch:
            raise ValueError("replay capacity must hold at least one batch")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")

    @property
    def gain_bounds(self) -> np.ndarray:
        """Flattened (row-major 3x6) bound on each gain entry."""
        row = [self.gain_bound_acc] * 3 + [self.gain_bound_mag] * 3
        return np.tile(row, STATE_DIM)

    @property
    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.sigma_gyro, self.sigma_acc, self.sigma_mag, self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# -- replay memory ----------------------------------------------------------------


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    c: np.ndarray
    s2: np.ndarray
    done: np.ndarray


class ReplayMemory:
    """Fixed-capacity ring of transitions ``(s, a, c, s', terminal)``."""

    def __init__(self, capacity: int, state_dim: int = STATE_DIM, action_dim: int = ACTION_DIM):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, state_dim))
        self.a = np.zeros((self.capacity, action_dim))
        self.c = np.zeros(self.capacity)
        self.s2 = np.zeros((self.capacity, state_dim))
        self.done = np.zeros(self.capacity)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, c, s2, done) -> None:
        values = (np.asarray(s), np.asarray(a), float(c), np.asarray(s2))
        if not all(np.all(np.isfinite(v)) for v in values):
            raise ValueError("refusing to store a non-finite transition")
        if c < 0.0:
            raise ValueError("cost must be nonnegative")
        i = self._next
        self.s[i], self.a[i], self.c[i], self.s2[i], self.done[i] = s, a, c, s2, float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator) -> Batch:
        if batch > self.size:
            raise ValueError("not enough transitions for a batch")
        idx = rng.choice(self.size, size=batch, replace=False)
        return Batch(self.s[idx], self.a[idx], self.c[idx], self.s2[idx], self.done[idx])


# -- environment ----------------------------------------------------------------


class SimulatedData:
    """Fresh noise realisation of a fixed truth trajectory on every draw."""

    def __init__(self, spec: ProfileSpec, world: WorldConfig, noise: NoiseConfig, q0=None):
        self.world = world
        self.noise = noise
        self.omega = generate_profile(spec, world.T)
        self.q_true = integrate(quat.IDENTITY if q0 is None else q0, self.omega, world.T)

    def draw(self, rng: np.random.Generator) -> Trajectory:
        return with_noise(self.q_true, self.omega, self.world, self.noise, rng)


class RecordedData:
    """A single recorded trajectory, returned unchanged on every draw."""

    def __init__(self, traj: Trajectory):
        if traj.q_true is None:
            raise ValueError("training needs ground-truth orientation")
        self.traj = traj

    def draw(self, rng: np.random.Generator) -> Trajectory:
        return self.traj


def perturb(q_true: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    """``rotvec_quat(eps) ⊙ q_true`` with ``eps ~ N(0, std² I₃)``."""
    eps = std * rng.standard_normal(np.shape(q_true)[:-1] + (3,))
    if std == 0.0:
        return np.array(q_true, dtype=float)
    return quat.hamilton(quat.rotvec_quat(eps), q_true)


@dataclass
class Episode:
    traj: Trajectory
    state: EstimatorState
    horizon: int


class ErrorEnv:
    """Orientation-error MDP over the training part of each drawn trajectory."""

    def __init__(self, data, world: WorldConfig, horizon: int, init_std: float, validation_fraction: float = 0.2):
        self.data = data
        self.world = world
        self.horizon = int(horizon)
        self.init_std = float(init_std)
        self.validation_fraction = validation_fraction
        self.episode: Episode | None = None

    def split(self, n: int) -> int:
        return int(round((1.0 - self.validation_fraction) * n))

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        traj = self.data.draw(rng)
        n_train = self.split(len(traj))
        length = min(self.horizon + 1, n_train)
        if length < 2:
            raise ValueError("training window shorter than one step")
        ep = sample_episode(traj, SplitSpec(0, n_train, len(traj), length), length, rng)
        q0 = perturb(ep.q_true[0], self.init_std, rng)
        self.episode = Episode(ep, EstimatorState.initial(q0), length - 1)
        return self.episode.state.eta_hat.copy()

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        ep = self.episode
        if ep is None:
            raise RuntimeError("reset the environment first")
        k = ep.state.t
        provider = estimator.ConstantGain(np.reshape(action, (STATE_DIM, MEAS_DIM)), k_max=np.inf)
        y = np.concatenate([ep.traj.acc[k + 1], ep.traj.mag[k + 1]])
        # overflow is detected just below, so the floating-point warnings are noise
        with np.errstate(all="ignore"):
            new = estimator.step(ep.state, ep.traj.gyro[k], y, provider, self.world)
            eta = estimator.error_state(ep.traj.q_true[k + 1], new.q_hat)
        terminal = new.t >= ep.horizon
        if not (np.all(np.isfinite(new.q_hat)) and np.all(np.isfinite(new.eta_hat))):
            self.episode = None
            return ep.state.eta_hat.copy(), COST_CAP, True
        cost = float(min(eta @ eta, COST_CAP))
        ep.state = new
        return new.eta_hat.copy(), cost, terminal


# -- gain providers -----------------------------------------------------------


class PolicyGain:
    """Gain provider backed by a :class:`GaussianPolicy`."""

    def __init__(self, policy: GaussianPolicy, rng: np.random.Generator | None = None):
        self.policy = policy
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def provide(self, eta_hat, deterministic=False):
        eta_hat = np.asarray(eta_hat, dtype=float)
        if deterministic:
            a = self.policy.deterministic(eta_hat)
        else:
            a = self.policy.sample(eta_hat, self.rng).action
        return a.reshape(eta_hat.shape[:-1] + (STATE_DIM, MEAS_DIM))


class RecordingGain:
    """Wraps a provider and keeps every ``(eta_hat, K)`` it was asked for."""

    def __init__(self, inner):
        self.inner = inner
        self.states: list[np.ndarray] = []
        self.actions: list[np.ndarray] = []

    def provide(self, eta_hat, deterministic=False):
        K = self.inner.provide(eta_hat, deterministic)
        self.states.append(np.array(eta_hat, dtype=float))
        self.actions.append(np.array(K, dtype=float).reshape(K.shape[:-2] + (ACTION_DIM,)))
        return K


# -- updates ------------------------------------------------------------------


@dataclass
class LagrangeState:
    lam: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.lam < 0.0 or not self.alpha > 0.0:
            raise ValueError("need lam >= 0 and alpha > 0")


def critic_update(
    critic: LyapunovCritic,
    target: LyapunovCritic,
    policy: GaussianPolicy,
    batch: Batch,
    gamma: float,
    opt: Adam,
    tau: float,
    rng: np.random.Generator,
) -> float:
    """One Adam step on ``mean (L(s,a) - (c + gamma (1-done) L_target(s', a')))²``."""
    a2 = policy.sample(batch.s2, rng).action
    y = batch.c + gamma * (1.0 - batch.done) * target.value(batch.s2, a2)
    L, acts = critic.value(batch.s, batch.a, cache=True)
    diff = L - y
    loss = float(np.mean(diff * diff))
    grads, _, _ = critic.backward(acts, 2.0 * diff / len(diff))
    opt.step(grads)
    soft_update(target.params, critic.params, tau)
    return loss


def policy_objective(
    policy: GaussianPolicy,
    critic: LyapunovCritic,
    lagrange: LagrangeState,
    batch: Batch,
    alpha2: float,
    entropy_target: float,
    eps: np.ndarray,
):
    """Sampled objective, its parameter gradients and batch statistics.

    ``eps`` has shape ``(2B, action_dim)``: the first half drives ``a~`` at
    ``s``, the second half ``a'~`` at ``s'``.
    """
    n = len(batch.s)
    smp = policy.sample(np.concatenate([batch.s, batch.s2]), eps=eps)
    logp = smp.log_prob[:n]
    a_next = smp.action[n:]
    L_next, acts = critic.value(batch.s2, a_next, cache=True)
    L_cur = critic.value(batch.s, batch.a)
    drift = np.log(L_next) - np.log(L_cur)
    J = float(np.mean(lagrange.alpha * (logp + entropy_target) + lagrange.lam * (drift + alpha2)))
    _, _, g_a_next = critic.backward(acts, lagrange.lam / (n * L_next))
    g_action = np.concatenate([np.zeros((n, policy.action_dim)), g_a_next])
    g_logp = np.concatenate([np.full(n, lagrange.alpha / n), np.zeros(n)])
    grads = policy.backward(smp, g_action, g_logp)
    stats = {"drift": float(np.mean(drift)), "entropy": float(-np.mean(logp))}
    return J, grads, stats


def policy_update(
    policy: GaussianPolicy,
    critic: LyapunovCritic,
    lagrange: LagrangeState,
    batch: Batch,
    opt: Adam,
    alpha2: float,
    entropy_target: float,
    rng: np.random.Generator,
):
    eps = rng.standard_normal((2 * len(batch.s), policy.action_dim))
    J, grads, stats = policy_objective(policy, critic, lagrange, batch, alpha2, entropy_target, eps)
    opt.step(grads)
    return J, stats


def dual_update(
    lagrange: LagrangeState,
    drift: float,
    entropy: float,
    alpha2: float,
    entropy_target: float,
    lr_lambda: float,
    lr_alpha: float | None = None,
    alpha_min: float = 1e-8,
) -> LagrangeState:
    """Projected ascent: violated drift raises ``lam``; entropy below target raises ``alpha``."""
    lr_alpha = lr_lambda if lr_alpha is None else lr_alpha
    lam = max(0.0, lagrange.lam + lr_lambda * (drift + alpha2))
    alpha = max(alpha_min, lagrange.alpha + lr_alpha * (entropy_target - entropy))
    return LagrangeState(lam, alpha)


# -- agent & checkpoints -------------------------------------------------------


class Agent:
    def __init__(self, cfg: TrainerConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else derive_rng(cfg.seed, 1)
        self.cfg = cfg
        self.policy = GaussianPolicy(
            STATE_DIM,
            ACTION_DIM,
            cfg.hidden,
            k_max=cfg.gain_bounds,
            state_scale=cfg.state_scale,
            log_std_init=cfg.log_std_init,
            rng=rng,
            mean_scale=cfg.mean_init_scale,
        )
        self.critic = LyapunovCritic(
            STATE_DIM,
            ACTION_DIM,
            cfg.hidden[:-1],
            cfg.hidden[-1],
            state_scale=cfg.state_scale,
            action_scale=cfg.action_scale,
            rng=rng,
        )
        self.target = self.critic.copy()
        self.lagrange = LagrangeState(cfg.lambda_init, cfg.alpha_init)

    def gain(self, rng=None) -> PolicyGain:
        return PolicyGain(self.policy, rng)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("policy", self.policy.net), ("critic", self.critic.net), ("target", self.target.net)):
            for i, p in enumerate(net.params):
                out[f"{prefix}.{i}"] = p
        return out

    def to_bytes(self, extra: dict | None = None) -> bytes:
        meta = {
            "config": self.cfg.to_dict(),
            "lambda": self.lagrange.lam,
            "alpha": self.lagrange.alpha,
        }
        meta.update(extra or {})
        return pack_tensors(self.tensors(), meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["Agent", dict]:
        tensors, meta = unpack_tensors(data)
        cfg = TrainerConfig(**meta["config"])
        agent = cls(cfg, np.random.default_rng(0))
        for prefix, net in (("policy", agent.policy.net), ("critic", agent.critic.net), ("target", agent.target.net)):
            for i, p in enumerate(net.params):
                src = tensors[f"{prefix}.{i}"]
                if src.shape != p.shape:
                    raise ValueError(f"checkpoint tensor {prefix}.{i} has shape {src.shape}, expected {p.shape}")
                p[...] = src
        agent.lagrange = LagrangeState(meta["lambda"], meta["alpha"])
        return agent, meta

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.policy.params + self.critic.params + self.target.params]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, s in zip(self.policy.params + self.critic.params + self.target.params, snap):
            p[...] = s


# -- evaluation rollouts -------------------------------------------------------------


@dataclass
class Rollout:
    q_true: np.ndarray  # (runs, N, 4)
    q_est: np.ndarray  # (runs, N, 4)
    eta_hat: np.ndarray  # (runs, N, 3)
    states: np.ndarray  # (runs, N-1, 3) policy inputs
    actions: np.ndarray  # (runs, N-1, 18) chosen gains

    @property
    def errors(self) -> np.ndarray:
        return estimator.error_state(self.q_true, self.q_est)

    @property
    def costs(self) -> np.ndarray:
        """Per-step costs ``|eta_{t+1}|²``, shape ``(runs, N-1)``."""
        e = self.errors[:, 1:]
        return np.minimum(np.sum(e * e, axis=-1), COST_CAP)


def rollout(provider, trajs: list[Trajectory], q_hat0: np.ndarray, world: WorldConfig, deterministic=True) -> Rollout:
    """Run ``provider`` over equally long trajectories as one batch."""
    gyro = np.stack([t.gyro for t in trajs])
    meas = np.stack([t.measurements for t in trajs])
    q_true = np.stack([t.q_true for t in trajs])
    rec = RecordingGain(provider)
    q_est, eta_hat = estimator.run(q_hat0, gyro, meas, rec, world, deterministic)
    if rec.states:
        states = np.stack(rec.states, axis=-2)
        actions = np.stack(rec.actions, axis=-2)
    else:
        states = np.zeros(q_true.shape[:-2] + (0, STATE_DIM))
        actions = np.zeros(q_true.shape[:-2] + (0, ACTION_DIM))
    return Rollout(q_true, q_est, eta_hat, states, actions)


def validation_error(agent: Agent, env: ErrorEnv, episodes: int, seed: int) -> float:
    """Mean per-step cost of the deterministic policy on the held-out windows."""
    trajs, q0 = [], []
    for i in range(episodes):
        rng = derive_rng(seed, 99, i)
        traj = env.data.draw(rng)
        w = traj.window(env.split(len(traj)), len(traj))
        trajs.append(w)
        q0.append(perturb(w.q_true[0], env.init_std, rng))
    ro = rollout(agent.gain(), trajs, np.stack(q0), env.world, deterministic=True)
    return float(np.mean(ro.costs))


# -- training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    agent: Agent
    best_validation: float
    best_step: int
    log: list[dict] = field(default_factory=list)
    checkpoint: bytes = b""


def make_env(cfg: TrainerConfig, world: WorldConfig, data=None) -> ErrorEnv:
    if data is None:
        data = SimulatedData(get_profile(cfg.profile), world, cfg.noise)
    return ErrorEnv(data, world, cfg.horizon, cfg.init_std, cfg.validation_fraction)


def _check_finite(agent: Agent, step: int, stat: float) -> None:
    for p in agent.policy.params + agent.critic.params:
        if not np.all(np.isfinite(p)):
            raise TrainingDivergence(f"non-finite parameters at step {step} (last statistic {stat!r})")


def train(cfg: TrainerConfig, world: WorldConfig | None = None, data=None, progress: bool = False) -> TrainResult:
    """Collect-and-update loop; returns the agent restored to its best validation snapshot."""
    world = world or WorldConfig()
    env = make_env(cfg, world, data)
    agent = Agent(cfg, derive_rng(cfg.seed, 1))
    rng_env = derive_rng(cfg.seed, 2)
    rng_act = derive_rng(cfg.seed, 3)
    rng_upd = derive_rng(cfg.seed, 4)
    memory = ReplayMemory(min(cfg.replay_capacity, max(cfg.total_steps, cfg.batch)))
    opt_pi = Adam(agent.policy.params, cfg.lr_actor)
    opt_l = Adam(agent.critic.params, cfg.lr_lyapunov)

    best, best_step, best_snap = math.inf, -1, agent.snapshot()
    last_val = math.nan
    records: list[dict] = []
    ep_cost, ep_len, ep_drift, ep_updates = 0.0, 0, 0.0, 0
    s = env.reset(rng_env)
    t0 = time.time()
    for step in range(cfg.total_steps):
        if step < cfg.warmup_steps:
            a = cfg.gain_bounds * rng_act.uniform(-cfg.warmup_range, cfg.warmup_range, ACTION_DIM)
        else:
            a = agent.policy.sample(s, rng_act).action
        s2, c, done = env.step(a)
        memory.add(s, a, c, s2, done)
        ep_cost += c
        ep_len += 1
        s = s2

        if step >= cfg.warmup_steps and len(memory) >= cfg.batch:
            batch = memory.sample(cfg.batch, rng_upd)
            critic_update(agent.critic, agent.target, agent.policy, batch, cfg.gamma, opt_l, cfg.tau, rng_upd)
        if step >= cfg.warmup_steps + cfg.critic_lead and len(memory) >= cfg.batch:
            _, stats = policy_update(
                agent.policy, agent.critic, agent.lagrange, batch, opt_pi, cfg.alpha2, cfg.entropy_target, rng_upd
            )
            agent.lagrange = dual_update(
                agent.lagrange, stats["drift"], stats["entropy"], cfg.alpha2, cfg.entropy_target,
                cfg.lr_lambda, cfg.lr_alpha, cfg.alpha_min,
            )
            ep_drift += stats["drift"]
            ep_updates += 1

        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.total_steps:
            _check_finite(agent, step, ep_drift)
            last_val = validation_error(agent, env, cfg.validation_episodes, cfg.seed)
            if last_val < best:
                best, best_step, best_snap = last_val, step + 1, agent.snapshot()
            if progress:
                log.info("seed %d step %d val %.3g lam %.3g alpha %.3g (%.0fs)", cfg.seed, step + 1,
                         last_val, agent.lagrange.lam, agent.lagrange.alpha, time.time() - t0)

        if done:
            records.append(
                {
                    "step": step + 1,
                    "episode_cost": ep_cost / max(ep_len, 1),
                    "drift": ep_drift / ep_updates if ep_updates else math.nan,
                    "lambda": agent.lagrange.lam,
                    "alpha": agent.lagrange.alpha,
                    "validation": last_val,
                }
            )
            ep_cost, ep_len, ep_drift, ep_updates = 0.0, 0, 0.0, 0
            s = env.reset(rng_env)

    agent.restore(best_snap)
    result = TrainResult(agent, best, best_step, records)
    result.checkpoint = agent.to_bytes({"validation": best, "step": best_step})
    return result


def train_many(cfg: TrainerConfig, seeds, world: WorldConfig | None = None, data=None, progress=False):
    """Train one policy per seed; returns ``(results, index_of_lowest_validation)``."""
    results = [train(dataclasses.replace(cfg, seed=int(s)), world, data, progress) for s in seeds]
    best = int(np.argmin([r.best_validation for r in results]))
    return results, best


# -- drift diagnostic -------------------------------------------------------------


@dataclass
class DriftReport:
    drift: float
    alpha2: float
    satisfied: bool
    max_alpha2: float
    envelope: object
    ratio_hist: tuple


def drift_diagnostic(critic: LyapunovCritic, ro: Rollout, alpha2: float) -> DriftReport:
    """Empirical drift of ``ln L`` along rollouts plus the error envelope fit.

    ``L`` is evaluated at each visited ``(eta_hat_t, K_{t+1})``.
    """
    if ro.states.shape[-2] < 2:
        raise ValueError("rollouts need at least two policy steps")
    L = critic.value(ro.states, ro.actions)
    drift = drift_statistic(L)
    mean, se = mean_square_curve(ro.errors)
    env = fit_envelope(mean, se)
    sq = np.sum(ro.errors[:, :-1] ** 2, axis=-1)
    ratio = L / np.maximum(sq, 1e-12)
    hist = np.histogram(np.log10(ratio), bins=20)
    return DriftReport(drift, alpha2, drift <= -alpha2, -drift, env, hist)
