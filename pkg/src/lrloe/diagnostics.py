"""Boundedness diagnostics: exponential envelope fits and the Lyapunov drift statistic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares


@dataclass(frozen=True)
class Envelope:
    """``E|η_t|² ≈ eta · E₀ · phi**t + p`` fitted to a mean-square error curve."""

    eta: float
    phi: float
    p: float
    e0: float
    converged: bool
    coverage: float
    satisfied: bool

    def __call__(self, t) -> np.ndarray:
        return self.eta * self.e0 * self.phi ** np.asarray(t, dtype=float) + self.p


def fit_envelope(curve, stderr=None, z: float = 2.0, min_coverage: float = 0.95) -> Envelope:
    """Least-squares fit of ``eta·E₀·phi^t + p`` with ``0 < phi < 1``, ``eta, p >= 0``.

    ``stderr`` is the Monte-Carlo standard error of each curve point; a step
    counts as bounded when ``curve[t] <= envelope(t) + z * stderr[t]``. The
    fit is satisfied when it converged, ``phi < 1`` and at least
    ``min_coverage`` of the steps are bounded. Without ``stderr`` the
    comparison is exact.
    """
    y = np.asarray(curve, dtype=float)
    if y.ndim != 1 or len(y) < 3:
        raise ValueError("need a 1-D curve with at least 3 points")
    if not np.all(np.isfinite(y)):
        return Envelope(np.nan, np.nan, np.nan, np.nan, False, 0.0, False)
    t = np.arange(len(y), dtype=float)
    e0 = float(y[0])
    scale = float(np.max(np.abs(y)))
    if scale == 0.0:
        return Envelope(0.0, 0.5, 0.0, 0.0, True, 1.0, True)
    yn = y / scale
    e0n = max(e0 / scale, 1e-12)

    def resid(x):
        eta, phi, p = x
        return eta * e0n * phi**t + p - yn

    tail = float(np.mean(yn[len(yn) // 2 :]))
    x0 = [max(1.0 - tail / e0n, 1e-3), 0.9, max(tail, 0.0)]
    res = least_squares(
        resid,
        x0,
        bounds=([0.0, 1e-9, 0.0], [np.inf, 1.0 - 1e-12, np.inf]),
        method="trf",
        x_scale="jac",
        xtol=1e-15,
        ftol=1e-15,
        gtol=1e-15,
        max_nfev=10000,
    )
    eta, phi, p_n = res.x
    env = Envelope(float(eta), float(phi), float(p_n * scale), e0, bool(res.success), 0.0, False)
    slack = 0.0 if stderr is None else z * np.asarray(stderr, dtype=float)
    bounded = y <= env(t) + slack + 1e-12 * scale
    coverage = float(np.mean(bounded))
    ok = env.converged and env.phi < 1.0 and coverage >= min_coverage
    return Envelope(env.eta, env.phi, env.p, e0, env.converged, coverage, bool(ok))


def mean_square_curve(errors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error over runs of ``|η_t|²`` for errors shaped ``(runs, N, 3)``."""
    sq = np.sum(np.asarray(errors, dtype=float) ** 2, axis=-1)
    n = sq.shape[0]
    mean = sq.mean(axis=0)
    se = sq.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


def drift_statistic(L: np.ndarray) -> float:
    """``ln mean L(s_{t+1}, a_{t+1}) - mean ln L(s_t, a_t)`` pooled over runs and steps.

    ``L`` has shape ``(runs, N+1)``: Lyapunov values along each rollout. The
    first mean runs over steps ``1..N``, the second over ``0..N-1``; both
    pool the runs, which plays the role of the time-averaged state
    distribution.
    """
    L = np.asarray(L, dtype=float)
    if L.ndim == 1:
        L = L[None, :]
    if L.shape[-1] < 2:
        raise ValueError("need at least one transition")
    return float(np.log(np.mean(L[:, 1:])) - np.mean(np.log(L[:, :-1])))
