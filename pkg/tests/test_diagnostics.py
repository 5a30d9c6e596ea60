import numpy as np
import pytest

from lrloe.diagnostics import drift_statistic, fit_envelope, mean_square_curve


def test_recovers_known_envelope():
    t = np.arange(1000)
    curve = 0.5 * 0.9**t + 0.001
    env = fit_envelope(curve)
    assert env.converged and env.satisfied
    # E₀ = 0.501, so the fitted eta multiplies E₀ back to 0.5
    assert env.eta * env.e0 == pytest.approx(0.5, rel=0.05)
    assert env.phi == pytest.approx(0.9, rel=0.05)
    assert env.p == pytest.approx(0.001, rel=0.05)


def test_recovers_envelope_from_noisy_runs():
    rng = np.random.default_rng(0)
    t = np.arange(600)
    truth = 0.3 * 0.98**t + 0.002
    # chi-square with 3 dof scaled so that E|e|² = truth
    errors = rng.standard_normal((400, 600, 3)) * np.sqrt(truth / 3)[None, :, None]
    mean, se = mean_square_curve(errors)
    env = fit_envelope(mean, se)
    assert env.satisfied
    assert env.phi == pytest.approx(0.98, rel=0.05)
    assert env.p == pytest.approx(0.002, rel=0.05)


def test_zero_curve_is_trivially_bounded():
    env = fit_envelope(np.zeros(50))
    assert env.p == 0.0 and env.satisfied


def test_growing_curve_is_not_bounded():
    # random-walk variance grows linearly in time
    env = fit_envelope(1e-3 + 1e-4 * np.arange(1000))
    assert not env.satisfied


def test_nonfinite_curve_flags_failure():
    curve = np.ones(10)
    curve[4] = np.nan
    env = fit_envelope(curve)
    assert not env.converged and not env.satisfied


def test_curve_validation():
    with pytest.raises(ValueError):
        fit_envelope(np.ones(2))


def test_mean_square_curve_single_run_has_zero_stderr():
    mean, se = mean_square_curve(np.ones((1, 5, 3)))
    assert np.array_equal(mean, np.full(5, 3.0)) and not se.any()


def test_drift_statistic():
    assert drift_statistic(np.full((4, 20), 2.0)) == pytest.approx(0.0, abs=1e-15)
    L = np.exp(-0.1 * np.arange(50))
    # ln mean(L[1:]) - mean ln(L[:-1]); computed directly
    expected = np.log(np.mean(L[1:])) - np.mean(np.log(L[:-1]))
    assert drift_statistic(L) == pytest.approx(expected, rel=1e-14)
    # every run halves its value in one step: ln mean(L/2) - mean ln L = ln(1/2) only without spread
    pair = np.array([[4.0, 2.0], [4.0, 2.0]])
    assert drift_statistic(pair) == pytest.approx(np.log(0.5), rel=1e-14)
    with pytest.raises(ValueError):
        drift_statistic(np.ones(1))
