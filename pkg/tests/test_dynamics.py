import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import make_series
from pricecluster.errors import DomainError, FilterDivergenceError
from pricecluster.models import (
    BA_THETA,
    DPParams,
    ExogenousPolicy,
    FilterState,
    InitPolicy,
    MixtureParams,
    StaticParams,
)
from pricecluster.services import cluster_mixture as cm
from pricecluster.services import double_poisson as dp
from pricecluster.services import dynamics

NO_CLUSTERING = StaticParams(c=2.0, b=0.5, a=0.1, d=-0.2)


def random_walk(n, seed=5, start=10013):
    rng = np.random.default_rng(seed)
    return start + np.cumsum(rng.integers(-3, 4, size=n))


def state(alpha=2.0, eta=0.1, mu=10015.0):
    return FilterState(mu=mu, alpha=alpha, eta=eta, phi=(1.0, 0.0, 0.0))


def test_equal_strengths_give_equal_portions():
    theta = StaticParams(h5=1.0, h10=1.0)
    assert_allclose(dynamics.portions(0.0, theta), [1 / 3, 1 / 3, 1 / 3])


def test_portions_sum_to_one_and_increase_with_eta():
    eta = np.linspace(-30, 30, 61)
    phi = dynamics.portions(eta, BA_THETA)
    assert_allclose(phi.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.diff(phi[:, 0]) > 0)
    assert_allclose(np.exp(dynamics.log_portions(eta, BA_THETA)), phi, atol=1e-12)


def test_zero_strengths_leave_single_tick_only():
    phi = dynamics.portions(np.array([-5.0, 0.0, 5.0]), StaticParams())
    assert_allclose(phi, [[1, 0, 0]] * 3)


def test_step_fixed_point():
    theta = StaticParams(c=1.0, b=0.6)
    fixed = theta.c / (1 - theta.b)
    new = dynamics.filter_step(theta, state(alpha=fixed), 10015, 10013, 1.0, 1.0)
    assert_allclose(new.alpha, fixed, rtol=1e-12)


def test_step_with_unchanged_price_uses_half_score():
    theta = StaticParams(c=0.5, b=0.3, a=0.4, d=0.2)
    new = dynamics.filter_step(theta, state(), 10013, 10013, 1.5, 1.0)
    assert_allclose(new.alpha, 0.5 + 0.3 * 2.0 + 0.4 * 0.5 + 0.2 * math.log(1.5), rtol=1e-12)


def test_step_matches_hand_computation():
    st = state(alpha=2.0, eta=0.1)
    new = dynamics.filter_step(BA_THETA, st, 10015, 10013, 1.5, 0.8)
    s = math.exp(2.0) * (10015 * math.log(10013 / 10015) - 10013 + 10015) + 0.5
    alpha = 5.00 + 0.09 * 2.0 + 0.30 * s - 0.29 * math.log(1.5)
    log_mu = math.log(10015)
    eta = 0.39 * 0.1 - 0.14 * log_mu + 0.18 * (log_mu - alpha) + 0.03 * math.log(1.5) - 0.71 * math.log(0.8)
    assert new.mu == 10015.0
    assert_allclose(new.alpha, alpha, rtol=1e-12)
    assert_allclose(new.eta, eta, rtol=1e-12)
    assert_allclose(new.phi, dynamics.portions(eta, BA_THETA), rtol=1e-12)


def test_recursion_score_is_double_poisson_score():
    theta = StaticParams(a=1.0)
    st = state(alpha=1.3)
    new = dynamics.filter_step(theta, st, 10020, 10011, 1.0, 1.0)
    expected = dp.score(DPParams(mu=10011.0, alpha=1.3), 10020)[1]
    assert_allclose(new.alpha, expected, rtol=1e-12)


def test_step_rejects_nonpositive_inputs():
    with pytest.raises(DomainError):
        dynamics.filter_step(BA_THETA, state(), 10013, 10013, 0.0, 1.0)


def test_step_clamps_alpha_like_the_series_filter():
    theta = StaticParams(c=60.0, g2=0.3, h5=0.5, h10=0.5)
    ts = make_series([10013, 10014, 10013, 10015])
    mu, alpha, eta, clamped = dynamics.run_recursion(theta, ts)
    st = FilterState(mu=mu[2], alpha=alpha[2], eta=eta[2], phi=(1.0, 0.0, 0.0))
    new = dynamics.filter_step(theta, st, 10013, 10014, 1.0, 1.0)
    assert new.clamped and clamped[3]
    assert new.alpha == alpha[3] == 50.0
    assert_allclose(new.eta, eta[3], rtol=1e-12)

    low = dynamics.filter_step(StaticParams(c=-70.0), state(), 10013, 10013, 1.0, 1.0)
    assert low.alpha == -50.0 and low.clamped
    assert not dynamics.filter_step(BA_THETA, state(), 10015, 10013, 1.0, 1.0).clamped


def test_no_clustering_path_is_double_poisson():
    ts = make_series(random_walk(200))
    path = dynamics.filter_series(NO_CLUSTERING, ts)
    assert_allclose(path.phi[:, 0], 1.0)
    expected = [
        dp.log_pmf(DPParams(mu=path.mu[t], alpha=path.alpha[t]), int(ts.y[t]))
        for t in np.flatnonzero(path.contributes)
    ]
    assert_allclose(path.loglik_contrib[path.contributes], expected, atol=1e-8)


def test_loglik_is_sum_of_mixture_terms():
    ts = make_series(random_walk(150), z=np.linspace(0.5, 2.0, 150), v=np.linspace(50, 300, 150))
    path = dynamics.filter_series(BA_THETA, ts)
    total = 0.0
    for t in np.flatnonzero(path.contributes):
        phi = dict(zip((1, 5, 10), path.phi[t]))
        total += cm.mixture_log_lik(MixtureParams.build(path.mu[t], path.alpha[t], phi), int(ts.y[t]))
    assert_allclose(path.loglik_total, total, atol=1e-8 * len(ts))


def test_location_follows_previous_price():
    ts = make_series(random_walk(100))
    path = dynamics.filter_series(BA_THETA, ts)
    assert np.array_equal(path.mu[1:], ts.y[:-1].astype(float))
    assert path.mu[0] == ts.y[0]


def test_time_invariant_parameters():
    theta = StaticParams(c=3.0)
    path = dynamics.filter_series(theta, make_series(random_walk(50)))
    assert_allclose(path.alpha, 3.0)
    assert_allclose(path.eta, 0.0)


def test_burn_in_per_segment():
    n = 120
    segment = np.repeat([0, 1], [70, 50])
    ts = make_series(random_walk(n), segment=segment)
    path = dynamics.filter_series(BA_THETA, ts)
    assert path.n_contrib == n - 4
    assert not path.contributes[[0, 1, 70, 71]].any()
    assert path.mu[70] == ts.y[70]


def test_stationary_start():
    ts = make_series(random_walk(20))
    path = dynamics.filter_series(BA_THETA, ts)
    assert_allclose(path.alpha[:2], BA_THETA.c / (1 - BA_THETA.b))


def test_fixed_start():
    ts = make_series(random_walk(20))
    path = dynamics.filter_series(BA_THETA, ts, init=InitPolicy(kind="fixed", alpha0=4.0, eta0=1.5))
    assert path.alpha[0] == 4.0
    assert path.eta[0] == 1.5


def test_alpha_is_clamped(caplog):
    theta = StaticParams(c=200.0)
    path = dynamics.filter_series(theta, make_series(np.full(30, 10013)))
    assert path.clamped > 0
    assert np.all(np.abs(path.alpha) <= dynamics.ALPHA_BOUND)
    assert "clamped" in caplog.text


def test_divergence_reports_tick():
    theta = StaticParams(g1=1e308)
    with pytest.raises(FilterDivergenceError) as err:
        dynamics.filter_series(theta, make_series(random_walk(30)))
    assert err.value.t == 0


def test_short_series_rejected():
    with pytest.raises(DomainError):
        dynamics.filter_series(BA_THETA, make_series([10013, 10014]))


def test_simulation_is_deterministic():
    a = dynamics.simulate(BA_THETA, ExogenousPolicy(), 10013, 42, 200)
    b = dynamics.simulate(BA_THETA, ExogenousPolicy(), 10013, 42, 200)
    c = dynamics.simulate(BA_THETA, ExogenousPolicy(), 10013, 43, 200)
    assert np.array_equal(a.y, b.y)
    assert np.array_equal(a.z, b.z)
    assert np.array_equal(a.timestamps, b.timestamps)
    assert not np.array_equal(a.y, c.y)


def test_simulated_series_shape(simulated_series):
    ts = simulated_series
    assert len(ts) == 300
    assert ts.y[0] == 10013
    assert np.all(ts.y >= 1)
    assert np.all(np.diff(ts.timestamps.astype(np.int64)) > 0)
    assert_allclose(ts.z_std.mean(), 1.0)


def test_fixed_exogenous_policy():
    z = [1.0, 2.0, 3.0, 2.0]
    v = [100.0, 200.0, 100.0, 400.0]
    ts = dynamics.simulate(BA_THETA, ExogenousPolicy(kind="fixed", z=z, v=v), 10013, 1, 4)
    assert_allclose(ts.z, z)
    assert_allclose(ts.v, v)


def test_large_alpha_freezes_price():
    theta = StaticParams(c=14.0)
    ts = dynamics.simulate(theta, ExogenousPolicy(), 10013, 7, 2000)
    assert np.mean(ts.y[1:] == ts.y[:-1]) > 0.99


def test_session_timestamps_roll_to_next_business_day():
    z = np.array([0.0, dynamics.SESSION_SECONDS + 10.0])
    stamps = dynamics.session_timestamps(z)
    assert str(stamps[0]) == "2020-01-02T09:30:00.000000000"
    assert str(stamps[1]) == "2020-01-03T09:30:10.000000000"


def test_path_frame_columns(simulated_series):
    path = dynamics.filter_series(BA_THETA, simulated_series)
    frame = dynamics.path_to_frame(path, simulated_series)
    assert list(frame.columns) == [
        "t", "timestamp", "y", "mu", "alpha", "eta", "phi1", "phi5", "phi10", "loglik", "variance",
    ]
    assert len(frame) == len(simulated_series)
    assert frame["loglik"].isna().sum() == 2


@pytest.mark.slow
def test_no_strengths_give_no_excess_fives():
    theta = BA_THETA.model_copy(update={"h5": 0.0, "h10": 0.0})
    ts = dynamics.simulate(theta, ExogenousPolicy(), 10013, 3, 200_000)
    assert abs(cm.multiples_frequency(ts.y, 5) - 0.2) < 0.01


@pytest.mark.slow
def test_true_parameters_beat_perturbed():
    ts = dynamics.simulate(BA_THETA, ExogenousPolicy(), 10013, 11, 100_000)
    perturbed = BA_THETA.model_copy(update={"a": 0.5, "h5": 0.1})
    assert dynamics.filter_series(BA_THETA, ts).loglik_total > dynamics.filter_series(perturbed, ts).loglik_total
