import math

import numpy as np
import pytest
from scipy import integrate, stats

from rmstbart.errors import ConfigurationError, ParameterDomainError
from rmstbart.numerics import RngHandle
from rmstbart.sampler import SamplerConfig
from rmstbart.simulation import (
    MethodConfig,
    ScenarioConfig,
    aggregate,
    ar1_normal,
    coverage_metric,
    draw_survival,
    friedman_fn,
    gen_scenario,
    rmse_metric,
    run_simulation,
    true_rmst_gamma,
    true_rmst_mc,
    write_rows,
    RESULT_FIELDS,
)


def test_friedman_examples():
    assert friedman_fn(np.zeros(10)) == pytest.approx(5.0)
    assert friedman_fn(np.full(10, 0.5)) == pytest.approx(10 * math.sin(math.pi / 4) + 7.5)
    assert friedman_fn(np.full(10, 0.5)) == pytest.approx(14.5711, abs=1e-4)
    x = np.random.default_rng(0).random(10)
    y = x.copy()
    y[5:] = 0.123
    assert friedman_fn(x) == friedman_fn(y)
    with pytest.raises(ConfigurationError):
        friedman_fn(np.zeros(4))


@pytest.mark.parametrize("f,tol", [(5.0, 0.01), (14.571, 0.05)])
def test_draw_survival_mean(f, tol, rng):
    t = draw_survival(f, rng, size=10**6)
    assert np.all(t > 0)
    assert abs(t.mean() - f) < tol
    # the variance of Gamma(f(1+f), 1+f) is f / (1 + f)
    assert t.var() == pytest.approx(f / (1 + f), rel=0.02)


def test_draw_survival_domain(rng):
    with pytest.raises(ParameterDomainError):
        draw_survival(0.0, rng)


def test_true_rmst_quadrature():
    # independent check: integral of the survival function over (0, tau)
    for f in (1.0, 7.3):
        k, rate = f * (1 + f), 1 + f
        val, _ = integrate.quad(lambda t: stats.gamma.sf(t, k, scale=1 / rate), 0, 3.0, epsabs=1e-12)
        assert true_rmst_gamma(f, 3.0) == pytest.approx(val, abs=1e-9)


def test_true_rmst_limits():
    assert true_rmst_gamma(5.0, 1e4) == pytest.approx(5.0, abs=1e-10)
    for f in (1.0, 5.0, 20.0):
        for tau in (0.5, 10.0, 25.0):
            v = true_rmst_gamma(f, tau)
            assert 0 <= v <= min(f, tau) + 1e-12


@pytest.mark.parametrize("f", [1.0, 5.0, 10.0, 14.571, 15.0, 20.0])
@pytest.mark.parametrize("tau", [10.0, 25.0])
def test_true_rmst_matches_monte_carlo(f, tau):
    mean, se = true_rmst_mc(f, tau, RngHandle(17, (int(f * 10), int(tau))))
    exact = true_rmst_gamma(f, tau)
    if se == 0.0:
        # every draw exceeded tau; P(T < tau) < 3/N at 95% (rule of three)
        assert mean == tau and tau - exact < tau * 3e-6
    else:
        assert abs(mean - exact) < 3 * se


def test_true_rmst_vectorised():
    f = np.array([2.0, 12.0])
    np.testing.assert_allclose(true_rmst_gamma(f, 10.0), [true_rmst_gamma(2.0, 10.0), true_rmst_gamma(12.0, 10.0)])


def test_ar1_correlation():
    x = ar1_normal(10**5, 10, 0.5, RngHandle(3))
    assert abs(np.corrcoef(x[:, 0], x[:, 2])[0, 1] - 0.25) < 0.02
    assert abs(np.corrcoef(x[:, 4], x[:, 5])[0, 1] - 0.5) < 0.02
    assert abs(x[:, 9].var() - 1.0) < 0.02


@pytest.mark.parametrize("censoring,rate,band", [
    ("noninf", 0.1, (0.10, 0.20)),
    ("noninf", 0.2, (0.40, 0.50)),
    ("informative", 3.0, (0.40, 0.40)),
    ("informative", 1.0, (0.80, 0.80)),
])
def test_censoring_bands(censoring, rate, band):
    cfg = ScenarioConfig("friedman", n=1000, censoring=censoring, rate=rate, seed=5)
    fracs = [gen_scenario(cfg, RngHandle(5, (r,))).censor_rate for r in range(3)]
    frac = float(np.mean(fracs))
    assert band[0] - 0.07 <= frac <= band[1] + 0.07


def test_no_censoring():
    cfg = ScenarioConfig("friedman", n=200, censoring="none")
    scen = gen_scenario(cfg, RngHandle(1))
    assert scen.censor_rate == 0.0
    assert scen.train.events.all()


def test_abs_linear_scenario():
    cfg = ScenarioConfig("abs-linear", n=300, n_test=50, rate=0.5)
    scen = gen_scenario(cfg, RngHandle(2))
    assert cfg.tau == 5.0
    assert scen.train.covariates.shape == (300, 10)
    assert np.all(scen.truth <= 5.0) and np.all(scen.truth > 0)


def test_scenario_validation():
    with pytest.raises(ConfigurationError):
        ScenarioConfig(p=5)
    with pytest.raises(ConfigurationError):
        ScenarioConfig(family="linear")
    with pytest.raises(ParameterDomainError):
        ScenarioConfig(tau=-1.0)
    assert ScenarioConfig().tau == 25.0


def test_gen_scenario_deterministic():
    cfg = ScenarioConfig("friedman", n=100, n_test=20)
    a = gen_scenario(cfg, RngHandle(9, (0,)))
    b = gen_scenario(cfg, RngHandle(9, (0,)))
    np.testing.assert_array_equal(a.train.times, b.train.times)
    np.testing.assert_array_equal(a.truth, b.truth)


def test_rmse_examples():
    t = np.array([1.0, 2.0, 5.0])
    assert rmse_metric(t, t) == 0.0
    assert rmse_metric(t + 1, t) == pytest.approx(1.0)
    with pytest.raises(ConfigurationError):
        rmse_metric(t, t[:2])


def test_constant_predictor_rmse_is_truth_sd():
    t = np.random.default_rng(0).normal(size=500)
    assert rmse_metric(np.full(500, t.mean()), t) == pytest.approx(t.std())


def test_coverage_examples():
    t = np.array([1.0, 2.0, 3.0])
    assert coverage_metric(t - 1e9, t + 1e9, t) == 1.0
    assert coverage_metric(t, t, t) == 1.0
    assert coverage_metric(t + 1, t + 2, t) == 0.0
    assert coverage_metric([0.0, 0.0, 0.0], [1.5, 1.5, 1.5], t) == pytest.approx(1 / 3)
    with pytest.raises(ConfigurationError):
        coverage_metric([2.0], [1.0], [1.5])


def small_methods():
    s = SamplerConfig(H=10, n_iter=60, burn_in=20)
    return [MethodConfig("null", kind="null"), MethodConfig("bart", sampler=s)]


def test_run_simulation_rows_and_aggregate():
    cfg = ScenarioConfig("friedman", n=120, n_test=40, replications=2, seed=3)
    rows, times = run_simulation(cfg, small_methods())
    assert [(r["replication"], r["method"]) for r in rows] == [(0, "null"), (0, "bart"), (1, "null"), (1, "bart")]
    assert len(times) == 4
    assert math.isnan(rows[0]["coverage"]) and 0 <= rows[1]["coverage"] <= 1
    assert rows[1]["width"] > 0
    agg = aggregate(rows)
    assert [a["method"] for a in agg] == ["null", "bart"]
    assert agg[1]["mean_rmse"] == pytest.approx((rows[1]["rmse"] + rows[3]["rmse"]) / 2)


def test_replications_independent_of_method_list():
    cfg = ScenarioConfig("friedman", n=120, n_test=40, replications=1, seed=3)
    base, _ = run_simulation(cfg, small_methods())
    extra = MethodConfig("bart2", sampler=SamplerConfig(H=5, n_iter=40, burn_in=10))
    more, _ = run_simulation(cfg, small_methods() + [extra])
    only, _ = run_simulation(cfg, small_methods()[1:])
    assert more[1]["rmse"] == base[1]["rmse"]
    assert only[0]["censor_rate"] == base[0]["censor_rate"]


def test_simulation_output_deterministic(tmp_path):
    cfg = ScenarioConfig("friedman", n=100, n_test=30, replications=2, seed=4)
    paths = []
    for i in range(2):
        rows, _ = run_simulation(cfg, small_methods())
        p = tmp_path / f"out{i}.csv"
        write_rows(p, rows, RESULT_FIELDS)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
