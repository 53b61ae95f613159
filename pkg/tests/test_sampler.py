import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import stats

import rmstbart.sampler as sampler
from rmstbart.censoring import CumHazDraw
from rmstbart.data import SurvivalDataset, apply_truncation
from rmstbart.errors import ConfigurationError, ParameterDomainError
from rmstbart.numerics import RngHandle
from rmstbart.sampler import (
    EtaSelection,
    SamplerConfig,
    cross_validate_eta,
    default_eta,
    default_sigma_mu,
    default_sigma_r2,
    ipcw_test_loss,
    km_hazard,
    make_folds,
    partial_dependence,
    posterior_summary,
    predict_new,
    run_mcmc,
)
from rmstbart.trees import CutpointGrid, ForestDraws, TreePriorParams, predict_forest

from conftest import friedman_data


def quick(**kw):
    base = dict(H=20, n_iter=300, burn_in=100, seed=3)
    base.update(kw)
    return SamplerConfig(**base)


def fit(data, tau=10.0, **kw):
    tr = apply_truncation(data, tau)
    return tr, run_mcmc(quick(**kw), tr, data)


# ---------------------------------------------------------------------------
# defaults


@pytest.mark.parametrize("s2,eta", [(2.0, 0.25), (0.5, 1.0)])
def test_default_eta_examples(s2, eta):
    assert default_eta(s2) == pytest.approx(eta)


@pytest.mark.parametrize("s2", [1e-3, 0.7, 13.0, 4e4])
def test_default_eta_identity(s2):
    assert default_eta(s2) * s2 == pytest.approx(0.5)


def test_default_eta_half_rule_and_guards():
    assert default_eta(3.0, "half") == 1.5
    assert default_eta(1e-12) == 1.0 / (2 * 1e-6)
    with pytest.raises(ParameterDomainError):
        default_eta(0.0)


def test_default_sigma_mu_example():
    tr = SimpleNamespace(tau=12.0, mu_hat_b=2.0, y_tau=np.array([-6.0, 1.0, -9.0]),
                         delta_tau=np.array([1, 1, 0]))
    assert default_sigma_mu(tr, 200, 2.0) == pytest.approx(16 / (4 * math.sqrt(200)))
    assert default_sigma_mu(tr, 200, 4.0) == pytest.approx(default_sigma_mu(tr, 200, 2.0) / 2)
    assert default_sigma_mu(tr, 1, 2.0) == pytest.approx(10 * default_sigma_mu(tr, 100, 2.0))


def test_default_sigma_mu_zero_range():
    tr = SimpleNamespace(tau=2.0, mu_hat_b=2.0, y_tau=np.array([0.0]), delta_tau=np.array([1]))
    with pytest.raises(ConfigurationError):
        default_sigma_mu(tr, 10, 2.0)


def test_default_sigma_r2_recovers_gumbel_variance():
    g = np.random.default_rng(8)
    n = 2000
    X = g.normal(size=(n, 2))
    s = math.sqrt(24) / math.pi  # s^2 pi^2 / 6 = 4
    eps = np.log(g.exponential(size=n))  # standard minimum extreme value
    z = 30 + X @ [1.0, -0.5] + s * eps
    d = SurvivalDataset(z, np.ones(n), X)
    tr = apply_truncation(d, 1e3)
    est = default_sigma_r2(tr, d)
    assert 3.0 <= est <= 5.0


def test_default_sigma_r2_ridge_branch():
    g = np.random.default_rng(9)
    n, p = 50, 20  # p > n/5
    X = g.normal(size=(n, p))
    z = 30 + X[:, 0] + math.sqrt(6) / math.pi * np.log(g.exponential(size=n))
    d = SurvivalDataset(z, np.ones(n), X)
    est = default_sigma_r2(apply_truncation(d, 1e3), d)
    assert np.isfinite(est) and est > 0


def test_default_sigma_r2_intercept_only():
    d = friedman_data(n=100)
    d0 = SurvivalDataset(d.times, d.events, np.zeros((100, 0)))
    est = default_sigma_r2(apply_truncation(d0, 25.0), d0)
    assert np.isfinite(est) and est > 0


def test_default_sigma_r2_constant_outcome_floor():
    d = SurvivalDataset(np.full(10, 3.0), np.ones(10), np.arange(10.0)[:, None])
    assert default_sigma_r2(apply_truncation(d, 5.0), d) == 1e-6


def test_km_hazard_zero_without_censoring():
    d = SurvivalDataset([1.0, 2.0, 3.0], [1, 1, 1], np.zeros((3, 0)))
    np.testing.assert_array_equal(km_hazard(apply_truncation(d, 10.0)).values, 0.0)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SamplerConfig(n_iter=100, burn_in=100)
    with pytest.raises(ConfigurationError):
        SamplerConfig(censoring="cox")
    with pytest.raises(ParameterDomainError):
        SamplerConfig(eta=-1.0)
    with pytest.raises(ConfigurationError):
        SamplerConfig(H=0)
    assert SamplerConfig(n_iter=10, burn_in=2, thin=3).n_kept == 2


def test_eta_selection_validation():
    with pytest.raises(ParameterDomainError):
        EtaSelection(1.0, (0.5, -1.0))
    with pytest.raises(ConfigurationError):
        EtaSelection(1.0, folds=1)
    np.testing.assert_allclose(EtaSelection(2.0, (1.0, 0.5)).etas, [0.25, 0.5])


# ---------------------------------------------------------------------------
# sampler


def test_draw_shapes_and_finiteness(small_data):
    tr, pd = fit(small_data, thin=2)
    assert pd.f_draws.shape == (100, small_data.n)
    assert np.all(np.isfinite(pd.f_draws))
    assert pd.importance_counts.shape == (100, small_data.p)
    assert len(pd.hazard_mean_weight) == 100
    assert pd.censoring_info["model"] == "noninformative"


def test_acceptance_rates_nondegenerate(small_data):
    _, pd = fit(small_data)
    for move, st in pd.acceptance_rates[0].items():
        if move in ("grow", "prune", "change"):
            assert 0 < st["rate"] < 1, move


def test_determinism(small_data):
    _, a = fit(small_data, n_iter=150, burn_in=50)
    _, b = fit(small_data, n_iter=150, burn_in=50)
    np.testing.assert_array_equal(a.f_draws, b.f_draws)
    _, c = fit(small_data, n_iter=150, burn_in=50, seed=4)
    assert not np.array_equal(a.f_draws, c.f_draws)


def test_chains_pool_draws(small_data):
    tr, pd = fit(small_data, n_iter=120, burn_in=20, chains=2)
    assert pd.f_draws.shape[0] == 200
    assert pd.chain.tolist() == [0] * 100 + [1] * 100
    assert len(pd.acceptance_rates) == 2


def test_predict_reproduces_training_draws(small_data):
    _, pd = fit(small_data)
    np.testing.assert_array_equal(pd.predict(small_data.covariates), pd.f_draws)
    one = pd.predict(small_data.covariates[:1])
    assert one.shape == (200, 1)
    with pytest.raises(ConfigurationError):
        pd.predict(small_data.covariates[:, :2])


def test_predict_empty_forest_gives_center():
    fd = ForestDraws.empty(3)
    grid = CutpointGrid.from_lists([[0.5]] * 3)
    out = predict_new(fd, np.zeros((4, 3)), 7.5, grid)
    np.testing.assert_array_equal(out, 7.5)


def test_fixed_weights_constant(small_data):
    _, pd = fit(small_data, fixed_weights=True)
    assert np.ptp(pd.hazard_mean_weight) == 0.0
    assert pd.censoring_info["fixed_weights"]
    _, pd2 = fit(small_data)
    assert np.ptp(pd2.hazard_mean_weight) > 0.0


def test_fixed_censoring_uses_supplied_hazard(small_data):
    tr = apply_truncation(small_data, 10.0)
    haz = CumHazDraw(np.zeros(small_data.n), "fixed")
    pd = run_mcmc(quick(censoring="fixed", fixed_hazard=haz), tr, small_data)
    np.testing.assert_array_equal(pd.hazard_mean_weight, 1.0)
    with pytest.raises(ConfigurationError):
        run_mcmc(quick(censoring="fixed", fixed_hazard=CumHazDraw(np.zeros(3), "fixed")), tr, small_data)


def test_dependent_censoring_runs(small_data):
    _, pd = fit(small_data, censoring="dep", n_iter=120, burn_in=20)
    assert pd.censoring_info["model"] == "informative"
    assert np.all(np.isfinite(pd.f_draws))


def test_intercept_only_matches_conjugate_oracle():
    g = np.random.default_rng(2)
    n = 40
    t = g.gamma(4.0, 1.0, size=n)
    d = SurvivalDataset(t, np.ones(n), g.random((n, 2)))
    tr = apply_truncation(d, 6.0)
    eta, sm = 0.3, 0.5
    cfg = SamplerConfig(H=1, eta=eta, sigma_mu=sm, tree_prior=TreePriorParams(max_depth=0),
                        n_iter=10_500, burn_in=500, censoring="fixed", seed=1)
    pd = run_mcmc(cfg, tr, d)
    a = 2 * eta * n + sm ** -2
    mean = 2 * eta * tr.y_tau.sum() / a + tr.mu_hat_b
    draws = pd.f_draws[:, 0]
    np.testing.assert_array_equal(pd.f_draws, draws[:, None].repeat(n, axis=1))
    z = (draws.mean() - mean) / math.sqrt(1 / a / draws.size)
    assert abs(z) < stats.norm.ppf(0.995)
    chi = (draws.size - 1) * draws.var(ddof=1) * a
    assert stats.chi2.cdf(chi, draws.size - 1) > 0.005
    assert stats.chi2.sf(chi, draws.size - 1) > 0.005


def test_shift_equivariance():
    g = np.random.default_rng(4)
    n = 64
    t = np.round(g.gamma(5.0, 1.0, size=n) * 8) / 8 + 0.125
    X = g.random((n, 2))
    c = 4.0
    cfg = quick(eta=0.5, sigma_mu=0.3, censoring="fixed", n_iter=200, burn_in=50)
    a = run_mcmc(cfg, apply_truncation(SurvivalDataset(t, np.ones(n), X), 8.0),
                 SurvivalDataset(t, np.ones(n), X))
    d2 = SurvivalDataset(t + c, np.ones(n), X)
    b = run_mcmc(cfg, apply_truncation(d2, 8.0 + c), d2)
    np.testing.assert_allclose(b.f_draws.mean(axis=0), a.f_draws.mean(axis=0) + c, rtol=0, atol=1e-9)


def test_no_events_rejected(small_data):
    tr = apply_truncation(small_data, 10.0)
    bad = replace(tr, delta_tau=np.zeros_like(tr.delta_tau))
    with pytest.raises(ConfigurationError):
        run_mcmc(quick(), bad, small_data)


# ---------------------------------------------------------------------------
# summaries


def test_summary_constant_draws():
    s = posterior_summary(np.full((50, 3), 2.5))
    for k in ("mean", "lower", "upper"):
        np.testing.assert_array_equal(s[k], 2.5)


def test_summary_quantile_rule():
    s = posterior_summary(np.arange(1.0, 101.0)[:, None])
    assert s["lower"][0] == pytest.approx(3.475)
    assert s["upper"][0] == pytest.approx(97.525)


def test_summary_nesting(rng):
    draws = rng.generator.standard_t(3, size=(400, 20))
    wide, narrow = posterior_summary(draws, 0.95), posterior_summary(draws, 0.5)
    assert np.all(wide["lower"] <= narrow["lower"])
    assert np.all(narrow["upper"] <= wide["upper"])
    assert np.all(wide["lower"] <= wide["mean"]) and np.all(wide["mean"] <= wide["upper"])


def test_summary_needs_two_draws():
    with pytest.raises(ConfigurationError):
        posterior_summary(np.zeros((1, 3)))
    with pytest.raises(ParameterDomainError):
        posterior_summary(np.zeros((5, 3)), 1.0)


def test_partial_dependence_brute_force(small_data):
    _, pd = fit(small_data, H=5, n_iter=60, burn_in=50)
    X = small_data.covariates[:15]
    values = [0.1, 0.5, 0.9]
    got = partial_dependence(pd.forests, X, 0, values, pd.mu_hat_b, pd.grid)
    for u, val in zip(values, got):
        total = 0.0
        for d in range(len(pd.forests)):
            forest = pd.forests.forest(d)
            for row in X:
                r = row.copy()
                r[0] = u
                total += predict_forest(forest, r[None, :], pd.grid)[0] + pd.mu_hat_b
        assert val == pytest.approx(total / (len(pd.forests) * len(X)), abs=1e-10)


def test_partial_dependence_constant_and_single_row():
    fd = ForestDraws.empty(2)
    grid = CutpointGrid.from_lists([[0.5], [0.5]])
    out = partial_dependence(fd, np.random.default_rng(0).random((5, 2)), 1, [0.0, 0.3, 1.0], 2.0, grid)
    np.testing.assert_array_equal(out, 2.0)


def test_partial_dependence_single_row(small_data):
    _, pd = fit(small_data, H=5, n_iter=60, burn_in=50)
    x = small_data.covariates[:1].copy()
    got = partial_dependence(pd.forests, x, 2, [0.3], pd.mu_hat_b, pd.grid)[0]
    x[0, 2] = 0.3
    assert got == pytest.approx(pd.predict(x).mean(), abs=1e-12)


# ---------------------------------------------------------------------------
# cross-validation


def test_ipcw_test_loss_uncensored():
    d = SurvivalDataset([1.0, 2.0, 4.0], [1, 1, 1], np.zeros((3, 0)))
    tr = apply_truncation(d, 3.0)
    assert ipcw_test_loss(tr, [1.0, 1.0, 1.0]) == pytest.approx((0 + 1 + 4) / 3)


def test_make_folds_balanced(small_data, rng):
    tr = apply_truncation(small_data, 10.0)
    labels = make_folds(tr, 5, rng)
    assert np.bincount(labels).tolist() == [40] * 5


def test_make_folds_without_events_fails(rng):
    d = SurvivalDataset(np.arange(1.0, 11.0), [1] + [0] * 9, np.zeros((10, 0)))
    with pytest.raises(ConfigurationError):
        make_folds(apply_truncation(d, 50.0), 5, rng)


def test_cv_single_candidate(small_data, monkeypatch):
    tr = apply_truncation(small_data, 10.0)
    monkeypatch.setattr(sampler, "_cv_task", lambda args: 1.0)
    sel = cross_validate_eta(tr, small_data, quick(), multipliers=(0.5,), sigma_r2=2.0)
    assert sel.chosen_eta == pytest.approx(0.5)
    assert sel.scores.shape == (1, 5)


def test_cv_ties_pick_smallest_eta(small_data, monkeypatch):
    tr = apply_truncation(small_data, 10.0)
    monkeypatch.setattr(sampler, "_cv_task", lambda args: 3.0)
    sel = cross_validate_eta(tr, small_data, quick(), sigma_r2=1.0)
    assert sel.chosen_eta == pytest.approx(1 / (2 * 1.5))


def test_cv_scores_are_reproducible(small_data):
    tr = apply_truncation(small_data, 10.0)
    cfg = quick(H=5, n_iter=40, burn_in=20)
    a = cross_validate_eta(tr, small_data, cfg, multipliers=(0.5, 1.0), folds=2, sigma_r2=4.0)
    b = cross_validate_eta(tr, small_data, cfg, multipliers=(0.5, 1.0), folds=2, sigma_r2=4.0)
    np.testing.assert_array_equal(a.scores, b.scores)
    assert a.chosen_eta in a.etas


@pytest.mark.slow
def test_cv_eta_not_much_worse_than_default():
    from rmstbart.simulation import ScenarioConfig, gen_scenario, rmse_metric

    cfgs = ScenarioConfig("friedman", n=500, p=10, rate=0.1, n_test=500, seed=21)
    scen = gen_scenario(cfgs, RngHandle(21))
    tr = apply_truncation(scen.train, cfgs.tau)
    base = SamplerConfig(H=50, n_iter=700, burn_in=200, seed=2)
    sel = cross_validate_eta(tr, scen.train, base)
    default = run_mcmc(base, tr, scen.train)
    tuned = run_mcmc(replace(base, eta=sel.chosen_eta), tr, scen.train)
    r_def = rmse_metric(default.predict(scen.X_test).mean(axis=0), scen.truth)
    r_cv = rmse_metric(tuned.predict(scen.X_test).mean(axis=0), scen.truth)
    assert r_cv <= r_def + 0.3
