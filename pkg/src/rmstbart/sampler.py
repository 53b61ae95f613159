"""The RMST-BART Gibbs sampler, its tuning defaults, cross-validation of the
loss scale and posterior summaries.

Each iteration updates every tree against its partial residuals under the
weighted squared-error loss and then redraws the censoring cumulative hazard
that supplies the weights.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import optimize

from .censoring import (
    DEFAULT_WEIGHT_CAP,
    AftCensoring,
    CumHazDraw,
    FixedCensoring,
    GammaProcessCensoring,
    GammaProcessConfig,
    censoring_indicator,
    default_gamma_grid,
    freeze_weights,
    ipcw_weights,
)
from .data import SurvivalDataset, TruncatedDataset, apply_truncation, km_censoring_survival
from .errors import ConfigurationError, NumericalError, ParameterDomainError
from .numerics import RngHandle
from .trees import CutpointGrid, ForestDraws, LeafPriorParams, SlotForest, TreePriorParams

log = logging.getLogger(__name__)

CENSORING_MODELS = ("noninf", "dep", "fixed")
ETA_RULES = ("inverse", "half")
SIGMA_R2_FLOOR = 1e-6
ETA_CEILING = 1e6
DEFAULT_MULTIPLIERS = (0.1, 0.25, 0.5, 0.75, 1.0, 1.5)
EULER_GAMMA = 0.5772156649015329


@dataclass
class SamplerConfig:
    """Hyperparameters and chain settings.

    ``eta`` and ``sigma_mu`` left as ``None`` are set from the data by
    :func:`default_eta` and :func:`default_sigma_mu`. ``n_iter`` counts all
    iterations including ``burn_in``. ``censoring="fixed"`` uses
    ``fixed_hazard`` when given and Kaplan-Meier weights otherwise;
    ``fixed_weights=True`` instead freezes the configured censoring model at
    its posterior-mean weights before the tree chain starts.
    """

    H: int = 200
    eta: float | None = None
    sigma_mu: float | None = None
    kappa: float = 2.0
    tree_prior: TreePriorParams = field(default_factory=TreePriorParams)
    n_iter: int = 2500
    burn_in: int = 500
    thin: int = 1
    censoring: str = "noninf"
    fixed_weights: bool = False
    seed: int = 0
    chains: int = 1
    weight_cap: float | None = DEFAULT_WEIGHT_CAP
    grid_size: int = 100
    cens_grid_size: int = 50
    kappa0: float = 1.0
    alpha_increment: float = 1.0
    cens_H: int = 50
    eta_rule: str = "inverse"
    fixed_hazard: CumHazDraw | None = None
    capacity: int = 255

    def __post_init__(self):
        for name in ("H", "n_iter", "thin", "chains", "grid_size", "cens_grid_size", "cens_H"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.burn_in < 0 or self.burn_in >= self.n_iter:
            raise ConfigurationError(f"burn_in ({self.burn_in}) must lie in [0, n_iter={self.n_iter})")
        if self.n_kept < 1:
            raise ConfigurationError("no iterations are kept after burn-in and thinning")
        if self.censoring not in CENSORING_MODELS:
            raise ConfigurationError(f"censoring must be one of {CENSORING_MODELS}, got {self.censoring!r}")
        if self.eta_rule not in ETA_RULES:
            raise ConfigurationError(f"eta_rule must be one of {ETA_RULES}")
        for name in ("eta", "sigma_mu"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ParameterDomainError(f"{name} must be positive, got {v}")
        for name in ("kappa", "kappa0", "alpha_increment"):
            if not getattr(self, name) > 0:
                raise ParameterDomainError(f"{name} must be positive")
        if self.weight_cap is not None and not self.weight_cap >= 1:
            raise ParameterDomainError("weight_cap must be at least 1")
        if self.capacity < 3:
            raise ConfigurationError("tree capacity must allow at least one split")

    @property
    def n_kept(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("fixed_hazard")
        return d


@dataclass
class EtaSelection:
    sigma_r2_tilde: float
    multipliers: tuple = DEFAULT_MULTIPLIERS
    folds: int = 5
    chosen_eta: float | None = None
    scores: np.ndarray | None = None  # (candidates, folds)

    def __post_init__(self):
        if any(m <= 0 for m in self.multipliers):
            raise ParameterDomainError("multipliers must be positive")
        if self.folds < 2:
            raise ConfigurationError("cross-validation needs at least 2 folds")

    @property
    def etas(self) -> np.ndarray:
        return np.array([default_eta(m * self.sigma_r2_tilde) for m in self.multipliers])

    @property
    def mean_scores(self) -> np.ndarray:
        return self.scores.mean(axis=1)


@dataclass
class PosteriorDraws:
    """Kept draws of ``f(x_i)`` on the original restricted-mean scale plus the
    forests that produced them."""

    f_draws: np.ndarray
    forests: ForestDraws
    grid: CutpointGrid
    mu_hat_b: float
    tau: float
    transform: str
    eta: float
    sigma_mu: float
    importance_counts: np.ndarray
    hazard_mean_weight: np.ndarray
    n_capped: np.ndarray
    acceptance_rates: list
    chain: np.ndarray
    config: SamplerConfig
    censoring_info: dict = field(default_factory=dict)
    covariate_names: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def n_draws(self) -> int:
        return self.f_draws.shape[0]

    def summary(self, level: float = 0.95) -> dict:
        return posterior_summary(self.f_draws, level)

    def predict(self, X) -> np.ndarray:
        return predict_new(self.forests, X, self.mu_hat_b, self.grid)


# ---------------------------------------------------------------------------
# tuning defaults


def _weibull_nll(theta, Z, z, delta, lam):
    k = Z.shape[1]
    beta, log_s = theta[:k], theta[k]
    s = math.exp(log_s)
    w = (z - Z @ beta) / s
    ew = np.exp(np.minimum(w, 700.0))
    nll = np.sum(delta * (log_s - w)) + np.sum(ew)
    g_w = ew - delta
    grad = np.empty_like(theta)
    grad[:k] = -(Z.T @ g_w) / s
    grad[k] = np.sum(delta) - np.sum(g_w * w)
    if lam > 0:
        nll += lam * np.sum(beta[1:] ** 2)
        grad[1:k] += 2.0 * lam * beta[1:]
    return nll, grad


def _fit_weibull(Z, z, delta, lam=0.0):
    """Weibull AFT (extreme-value errors on the ``z`` scale) by maximum likelihood."""
    coef, *_ = np.linalg.lstsq(Z, z, rcond=None)
    res = z - Z @ coef
    s0 = max(float(np.std(res)) * math.sqrt(6.0) / math.pi, 1e-3)
    coef = coef.copy()
    coef[0] += EULER_GAMMA * s0
    theta0 = np.concatenate((coef, [math.log(s0)]))
    out = optimize.minimize(_weibull_nll, theta0, args=(Z, z, delta, lam), jac=True, method="BFGS",
                            options={"gtol": 1e-6 * max(1.0, z.size), "maxiter": 2000})
    return out


def _design(X):
    X = np.asarray(X, dtype=float)
    if X.shape[1] == 0:
        return np.ones((X.shape[0], 1))
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return np.column_stack((np.ones(X.shape[0]), (X - X.mean(axis=0)) / sd))


def default_sigma_r2(trunc: TruncatedDataset, data: SurvivalDataset, folds: int = 5,
                     rng: RngHandle | None = None) -> float:
    """Residual variance of a Weibull AFT fit on the restricted outcome scale.

    The model is ``b(U^tau) = x'beta + s * eps`` with standard minimum
    extreme-value ``eps``, fitted with censoring indicators ``delta^tau``; the
    returned variance is ``s^2 pi^2 / 6``. When ``p > n/5`` the slopes get a
    ridge penalty chosen by ``folds``-fold held-out likelihood.
    """
    z = np.asarray(trunc.b_u_tau, dtype=float)
    delta = (np.asarray(trunc.delta_tau) == 1).astype(float)
    n = z.size
    Z = _design(data.covariates)
    p = Z.shape[1] - 1
    ev = delta == 1

    def fallback(reason):
        v = float(np.var(trunc.y_tau[ev])) if ev.sum() > 1 else SIGMA_R2_FLOOR
        warnings.warn(f"Weibull AFT fit failed ({reason}); using the variance of uncensored outcomes")
        return max(v, SIGMA_R2_FLOOR)

    if np.ptp(z[ev]) <= 1e-12 * max(1.0, abs(z[ev]).max()):
        return SIGMA_R2_FLOOR
    lam = 0.0
    if p > n / 5:
        rng = rng or RngHandle(0, 9)
        perm = rng.generator.permutation(n)
        fold_of = np.empty(n, dtype=int)
        fold_of[perm] = np.arange(n) % folds
        grid = np.logspace(-3, 3, 13)
        cv = []
        for lam_try in grid:
            total = 0.0
            for k in range(folds):
                tr, te = fold_of != k, fold_of == k
                fit = _fit_weibull(Z[tr], z[tr], delta[tr], lam_try)
                total += _weibull_nll(fit.x, Z[te], z[te], delta[te], 0.0)[0]
            cv.append(total)
        lam = float(grid[int(np.argmin(cv))])
        log.info("ridge penalty for the Weibull AFT chosen by CV: %.3g", lam)
    try:
        fit = _fit_weibull(Z, z, delta, lam)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        return fallback(str(exc))
    if not np.all(np.isfinite(fit.x)):
        return fallback("non-finite estimate")
    if not fit.success:
        g = _weibull_nll(fit.x, Z, z, delta, lam)[1]
        if np.max(np.abs(g)) > 1e-3 * n:
            return fallback(fit.message)
    s = math.exp(fit.x[-1])
    return max(s * s * math.pi ** 2 / 6.0, SIGMA_R2_FLOOR)


def default_eta(sigma_r2: float, rule: str = "inverse") -> float:
    """Loss scale from the residual variance: ``1/(2 sigma_r2)``.

    ``rule="half"`` gives ``sigma_r2/2`` instead, kept for comparison only.
    """
    if not sigma_r2 > 0:
        raise ParameterDomainError(f"sigma_r2 must be positive, got {sigma_r2}")
    if rule == "inverse":
        eta = 1.0 / (2.0 * max(sigma_r2, SIGMA_R2_FLOOR))
    elif rule == "half":
        eta = sigma_r2 / 2.0
    else:
        raise ConfigurationError(f"unknown eta rule {rule!r}")
    return min(eta, ETA_CEILING)


def default_sigma_mu(trunc: TruncatedDataset, H: int, kappa: float) -> float:
    """Leaf prior scale putting the outcome range at ``kappa`` prior sd's of the sum of trees."""
    if H < 1 or not kappa > 0:
        raise ParameterDomainError("H and kappa must be positive")
    ev = np.asarray(trunc.delta_tau) == 1
    if not np.any(ev):
        raise ConfigurationError("no observed events")
    y_min = float(np.min(trunc.y_tau[ev]))
    span = trunc.tau - trunc.mu_hat_b - y_min
    if not span > 0:
        raise ConfigurationError("outcome range is zero; sigma_mu cannot be set from the data")
    return span / (2.0 * kappa * math.sqrt(H))


def km_hazard(trunc: TruncatedDataset, max_exponent: float = 50.0) -> CumHazDraw:
    """``-log G(U^tau -)`` from the Kaplan-Meier censoring curve."""
    G = km_censoring_survival(trunc.u_tau, np.where(censoring_indicator(trunc), 0, 1))
    g = np.asarray(G.left_limit(trunc.u_tau), dtype=float)
    with np.errstate(divide="ignore"):
        lam = np.minimum(-np.log(g), max_exponent)
    return CumHazDraw(np.maximum(lam, 0.0), "fixed")


# ---------------------------------------------------------------------------
# the sampler


def _censoring_model(config: SamplerConfig, trunc: TruncatedDataset, data: SurvivalDataset,
                     rng: RngHandle):
    if config.censoring == "noninf":
        grid = default_gamma_grid(trunc.u_tau, config.cens_grid_size)
        gp = GammaProcessConfig(grid, config.kappa0, np.full(grid.size, config.alpha_increment))
        return GammaProcessCensoring(trunc, gp)
    if config.censoring == "dep":
        return AftCensoring(data.times, data.events, data.covariates, trunc.u_tau, rng,
                            H=config.cens_H, tree_prior=config.tree_prior)
    if config.fixed_hazard is not None:
        if config.fixed_hazard.values.shape != trunc.u_tau.shape:
            raise ConfigurationError("fixed hazard has the wrong number of observations")
        return FixedCensoring(config.fixed_hazard)
    return FixedCensoring(km_hazard(trunc))


def _run_chain(config: SamplerConfig, trunc: TruncatedDataset, data: SurvivalDataset,
               grid: CutpointGrid, eta: float, sigma_mu: float, rng: RngHandle, chain: int):
    tree_rng = rng.spawn(0)
    cens_rng = rng.spawn(1)
    cens = _censoring_model(config, trunc, data, cens_rng)
    info = cens.describe()
    if config.fixed_weights:
        # Replace the censoring chain by one set of posterior-mean weights.
        n_pre = config.n_kept + (config.burn_in if config.censoring == "dep" else 0)
        pre = [cens.draw(cens_rng) for _ in range(n_pre)][-config.n_kept:]
        cens = FixedCensoring(freeze_weights(pre, config.weight_cap))
        info = dict(info, fixed_weights=True, frozen_from=len(pre))

    X = np.ascontiguousarray(data.covariates, dtype=float)
    Y = np.ascontiguousarray(trunc.y_tau, dtype=float)
    leaf_prior = LeafPriorParams(sigma_mu)
    forest = SlotForest(config.H, trunc.n, config.capacity)
    haz = cens.draw(cens_rng)
    packs, mean_w, n_capped = [], [], []
    ev = trunc.delta_tau == 1
    step = max(1, config.n_iter // 10)
    for it in range(1, config.n_iter + 1):
        w, capped = ipcw_weights(trunc.delta_tau, haz, config.weight_cap)
        forest.sweep(Y, w, X, grid, eta, leaf_prior, config.tree_prior, tree_rng)
        if it == config.burn_in:
            forest.move_stats[:] = 0
        kept = it > config.burn_in and (it - config.burn_in) % config.thin == 0
        if kept:
            packs.append(forest.pack())
            mean_w.append(float(w[ev].mean()))
            n_capped.append(capped)
        haz = cens.draw(cens_rng)
        if it % step == 0:
            log.info("chain %d: iteration %d/%d", chain, it, config.n_iter)
    return packs, np.array(mean_w), np.array(n_capped), forest.acceptance_rates(), info


def run_mcmc(config: SamplerConfig, trunc: TruncatedDataset, data: SurvivalDataset,
             rng: RngHandle | None = None) -> PosteriorDraws:
    """Run ``config.chains`` independent chains and pool their kept draws.

    Chain ``c`` draws trees from substream ``(c, 0)`` and censoring hazards from
    ``(c, 1)`` of ``rng`` (default ``RngHandle(config.seed)``).
    """
    t0 = time.perf_counter()
    if data.n != trunc.n:
        raise ConfigurationError("data and truncated data differ in length")
    if not np.any(trunc.delta_tau == 1):
        raise ConfigurationError("no events: every loss weight is zero")
    rng = rng or RngHandle(config.seed)
    grid = CutpointGrid.from_data(data.covariates, config.grid_size)
    eta = config.eta
    if eta is None:
        eta = default_eta(default_sigma_r2(trunc, data), config.eta_rule)
    sigma_mu = config.sigma_mu or default_sigma_mu(trunc, config.H, config.kappa)

    packs, mean_w, capped, rates, chain_ids = [], [], [], [], []
    info = {}
    for c in range(config.chains):
        p, mw, nc, acc, info = _run_chain(config, trunc, data, grid, eta, sigma_mu, rng.spawn(c), c)
        packs += p
        mean_w.append(mw)
        capped.append(nc)
        rates.append(acc)
        chain_ids.append(np.full(len(p), c))
    forests = ForestDraws.concat(packs, data.p)
    f_draws = forests.predict(data.covariates, grid) + trunc.mu_hat_b
    if not np.all(np.isfinite(f_draws)):
        raise NumericalError("non-finite posterior draws")
    n_capped = np.concatenate(capped)
    if n_capped.sum():
        log.warning("weight cap %.3g hit %d times across kept draws", config.weight_cap, int(n_capped.sum()))
    info = dict(info, rng=rng.describe())
    return PosteriorDraws(
        f_draws=f_draws,
        forests=forests,
        grid=grid,
        mu_hat_b=trunc.mu_hat_b,
        tau=trunc.tau,
        transform=trunc.transform.kind,
        eta=float(eta),
        sigma_mu=float(sigma_mu),
        importance_counts=forests.split_counts(),
        hazard_mean_weight=np.concatenate(mean_w),
        n_capped=n_capped,
        acceptance_rates=rates,
        chain=np.concatenate(chain_ids),
        config=config,
        censoring_info=info,
        covariate_names=list(data.covariate_names),
        elapsed=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# summaries and prediction


def posterior_summary(draws, level: float = 0.95) -> dict:
    """Pointwise mean and equal-tailed interval (linear interpolation between order statistics)."""
    if isinstance(draws, PosteriorDraws):
        draws = draws.f_draws
    draws = np.asarray(draws, dtype=float)
    if not 0 < level < 1:
        raise ParameterDomainError("level must lie in (0, 1)")
    if draws.shape[0] < 2:
        raise ConfigurationError("need at least two draws for an interval")
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [a, 1.0 - a], axis=0)
    mean = draws.mean(axis=0)
    # guard the ordering against rounding in the mean of identical draws
    return {"mean": mean, "lower": np.minimum(lo, mean), "upper": np.maximum(hi, mean)}


def predict_new(forests: ForestDraws, X, mu_hat_b: float, grid: CutpointGrid) -> np.ndarray:
    """Draws of ``f`` at new rows: forest sum plus ``mu_hat_b``, shape ``(draws, rows)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != forests.n_vars:
        raise ConfigurationError(f"expected {forests.n_vars} covariate columns, got array of shape {X.shape}")
    if len(forests) == 0:
        return np.full((1, X.shape[0]), mu_hat_b)
    return forests.predict(X, grid) + mu_hat_b


def partial_dependence(forests: ForestDraws, X, var: int, values, mu_hat_b: float,
                       grid: CutpointGrid) -> np.ndarray:
    """Average posterior-mean prediction with column ``var`` set to each of ``values``."""
    X = np.array(X, dtype=float)
    if not 0 <= var < X.shape[1]:
        raise ConfigurationError(f"variable index {var} out of range")
    out = np.empty(len(values))
    for g, u in enumerate(values):
        X[:, var] = u
        out[g] = predict_new(forests, X, mu_hat_b, grid).mean()
    return out


# ---------------------------------------------------------------------------
# cross-validation of eta


def ipcw_test_loss(trunc_test: TruncatedDataset, pred) -> float:
    """``sum_i delta_i^tau W_i (b(U_i^tau) - pred_i)^2 / n`` with test-fold Kaplan-Meier weights."""
    G = km_censoring_survival(trunc_test.u_tau, np.where(censoring_indicator(trunc_test), 0, 1))
    g = np.asarray(G.left_limit(trunc_test.u_tau), dtype=float)
    ev = trunc_test.delta_tau == 1
    if np.any(g[ev] <= 0):
        raise NumericalError("censoring survival is zero at a test-fold event")
    resid = trunc_test.b_u_tau - np.asarray(pred, dtype=float)
    return float(np.sum(np.where(ev, resid ** 2 / np.where(ev, g, 1.0), 0.0)) / trunc_test.n)


def make_folds(trunc: TruncatedDataset, folds: int, rng: RngHandle) -> np.ndarray:
    """Random fold labels; reshuffled once if some fold lacks events on either side."""
    n = trunc.n
    if n < folds:
        raise ConfigurationError(f"{n} observations cannot fill {folds} folds")
    ev = trunc.delta_tau == 1
    for attempt in range(2):
        perm = rng.spawn(attempt).generator.permutation(n)
        labels = np.empty(n, dtype=np.int64)
        labels[perm] = np.arange(n) % folds
        ok = all(ev[labels == k].any() and ev[labels != k].any() for k in range(folds))
        if ok:
            return labels
        log.warning("fold assignment left a fold without events; reshuffling")
    raise ConfigurationError("could not form folds that all contain events")


def _cv_task(args):
    data, tau, transform, train, test, config, seed_key = args
    dtrain, dtest = data.subset(train), data.subset(test)
    ttrain = apply_truncation(dtrain, tau, transform)
    ttest = apply_truncation(dtest, tau, transform)
    draws = run_mcmc(config, ttrain, dtrain, RngHandle(*seed_key))
    pred = draws.predict(dtest.covariates).mean(axis=0)
    return ipcw_test_loss(ttest, pred)


def cross_validate_eta(trunc: TruncatedDataset, data: SurvivalDataset, config: SamplerConfig,
                       rng: RngHandle | None = None, multipliers=DEFAULT_MULTIPLIERS,
                       folds: int = 5, sigma_r2: float | None = None, jobs: int = 1) -> EtaSelection:
    """Choose ``eta = 1/(2 m sigma_r2)`` over multipliers ``m`` by K-fold CV.

    Folds share the restriction point and transform of ``trunc``; each
    training fold is re-centered on its own IPCW estimate. Ties go to the
    smallest eta.
    """
    rng = rng or RngHandle(config.seed)
    if sigma_r2 is None:
        sigma_r2 = default_sigma_r2(trunc, data)
    sel = EtaSelection(float(sigma_r2), tuple(float(m) for m in multipliers), folds)
    labels = make_folds(trunc, folds, rng.spawn(0))
    etas = sel.etas
    tasks = []
    for c, eta in enumerate(etas):
        cfg = replace(config, eta=float(eta))
        for k in range(folds):
            tasks.append((data, trunc.tau, trunc.transform, np.flatnonzero(labels != k),
                          np.flatnonzero(labels == k), cfg, (rng.seed, rng.stream_id + (1, k, c))))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            scores = list(ex.map(_cv_task, tasks))
    else:
        scores = [_cv_task(t) for t in tasks]
    sel.scores = np.array(scores).reshape(len(etas), folds)
    mean = sel.mean_scores
    best = mean.min()
    tied = np.flatnonzero(mean <= best * (1 + 1e-12))
    sel.chosen_eta = float(etas[tied].min())
    return sel
