"""Synthetic survival studies with known restricted mean survival time.

Outcomes are ``T ~ Gamma(f (1 + f), rate 1 + f)`` so that ``E[T | x] = f(x)``,
with ``f`` either the Friedman function of uniform covariates or the absolute
value of a sparse linear predictor of AR(1) Gaussian covariates.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._io import atomic_open
from .data import SurvivalDataset, apply_truncation
from .errors import ConfigurationError, ParameterDomainError
from .numerics import RngHandle, gamma_cdf
from .sampler import SamplerConfig, cross_validate_eta, posterior_summary, run_mcmc

log = logging.getLogger(__name__)

FAMILIES = ("friedman", "abs-linear")
CENSORING = ("noninf", "informative", "none")
DEFAULT_TAU = {"friedman": 25.0, "abs-linear": 5.0}
NONINF_SHAPE = {"friedman": 3.2, "abs-linear": 2.2}
DEFAULT_BETA = (2.0, 2.0, 1.0, 1.0, 0.5)


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation setting.

    ``rate`` is the censoring rate ``r`` of ``Gamma(shape, r)`` censoring
    (``noninf``) or the shape ``r_D`` of ``Gamma(r_D, 0.01 f(x))`` censoring
    (``informative``).
    """

    family: str = "friedman"
    n: int = 1000
    n_test: int = 1000
    p: int = 10
    tau: float | None = None
    censoring: str = "noninf"
    rate: float = 0.1
    replications: int = 5
    seed: int = 0
    beta: tuple = DEFAULT_BETA
    rho: float = 0.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"family must be one of {FAMILIES}")
        if self.censoring not in CENSORING:
            raise ConfigurationError(f"censoring must be one of {CENSORING}")
        if self.p <= 5:
            raise ConfigurationError("p must exceed 5")
        if self.n < 2 or self.n_test < 1 or self.replications < 1:
            raise ConfigurationError("n >= 2, n_test >= 1 and replications >= 1 are required")
        if self.tau is None:
            object.__setattr__(self, "tau", DEFAULT_TAU[self.family])
        if not self.tau > 0:
            raise ParameterDomainError("tau must be positive")
        if self.censoring != "none" and not self.rate > 0:
            raise ParameterDomainError("censoring rate must be positive")
        if len(self.beta) != 5:
            raise ConfigurationError("beta needs five coefficients")
        if not -1 < self.rho < 1:
            raise ParameterDomainError("rho must lie in (-1, 1)")

    def mean_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.family == "friedman":
            return friedman_fn(X)
        return abs_linear_fn(X, self.beta)

    def covariates(self, m: int, rng: RngHandle) -> np.ndarray:
        if self.family == "friedman":
            return rng.generator.random((m, self.p))
        return ar1_normal(m, self.p, self.rho, rng)


def friedman_fn(X) -> np.ndarray:
    """``10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5``, row-wise."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] < 5:
        raise ConfigurationError("the Friedman function needs at least 5 covariates")
    out = (10.0 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20.0 * (X[:, 2] - 0.5) ** 2
           + 10.0 * X[:, 3] + 5.0 * X[:, 4])
    return float(out[0]) if single else out


def abs_linear_fn(X, beta=DEFAULT_BETA) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.abs(X[:, :5] @ np.asarray(beta, dtype=float))


def ar1_normal(m: int, p: int, rho: float, rng: RngHandle) -> np.ndarray:
    """Standard normal rows with ``Corr(x_j, x_k) = rho^|j-k|``."""
    z = rng.generator.standard_normal((m, p))
    x = np.empty_like(z)
    x[:, 0] = z[:, 0]
    s = math.sqrt(1.0 - rho * rho)
    for j in range(1, p):
        x[:, j] = rho * x[:, j - 1] + s * z[:, j]
    return x


def draw_survival(f_val, rng: RngHandle, size=None):
    """``T ~ Gamma(shape f(1+f), rate 1+f)``, so ``E[T] = f``."""
    f = np.asarray(f_val, dtype=float)
    if np.any(f <= 0):
        raise ParameterDomainError("f must be positive")
    return rng.generator.gamma(f * (1.0 + f), 1.0 / (1.0 + f), size=size)


def true_rmst_gamma(f_val, tau: float):
    """``E[min(T, tau)]`` for the outcome model, in closed form.

    ``E[T 1{T <= tau}] = f F(tau; k + 1, 1 + f)`` with ``k = f(1 + f)``, and
    ``tau P(T > tau)`` supplies the rest.
    """
    f = np.asarray(f_val, dtype=float)
    if np.any(f <= 0) or not tau > 0:
        raise ParameterDomainError("f and tau must be positive")
    k, rate = f * (1.0 + f), 1.0 + f
    val = f * gamma_cdf(tau, k + 1.0, rate) + tau * (1.0 - gamma_cdf(tau, k, rate))
    return val if np.ndim(val) else float(val)


true_rmst_friedman = true_rmst_gamma


def true_rmst_mc(f_val: float, tau: float, rng: RngHandle, n_samples: int = 10**6):
    """Monte Carlo ``(mean, standard error)`` of ``min(T, tau)``."""
    t = np.minimum(draw_survival(f_val, rng, size=n_samples), tau)
    return float(t.mean()), float(t.std(ddof=1) / math.sqrt(n_samples))


@dataclass
class ScenarioData:
    train: SurvivalDataset
    X_test: np.ndarray
    truth: np.ndarray
    censor_rate: float


def gen_scenario(config: ScenarioConfig, rng: RngHandle) -> ScenarioData:
    """Training data ``U = min(T, C)``, ``delta = 1{T <= C}`` and a test set with true RMST."""
    X = config.covariates(config.n, rng.spawn(0))
    f = config.mean_function(X)
    T = draw_survival(f, rng.spawn(1))
    gen = rng.spawn(2).generator
    if config.censoring == "none":
        C = np.full(config.n, np.inf)
    elif config.censoring == "noninf":
        C = gen.gamma(NONINF_SHAPE[config.family], 1.0 / config.rate, size=config.n)
    else:
        C = gen.gamma(config.rate, 1.0 / (0.01 * f))
    U = np.minimum(T, C)
    delta = (T <= C).astype(np.int8)
    X_test = config.covariates(config.n_test, rng.spawn(3))
    truth = true_rmst_gamma(config.mean_function(X_test), config.tau)
    rate = float(1.0 - delta.mean())
    log.info("%s n=%d: censoring fraction %.3f", config.family, config.n, rate)
    return ScenarioData(SurvivalDataset(U, delta, X), X_test, np.asarray(truth), rate)


def rmse_metric(predictions, truths) -> float:
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.shape != truths.shape:
        raise ConfigurationError(f"length mismatch: {predictions.shape} vs {truths.shape}")
    return float(np.sqrt(np.mean((predictions - truths) ** 2)))


def coverage_metric(lower, upper, truths) -> float:
    lower, upper, truths = (np.asarray(a, dtype=float) for a in (lower, upper, truths))
    if not lower.shape == upper.shape == truths.shape:
        raise ConfigurationError("interval and truth lengths differ")
    if np.any(lower > upper):
        raise ConfigurationError("lower bound exceeds upper bound")
    return float(np.mean((lower <= truths) & (truths <= upper)))


@dataclass(frozen=True)
class MethodConfig:
    """A method scored by the harness.

    ``kind="rmst-bart"`` runs the sampler with ``sampler`` (``cv=True`` first
    picks eta by cross-validation); ``kind="null"`` predicts the mean true
    RMST of the test set everywhere.
    """

    name: str
    kind: str = "rmst-bart"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    cv: bool = False
    multipliers: tuple = (0.1, 0.25, 0.5, 0.75, 1.0, 1.5)
    folds: int = 5

    def __post_init__(self):
        if self.kind not in ("rmst-bart", "null"):
            raise ConfigurationError(f"unknown method kind {self.kind!r}")


RESULT_FIELDS = ["family", "n", "p", "tau", "censoring", "rate", "method", "replication",
                 "censor_rate", "rmse", "coverage", "width", "eta"]
AGG_FIELDS = ["method", "family", "n", "p", "censoring", "rate", "replications",
              "mean_rmse", "sd_rmse", "mean_coverage", "mean_width", "mean_censor_rate"]


def run_method(method: MethodConfig, scen: ScenarioData, config: ScenarioConfig, rng: RngHandle) -> dict:
    if method.kind == "null":
        pred = np.full_like(scen.truth, scen.truth.mean())
        return {"rmse": rmse_metric(pred, scen.truth), "coverage": float("nan"),
                "width": float("nan"), "eta": float("nan")}
    trunc = apply_truncation(scen.train, config.tau)
    cfg = method.sampler
    if method.cv:
        sel = cross_validate_eta(trunc, scen.train, cfg, rng.spawn(0), method.multipliers, method.folds)
        cfg = replace(cfg, eta=sel.chosen_eta)
    draws = run_mcmc(cfg, trunc, scen.train, rng.spawn(1))
    summ = posterior_summary(draws.predict(scen.X_test), 0.95)
    return {"rmse": rmse_metric(summ["mean"], scen.truth),
            "coverage": coverage_metric(summ["lower"], summ["upper"], scen.truth),
            "width": float(np.mean(summ["upper"] - summ["lower"])),
            "eta": draws.eta}


def run_replication(config: ScenarioConfig, methods, rep: int):
    """Rows for every method on replication ``rep`` plus per-method wall times.

    Data come from stream ``(rep, 0)`` of the scenario seed and method ``m``
    uses stream ``(rep, 1, m)``, so adding methods never changes the data.
    """
    base = RngHandle(config.seed, (rep,))
    scen = gen_scenario(config, base.spawn(0))
    rows, times = [], []
    for m, method in enumerate(methods):
        t0 = time.perf_counter()
        res = run_method(method, scen, config, base.spawn(1, m))
        times.append(time.perf_counter() - t0)
        rows.append({
            "family": config.family, "n": config.n, "p": config.p, "tau": config.tau,
            "censoring": config.censoring, "rate": config.rate, "method": method.name,
            "replication": rep, "censor_rate": scen.censor_rate, **res,
        })
    return rows, times


def _rep_task(args):
    return run_replication(*args)


def run_simulation(config: ScenarioConfig, methods, jobs: int = 1):
    """All replications; rows come back ordered by (replication, method)."""
    tasks = [(config, list(methods), rep) for rep in range(config.replications)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_rep_task, tasks))
    else:
        out = [_rep_task(t) for t in tasks]
    rows = [r for rs, _ in out for r in rs]
    times = [(rep, methods[m].name, t) for rep, (_, ts) in enumerate(out) for m, t in enumerate(ts)]
    return rows, times


def aggregate(rows) -> list[dict]:
    """Mean and spread per method, in first-appearance order."""
    order, groups = [], {}
    for r in rows:
        key = (r["method"], r["family"], r["n"], r["p"], r["censoring"], r["rate"])
        if key not in groups:
            order.append(key)
            groups[key] = []
        groups[key].append(r)
    out = []
    for key in order:
        g = groups[key]
        rm = np.array([r["rmse"] for r in g])
        cov = np.array([r["coverage"] for r in g])
        wid = np.array([r["width"] for r in g])
        out.append({
            "method": key[0], "family": key[1], "n": key[2], "p": key[3], "censoring": key[4],
            "rate": key[5], "replications": len(g), "mean_rmse": float(rm.mean()),
            "sd_rmse": float(rm.std(ddof=1)) if len(g) > 1 else 0.0,
            "mean_coverage": float(cov.mean()) if not np.all(np.isnan(cov)) else float("nan"),
            "mean_width": float(wid.mean()) if not np.all(np.isnan(wid)) else float("nan"),
            "mean_censor_rate": float(np.mean([r["censor_rate"] for r in g])),
        })
    return out


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 10))
    return str(v)


def write_rows(path, rows, fields):
    with atomic_open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])
