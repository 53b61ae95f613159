"""Posterior draws of the censoring cumulative hazard.

Two models supply the inverse-probability weights ``exp{Lambda(U_i | x_i)}``:

* a gamma-process prior on a piecewise-linear cumulative hazard, for
  censoring independent of covariates;
* an accelerated-failure-time sum-of-trees model for the log censoring time
  with Gaussian residuals, for censoring that depends on covariates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import TruncatedDataset
from .errors import ConfigurationError, ParameterDomainError
from .numerics import RngHandle, log_normal_sf, sample_trunc_normal
from .trees import CutpointGrid, LeafPriorParams, SlotForest, TreePriorParams

MODEL_TAGS = ("noninformative", "informative", "fixed")
DEFAULT_WEIGHT_CAP = 20.0


@dataclass(frozen=True)
class CumHazDraw:
    """One draw of ``Lambda(U_i^tau | x_i)`` for every observation."""

    values: np.ndarray
    model_tag: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if self.model_tag not in MODEL_TAGS:
            raise ConfigurationError(f"unknown model tag {self.model_tag!r}")
        if not np.all(v >= 0):
            raise ParameterDomainError("cumulative hazard values must be non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def weights(self, cap: float | None = DEFAULT_WEIGHT_CAP):
        """``(exp(Lambda) capped at cap, number of capped entries)``."""
        w = np.exp(np.minimum(self.values, 700.0))
        if cap is None:
            return w, 0
        hit = w > cap
        return np.where(hit, cap, w), int(hit.sum())


def ipcw_weights(delta_tau, draw: CumHazDraw, cap: float | None = DEFAULT_WEIGHT_CAP):
    """Loss weights ``delta_i^tau * min(exp(Lambda_i), cap)`` and the count of capped events."""
    delta = np.asarray(delta_tau) == 1
    w, _ = draw.weights(None)
    n_capped = 0
    if cap is not None:
        hit = delta & (w > cap)
        n_capped = int(hit.sum())
        w = np.minimum(w, cap)
    return np.where(delta, w, 0.0), n_capped


def freeze_weights(draws, cap: float | None = None) -> CumHazDraw:
    """Collapse several draws into one whose weight is the mean weight."""
    draws = list(draws)
    if not draws:
        raise ConfigurationError("freeze_weights needs at least one draw")
    if len(draws) == 1 and cap is None:
        return CumHazDraw(draws[0].values, "fixed")
    mean_w = np.mean([d.weights(cap)[0] for d in draws], axis=0)
    return CumHazDraw(np.maximum(np.log(mean_w), 0.0), "fixed")


# ---------------------------------------------------------------------------
# gamma process


@dataclass
class GammaProcessConfig:
    """Interval grid ``0 < s_1 < ... < s_J`` and prior ``Gamma(kappa0 * dalpha_j, kappa0)``
    on each increment."""

    grid: np.ndarray
    kappa0: float = 1.0
    alpha_increments: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.atleast_1d(np.asarray(self.grid, dtype=float))
        J = self.grid.size
        if J < 1:
            raise ConfigurationError("gamma-process grid needs at least one point")
        if self.grid[0] <= 0 or np.any(np.diff(self.grid) <= 0):
            raise ConfigurationError("gamma-process grid must be positive and strictly increasing")
        if not self.kappa0 > 0:
            raise ParameterDomainError(f"kappa0 must be positive, got {self.kappa0}")
        if self.alpha_increments is None:
            self.alpha_increments = np.ones(J)
        else:
            self.alpha_increments = np.broadcast_to(
                np.asarray(self.alpha_increments, dtype=float), (J,)
            ).copy()
        if np.any(self.alpha_increments <= 0):
            raise ParameterDomainError("alpha increments must be positive")

    @property
    def J(self) -> int:
        return self.grid.size

    @property
    def shape(self) -> np.ndarray:
        return self.kappa0 * self.alpha_increments


def default_gamma_grid(u_tau, max_intervals: int = 50) -> np.ndarray:
    """Grid at empirical quantiles of the follow-up times, ending at their maximum."""
    u = np.asarray(u_tau, dtype=float)
    if max_intervals < 1:
        raise ConfigurationError("the gamma-process grid needs at least one interval")
    distinct = np.unique(u[u > 0])
    if distinct.size == 0:
        raise ConfigurationError("all follow-up times are zero")
    J = min(max_intervals, distinct.size)
    s = np.quantile(u, np.arange(1, J + 1) / J)
    s[-1] = distinct[-1]
    return np.unique(s[s > 0])


@dataclass(frozen=True)
class GroupedCensoringData:
    E: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        E = np.asarray(self.E, dtype=np.int64)
        R = np.asarray(self.R, dtype=np.int64)
        if E.shape != R.shape or np.any(E < 0) or np.any(E > R) or np.any(np.diff(R) > 0):
            raise ConfigurationError("grouped censoring counts violate 0 <= E <= R, R nonincreasing")
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "R", R)


def censoring_indicator(trunc: TruncatedDataset) -> np.ndarray:
    """Observed censorings before the horizon (original event indicator 0)."""
    return (trunc.events == 0) & (trunc.u_tau < trunc.horizon)


def group_censoring(trunc: TruncatedDataset, config: GammaProcessConfig) -> GroupedCensoringData:
    """Censoring counts ``E_j`` in ``(s_{j-1}, s_j]`` and risk sets ``R_j = #{U^tau > s_{j-1}}``."""
    u = trunc.u_tau
    s = config.grid
    if u.max() > s[-1] * (1 + 1e-12):
        raise ConfigurationError(f"gamma-process grid ends at {s[-1]:.6g} but follow-up reaches {u.max():.6g}")
    lower = np.concatenate(([0.0], s[:-1]))
    us = np.sort(u)
    R = u.size - np.searchsorted(us, lower, side="right")
    cs = np.sort(u[censoring_indicator(trunc)])
    upto = np.searchsorted(cs, s, side="right")
    E = np.diff(np.concatenate(([np.searchsorted(cs, 0.0, side="right")], upto)))
    return GroupedCensoringData(E, R)


def _log_target(x, a, r, E):
    """Log density of ``log(lambda)`` under the increment posterior (unnormalized)."""
    lam = np.exp(x)
    out = a * x - r * lam
    if E:
        out = out + E * np.log(-np.expm1(-lam))
    return out


def _dlog_target(x, a, r, E):
    lam = np.exp(x)
    d = a - r * lam
    if E:
        d = d + E * lam / np.expm1(lam)
    return d


def _d2log_target(x, a, r, E):
    lam = np.exp(x)
    d2 = -r * lam
    if E:
        em1 = np.expm1(lam)
        d2 = d2 + E * lam * (em1 - lam * (em1 + 1.0)) / (em1 * em1)
    return d2


def _sample_log_concave(a, r, E, gen, size):
    """Exact draws of ``lambda`` with density ``lambda^(a-1) e^(-r lambda) (1-e^-lambda)^E``.

    The density of ``log(lambda)`` is log-concave, so tangent lines at five
    points around the mode bound it from above; we sample the resulting
    piecewise-exponential envelope and accept/reject.
    """
    # mode of log(lambda): the derivative is strictly decreasing, so bracket and bisect
    lo, hi = -1.0, 1.0
    while _dlog_target(lo, a, r, E) <= 0:
        lo -= 2.0 * (hi - lo)
    while _dlog_target(hi, a, r, E) >= 0:
        hi += 2.0 * (hi - lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _dlog_target(mid, a, r, E) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10:
            break
    m = 0.5 * (lo + hi)
    sd = 1.0 / math.sqrt(max(-_d2log_target(m, a, r, E), 1e-12))
    z = m + sd * np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    hz = _log_target(z, a, r, E)
    dz = _dlog_target(z, a, r, E)
    # the tangent at the mode is flat; keep it but drop numerically flat extremes
    keep = np.ones(5, bool)
    keep[0] = dz[0] > 0
    keep[-1] = dz[-1] < 0
    z, hz, dz = z[keep], hz[keep], dz[keep]
    # intersections of consecutive tangents
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = (hz[1:] - hz[:-1] + dz[:-1] * z[:-1] - dz[1:] * z[1:]) / (dz[:-1] - dz[1:])
    edges = np.concatenate(([-np.inf], xi, [np.inf]))
    ref = hz.max()

    def seg_logmass(k):
        lo_, hi_ = edges[k], edges[k + 1]
        b = dz[k]
        c = hz[k] - b * z[k] - ref
        if abs(b) < 1e-300:
            return c + math.log(hi_ - lo_)
        # integral of exp(c + b x) over (lo_, hi_)
        if b > 0:
            return c + b * hi_ - math.log(b) + (math.log(-math.expm1(b * (lo_ - hi_))) if np.isfinite(lo_) else 0.0)
        return c + b * lo_ - math.log(-b) + (math.log(-math.expm1(b * (hi_ - lo_))) if np.isfinite(hi_) else 0.0)

    lm = np.array([seg_logmass(k) for k in range(z.size)])
    probs = np.exp(lm - lm.max())
    probs /= probs.sum()

    cum = np.cumsum(probs)
    out = np.empty(size)
    filled = 0
    while filled < size:
        m = int(1.3 * (size - filled)) + 8
        k = np.minimum(np.searchsorted(cum, gen.random(m), side="right"), z.size - 1)
        lo_, hi_, b = edges[k], edges[k + 1], dz[k]
        u = gen.random(m)
        x = np.empty(m)
        with np.errstate(invalid="ignore", over="ignore"):
            # inverse CDF of exp(b x) on each segment, anchored at its finite end
            flat = np.abs(b) < 1e-300
            up = ~flat & (b > 0)
            down = ~flat & (b < 0)
            span_up = np.where(np.isfinite(lo_), -np.expm1(b * (lo_ - hi_)), 1.0)
            span_dn = np.where(np.isfinite(hi_), -np.expm1(b * (hi_ - lo_)), 1.0)
            x[up] = hi_[up] + np.log1p(-u[up] * span_up[up]) / b[up]
            x[down] = lo_[down] + np.log1p(-u[down] * span_dn[down]) / b[down]
            x[flat] = lo_[flat] + u[flat] * (hi_[flat] - lo_[flat])
        env = hz[k] + dz[k] * (x - z[k])
        ok = np.log(gen.random(m)) <= _log_target(x, a, r, E) - env
        acc = np.exp(x[ok])[: size - filled]
        out[filled:filled + acc.size] = acc
        filled += acc.size
    return out


def sample_gamma_process(grouped: GroupedCensoringData, config: GammaProcessConfig,
                         rng: RngHandle, size: int | None = None) -> np.ndarray:
    """Independent posterior draws of the increments ``lambda_1..lambda_J``.

    The conditional density of ``lambda_j`` is proportional to
    ``lambda^(a_j - 1) exp{-lambda (R_j - E_j + kappa0)} (1 - e^-lambda)^E_j``
    with ``a_j = kappa0 * dalpha_j``. When ``a_j = 1``, ``V = exp(-lambda_j)`` is
    ``Beta(R_j - E_j + kappa0, E_j + 1)``; otherwise an exact rejection sampler on
    ``log(lambda_j)`` is used. With ``size`` the result has shape ``(size, J)``.
    """
    if grouped.E.size != config.J:
        raise ConfigurationError("grouped counts and gamma-process grid differ in length")
    gen = rng.generator
    m = 1 if size is None else int(size)
    a = config.shape
    r = (grouped.R - grouped.E).astype(float) + config.kappa0
    E = grouped.E
    out = np.empty((m, config.J))
    beta_cols = np.flatnonzero(a == 1.0)
    if beta_cols.size:
        # draw 1 - V directly so small increments keep full precision
        w = gen.beta(E[beta_cols] + 1.0, r[beta_cols], size=(m, beta_cols.size))
        out[:, beta_cols] = -np.log1p(-w)
    for j in np.flatnonzero(a != 1.0):
        out[:, j] = _sample_log_concave(float(a[j]), float(r[j]), int(E[j]), gen, m)
    return out[0] if size is None else out


def evaluate_cumhaz(increments, config: GammaProcessConfig, u):
    """Piecewise-linear ``Lambda(u)`` accumulating ``lambda_j`` across ``(s_{j-1}, s_j]``."""
    lam = np.asarray(increments, dtype=float)
    s = config.grid
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0):
        raise ParameterDomainError("cumulative hazard evaluated at negative time")
    if np.any(u_arr > s[-1] * (1 + 1e-12)):
        raise ParameterDomainError(f"cumulative hazard evaluated beyond the grid end {s[-1]:.6g}")
    knots = np.concatenate(([0.0], s))
    cum = np.concatenate(([0.0], np.cumsum(lam)))
    val = np.interp(u_arr, knots, cum)
    return val if val.ndim else float(val)


class GammaProcessCensoring:
    """Covariate-free censoring model: grouped data are fixed, each call draws
    fresh increments and returns the hazard at every follow-up time."""

    tag = "noninformative"

    def __init__(self, trunc: TruncatedDataset, config: GammaProcessConfig | None = None,
                 max_intervals: int = 50):
        if config is None:
            config = GammaProcessConfig(default_gamma_grid(trunc.u_tau, max_intervals))
        self.config = config
        self.grouped = group_censoring(trunc, config)
        self.u = trunc.u_tau
        self.knots = np.concatenate(([0.0], config.grid))

    def draw(self, rng: RngHandle) -> CumHazDraw:
        lam = sample_gamma_process(self.grouped, self.config, rng)
        cum = np.concatenate(([0.0], np.cumsum(lam)))
        return CumHazDraw(np.interp(self.u, self.knots, cum), self.tag)

    def describe(self) -> dict:
        return {"model": self.tag, "grid_size": self.config.J, "kappa0": self.config.kappa0}


# ---------------------------------------------------------------------------
# AFT sum-of-trees model for informative censoring


@dataclass
class AftCensoringState:
    """Current state of the log-censoring-time regression.

    ``log_c`` holds the observed log censoring time for censored rows and the
    augmented (latent) value for rows whose event was observed.
    """

    forest: SlotForest
    sigma_c: float
    log_c: np.ndarray
    offset: float = 0.0

    @property
    def m(self) -> np.ndarray:
        """``m^C(x_i)`` at the training rows."""
        return self.offset + self.forest.fit


@dataclass
class AftCensoringModel:
    """Data, priors and tree settings of the AFT censoring model.

    The inverse-gamma prior on ``sigma_C^2`` uses the usual BART calibration:
    ``nu`` degrees of freedom and scale chosen so that the ``q`` quantile of
    the prior equals the sample variance of ``log U``.
    """

    times: np.ndarray
    events: np.ndarray
    X: np.ndarray
    H: int = 50
    kappa: float = 2.0
    nu: float = 3.0
    q: float = 0.9
    tree_prior: TreePriorParams = field(default_factory=TreePriorParams)
    grid_size: int = 100
    max_exponent: float = 50.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.events = np.asarray(self.events).astype(np.int8)
        self.X = np.ascontiguousarray(self.X, dtype=float).reshape(self.times.size, -1)
        if self.H < 1:
            raise ConfigurationError("the censoring forest needs at least one tree")
        if not self.max_exponent > 0:
            raise ParameterDomainError("max_exponent must be positive")
        # a zero follow-up time carries no censoring information worth a -inf
        tiny = np.min(self.times[self.times > 0]) * 1e-3 if np.any(self.times > 0) else 1e-12
        self.log_u = np.log(np.maximum(self.times, tiny))
        self.grid = CutpointGrid.from_data(self.X, self.grid_size)
        spread = float(np.ptp(self.log_u))
        if spread <= 0:
            spread = 1.0
        self.leaf_prior = LeafPriorParams(spread / (2.0 * self.kappa * math.sqrt(self.H)))
        s2 = float(np.var(self.log_u)) if self.times.size > 1 else 1.0
        s2 = max(s2, 1e-6)
        self.prior_scale = s2 * stats.chi2.ppf(1.0 - self.q, self.nu) / self.nu

    @property
    def augmented(self) -> np.ndarray:
        return self.events == 1

    def init_state(self, rng: RngHandle) -> AftCensoringState:
        n = self.times.size
        offset = float(np.mean(self.log_u))
        sigma = float(np.sqrt(max(np.var(self.log_u), 1e-6))) if n > 1 else 1.0
        log_c = self.log_u.copy()
        aug = self.augmented
        if np.any(aug):
            log_c[aug] = sample_trunc_normal(offset, sigma, self.log_u[aug], rng)
        return AftCensoringState(SlotForest(self.H, n), sigma, log_c, offset)

    def cumhaz(self, state: AftCensoringState, u, rows=None, m=None) -> np.ndarray:
        """``Lambda(u_i | x_i) = -log P(xi > log u_i - m^C(x_i))`` at training rows."""
        if m is None:
            m = state.m if rows is None else state.m[rows]
        return cumhaz_from_aft_values(u, m, state.sigma_c, self.max_exponent)

    def draw(self, state: AftCensoringState, u, rng: RngHandle) -> CumHazDraw:
        """Advance the chain one sweep and return the hazard at ``u`` (training rows)."""
        aft_censoring_gibbs_step(state, self, rng)
        return CumHazDraw(self.cumhaz(state, u), "informative")

    def describe(self) -> dict:
        return {"model": "informative", "H": self.H, "residual": "gaussian",
                "nu": self.nu, "q": self.q, "sigma_mu": self.leaf_prior.sigma_mu}


def aft_censoring_gibbs_step(state: AftCensoringState, model: AftCensoringModel,
                             rng: RngHandle) -> AftCensoringState:
    """One sweep: redraw latent log censoring times, the forest, then ``sigma_C^2``."""
    aug = model.augmented
    if np.any(aug):
        state.log_c[aug] = sample_trunc_normal(state.m[aug], state.sigma_c, model.log_u[aug], rng)
    n = state.log_c.size
    y = state.log_c - state.offset
    eta = 1.0 / (2.0 * state.sigma_c ** 2)
    state.forest.sweep(y, np.ones(n), model.X, model.grid, eta, model.leaf_prior, model.tree_prior, rng)
    ssr = float(np.sum((y - state.forest.fit) ** 2))
    shape = 0.5 * (model.nu + n)
    scale = 0.5 * (model.nu * model.prior_scale + ssr)
    state.sigma_c = math.sqrt(scale / rng.generator.gamma(shape))
    return state


def cumhaz_from_aft_values(u, m, sigma_c: float, max_exponent: float = 50.0):
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ParameterDomainError("cumulative hazard evaluated at negative time")
    with np.errstate(divide="ignore"):
        z = (np.log(u) - np.asarray(m, dtype=float)) / sigma_c
    val = np.minimum(-log_normal_sf(z), max_exponent)
    val = np.maximum(val, 0.0)  # -0.0 at u = 0
    return val if np.ndim(val) else float(val)


def cumhaz_from_aft(state: AftCensoringState, u, x, model: AftCensoringModel) -> float:
    """``Lambda(u | x)`` for a new covariate row ``x`` under the current state."""
    from .trees import ForestDraws

    xr = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=float)))
    pack = state.forest.pack()
    m = state.offset + ForestDraws.concat([pack], model.X.shape[1]).predict(xr, model.grid)[0]
    return cumhaz_from_aft_values(u, m if np.ndim(u) else m[0], state.sigma_c, model.max_exponent)


class AftCensoring:
    """Sampler-facing wrapper holding the AFT model, its chain state and the
    follow-up times at which the hazard is evaluated."""

    tag = "informative"

    def __init__(self, times, events, X, u_tau, rng: RngHandle, **kwargs):
        self.model = AftCensoringModel(times, events, X, **kwargs)
        self.state = self.model.init_state(rng)
        self.u = np.asarray(u_tau, dtype=float)

    def draw(self, rng: RngHandle) -> CumHazDraw:
        return self.model.draw(self.state, self.u, rng)

    def describe(self) -> dict:
        return self.model.describe()


class FixedCensoring:
    """A user-supplied hazard used unchanged at every iteration."""

    tag = "fixed"

    def __init__(self, draw: CumHazDraw):
        self.fixed = CumHazDraw(draw.values, "fixed")

    def draw(self, rng: RngHandle) -> CumHazDraw:
        return self.fixed

    def describe(self) -> dict:
        return {"model": "fixed"}


__all__ = [
    "AftCensoring",
    "AftCensoringModel",
    "AftCensoringState",
    "CumHazDraw",
    "FixedCensoring",
    "GammaProcessCensoring",
    "GammaProcessConfig",
    "GroupedCensoringData",
    "aft_censoring_gibbs_step",
    "cumhaz_from_aft",
    "cumhaz_from_aft_values",
    "default_gamma_grid",
    "evaluate_cumhaz",
    "freeze_weights",
    "group_censoring",
    "ipcw_weights",
    "sample_gamma_process",
]
