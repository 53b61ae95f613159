"""Right-censored survival data, restriction at a horizon, and the
Kaplan-Meier / IPCW machinery used to center outcomes."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, NumericalError, ParameterDomainError

log = logging.getLogger(__name__)

_MISSING = {"", "na", "nan", "null", "none", "."}


@dataclass
class SurvivalDataset:
    """Follow-up times, event indicators and an ``(n, p)`` covariate matrix."""

    times: np.ndarray
    events: np.ndarray
    covariates: np.ndarray
    covariate_names: list[str] = field(default_factory=list)
    ids: list[str] | None = None
    dropped_rows: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.events = np.asarray(self.events).astype(np.int8)
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X.reshape(len(self.times), -1) if X.size else np.empty((len(self.times), 0))
        self.covariates = X
        n = self.times.shape[0]
        if n < 1:
            raise InputError("dataset is empty")
        if self.events.shape[0] != n or X.shape[0] != n:
            raise InputError(
                f"length mismatch: {n} times, {self.events.shape[0]} events, {X.shape[0]} covariate rows"
            )
        if not np.all(np.isfinite(self.times)) or np.any(self.times < 0):
            raise InputError("times must be finite and non-negative")
        if not np.all(np.isin(self.events, (0, 1))):
            raise InputError("events must be 0 or 1")
        if not self.covariate_names:
            self.covariate_names = [f"x{j + 1}" for j in range(X.shape[1])]
        if len(self.covariate_names) != X.shape[1]:
            raise InputError("covariate_names length does not match covariate columns")
        if self.ids is None:
            self.ids = [str(i + 1) for i in range(n)]

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def subset(self, rows) -> "SurvivalDataset":
        rows = np.asarray(rows)
        return SurvivalDataset(
            self.times[rows],
            self.events[rows],
            self.covariates[rows],
            list(self.covariate_names),
            [self.ids[i] for i in rows],
        )


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise InputError(f"row {row}: non-numeric value {cell!r} in column {col!r}") from None


def load_csv(
    path,
    time_col: str,
    event_col: str,
    *,
    delimiter: str = ",",
    id_col: str | None = None,
    covariates: list[str] | None = None,
) -> SurvivalDataset:
    """Read a header-bearing CSV into a :class:`SurvivalDataset`.

    All columns other than the time, event and (optional) id columns become
    covariates unless ``covariates`` names them explicitly. Rows with a missing
    cell are dropped (complete-case analysis); their 1-based data-row numbers
    are kept in ``dropped_rows``.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"input file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path} is empty") from None
        rows = [r for r in reader if any(c.strip() for c in r)]

    for col in (time_col, event_col) + ((id_col,) if id_col else ()):
        if col not in header:
            raise InputError(f"column {col!r} not found in {path} (columns: {', '.join(header)})")
    skip = {time_col, event_col, id_col}
    if covariates is None:
        covariates = [h for h in header if h not in skip]
    else:
        missing = [c for c in covariates if c not in header]
        if missing:
            raise InputError(f"covariate columns not found: {', '.join(missing)}")
    ti, ei = header.index(time_col), header.index(event_col)
    ci = [header.index(c) for c in covariates]
    ii = header.index(id_col) if id_col else None

    times, events, X, ids, dropped = [], [], [], [], []
    for k, raw in enumerate(rows, start=1):
        if len(raw) != len(header):
            raise InputError(f"row {k}: expected {len(header)} fields, found {len(raw)}")
        cells = [c.strip() for c in raw]
        if any(cells[j].lower() in _MISSING for j in [ti, ei, *ci]):
            dropped.append(k)
            continue
        t = _parse_float(cells[ti], k, time_col)
        e = _parse_float(cells[ei], k, event_col)
        if e not in (0.0, 1.0):
            raise InputError(f"row {k}: event value {cells[ei]!r} is not 0 or 1")
        if not math.isfinite(t) or t < 0:
            raise InputError(f"row {k}: time {cells[ti]!r} must be finite and non-negative")
        times.append(t)
        events.append(int(e))
        X.append([_parse_float(cells[j], k, header[j]) for j in ci])
        ids.append(cells[ii] if ii is not None else str(k))

    if dropped:
        log.warning("%d row%s dropped for missing values", len(dropped), "" if len(dropped) == 1 else "s")
    if not times:
        raise InputError(f"{path}: no complete rows")
    X = np.asarray(X, dtype=float).reshape(len(times), len(ci))
    return SurvivalDataset(np.array(times), np.array(events), X, list(covariates), ids, dropped)


def load_covariates(path, names: list[str], *, delimiter: str = ",", id_col: str | None = None):
    """Read the named covariate columns (any order, extra columns ignored).

    Returns ``(X, ids, dropped_rows)``. Rows with a missing covariate are
    dropped with a warning.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"input file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path} is empty") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    missing = [c for c in names if c not in header]
    if id_col and id_col not in header:
        missing.append(id_col)
    if missing:
        raise InputError(f"columns required by the model are missing from {path}: {', '.join(missing)}")
    ci = [header.index(c) for c in names]
    ii = header.index(id_col) if id_col else None
    X, ids, dropped = [], [], []
    for k, raw in enumerate(rows, start=1):
        if len(raw) != len(header):
            raise InputError(f"row {k}: expected {len(header)} fields, found {len(raw)}")
        cells = [c.strip() for c in raw]
        if any(cells[j].lower() in _MISSING for j in ci):
            dropped.append(k)
            continue
        X.append([_parse_float(cells[j], k, header[j]) for j in ci])
        ids.append(cells[ii] if ii is not None else str(k))
    if dropped:
        log.warning("%d row%s dropped for missing values", len(dropped), "" if len(dropped) == 1 else "s")
    if not X:
        raise InputError(f"{path}: no complete rows")
    return np.asarray(X, dtype=float).reshape(len(X), len(ci)), ids, dropped


@dataclass(frozen=True)
class TimeTransform:
    """Monotone increasing outcome transform ``b``: ``identity`` or ``log``."""

    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in ("identity", "log"):
            raise ParameterDomainError(f"unknown transform {self.kind!r}")

    def forward(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "log":
            if np.any(t <= 0):
                raise ParameterDomainError("log transform requires strictly positive times")
            return np.log(t)
        return t

    def inverse(self, v):
        v = np.asarray(v, dtype=float)
        return np.exp(v) if self.kind == "log" else v

    @property
    def lower(self) -> float:
        """b(0)."""
        return -math.inf if self.kind == "log" else 0.0


class StepFunction:
    """Right-continuous step function with value 1 before the first jump."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)

    def __call__(self, t):
        idx = np.searchsorted(self.times, t, side="right")
        out = np.concatenate(([1.0], self.values))[idx]
        return out if np.ndim(out) else float(out)

    def left_limit(self, t):
        idx = np.searchsorted(self.times, t, side="left")
        out = np.concatenate(([1.0], self.values))[idx]
        return out if np.ndim(out) else float(out)


def km_censoring_survival(times, events=None) -> StepFunction:
    """Kaplan-Meier estimate of the censoring survival function.

    Censorings (``events == 0``) are the events here; the at-risk set at ``t``
    is everyone with follow-up ``>= t``. Tied censorings share one factor.
    Accepts a :class:`SurvivalDataset` in place of ``times``.
    """
    if isinstance(times, SurvivalDataset):
        times, events = times.times, times.events
    times = np.asarray(times, dtype=float)
    cens = np.asarray(events) == 0
    order = np.argsort(times, kind="stable")
    t_sorted = times[order]
    uniq, first = np.unique(t_sorted, return_index=True)
    at_risk = times.size - first
    d = np.add.reduceat(cens[order].astype(float), first)
    jump = d > 0
    surv = np.cumprod(1.0 - d[jump] / at_risk[jump])
    return StepFunction(uniq[jump], surv)


@dataclass
class TruncatedDataset:
    """Outcomes restricted at horizon ``tau`` (on the ``b`` scale) and centered."""

    u_tau: np.ndarray
    delta_tau: np.ndarray
    y_tau: np.ndarray
    mu_hat_b: float
    tau: float
    transform: TimeTransform
    events: np.ndarray  # original event indicators, needed by the censoring models
    b_u_tau: np.ndarray

    @property
    def horizon(self) -> float:
        """b^{-1}(tau) on the original time scale."""
        return float(self.transform.inverse(self.tau))

    @property
    def n(self) -> int:
        return self.u_tau.shape[0]


def ipcw_rmst_estimate(b_u_tau, delta_tau, u_tau, G: StepFunction) -> float:
    """Inverse-probability-of-censoring weighted mean of ``b(U^tau)``.

    ``G`` is evaluated as a left limit at each follow-up time so an event is
    never divided by a drop that includes its own time.
    """
    b_u_tau = np.asarray(b_u_tau, dtype=float)
    delta_tau = np.asarray(delta_tau)
    g = np.asarray(G.left_limit(np.asarray(u_tau, dtype=float)), dtype=float)
    ev = delta_tau == 1
    bad = np.flatnonzero(ev & (g <= 0))
    if bad.size:
        raise NumericalError(f"censoring survival is zero at event time of observation {bad[0] + 1}")
    # sort before summing so the result is permutation invariant bit-for-bit
    terms = np.where(ev, b_u_tau / np.where(ev, g, 1.0), 0.0)
    return float(math.fsum(np.sort(terms))) / b_u_tau.size


def apply_truncation(data: SurvivalDataset, tau: float, transform: TimeTransform | str = "identity") -> TruncatedDataset:
    """Restrict follow-up at ``b^{-1}(tau)`` and center by the IPCW RMST estimate.

    Subjects whose follow-up reaches the horizon have a known restricted
    outcome ``tau``, so their truncated event indicator is set to 1.
    """
    if isinstance(transform, str):
        transform = TimeTransform(transform)
    if not (tau > transform.lower) or not math.isfinite(tau):
        raise ParameterDomainError(f"tau={tau} must be finite and exceed b(0)={transform.lower}")
    bt = transform.forward(data.times)
    horizon = float(transform.inverse(tau))
    reached = bt >= tau
    u_tau = np.where(reached, horizon, data.times)
    b_u_tau = np.where(reached, tau, bt)
    delta_tau = np.where(reached, 1, data.events).astype(np.int8)
    if not np.any(delta_tau == 1):
        raise ParameterDomainError("no events before the restriction point")
    G = km_censoring_survival(data)
    mu_hat = ipcw_rmst_estimate(b_u_tau, delta_tau, u_tau, G)
    if transform.kind == "identity" and not (0.0 <= mu_hat <= tau):
        log.warning("IPCW RMST estimate %.4g lies outside [0, tau=%.4g]", mu_hat, tau)
    return TruncatedDataset(
        u_tau=u_tau,
        delta_tau=delta_tau,
        y_tau=b_u_tau - mu_hat,
        mu_hat_b=mu_hat,
        tau=float(tau),
        transform=transform,
        events=data.events.copy(),
        b_u_tau=b_u_tau,
    )
