"""Command-line interface: ``rmstbart {fit,predict,cv,simulate,importance,pdp}``.

Every option may also come from a YAML file of flag-name keys given with
``--config``; options on the command line win. Exit codes: 2 for bad input
data, 3 for bad configuration, 4 for numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from ._io import atomic_open
from .data import apply_truncation, load_covariates, load_csv
from .errors import ConfigurationError, InputError, RmstBartError
from .numerics import RngHandle
from .persist import FittedModel
from .sampler import (
    DEFAULT_MULTIPLIERS,
    SamplerConfig,
    cross_validate_eta,
    default_sigma_r2,
    partial_dependence,
    posterior_summary,
    run_mcmc,
)
from .simulation import (
    AGG_FIELDS,
    RESULT_FIELDS,
    MethodConfig,
    ScenarioConfig,
    aggregate,
    run_simulation,
    write_rows,
)
from .trees import TreePriorParams

log = logging.getLogger("rmstbart")

CENSORING_TAGS = {"noninf": "noninformative", "dep": "informative", "fixed": "fixed"}
SIM_METHODS = ("null", "default", "cv", "dep", "fixed-weights")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _add(p, *names, suppress=False, **kw):
    # required options may come from --config, so they are checked after merging
    if kw.pop("required", False):
        kw["default"] = None
        kw["help"] = kw.get("help", "") + " (required)"
    elif "default" in kw:
        kw["help"] = kw.get("help", "") + " (default: %(default)s)"
    if suppress:
        kw["default"] = argparse.SUPPRESS
    p.add_argument(*names, **kw)


def _data_args(p, s):
    _add(p, "--input", suppress=s, required=True, help="CSV with follow-up times, event indicators and covariates")
    _add(p, "--time-col", suppress=s, default="time", help="follow-up time column")
    _add(p, "--event-col", suppress=s, default="event", help="event indicator column (1 event, 0 censored)")
    _add(p, "--id-col", suppress=s, default=None, help="optional row identifier column")
    _add(p, "--delimiter", suppress=s, default=",", help="field delimiter")
    _add(p, "--tau", suppress=s, type=float, required=True, help="restriction time on the b(t) scale")
    _add(p, "--transform", suppress=s, choices=("identity", "log"), default="identity",
         help="outcome transform b")


def _sampler_args(p, s):
    _add(p, "--H", suppress=s, type=int, default=200, help="number of trees")
    _add(p, "--eta", suppress=s, type=float, default=None,
         help="loss scale; default 1/(2 sigma_r^2) from a Weibull AFT fit")
    _add(p, "--eta-rule", suppress=s, choices=("inverse", "half"), default="inverse",
         help="default-eta rule: inverse = 1/(2 sigma_r^2), half = sigma_r^2/2")
    _add(p, "--sigma-mu", suppress=s, type=float, default=None,
         help="leaf prior sd; default (b(tau) - mu_hat - Ymin)/(2 kappa sqrt(H))")
    _add(p, "--kappa", suppress=s, type=float, default=2.0, help="leaf prior shrinkage")
    _add(p, "--alpha", suppress=s, type=float, default=0.95, help="tree prior base split probability")
    _add(p, "--beta", suppress=s, type=float, default=2.0, help="tree prior depth penalty")
    _add(p, "--iters", suppress=s, type=int, default=2500, help="MCMC iterations including burn-in")
    _add(p, "--burnin", suppress=s, type=int, default=500, help="burn-in iterations")
    _add(p, "--thin", suppress=s, type=int, default=1, help="keep every thin-th post-burn-in draw")
    _add(p, "--chains", suppress=s, type=int, default=1, help="independent chains")
    _add(p, "--censoring", suppress=s, choices=("noninf", "dep", "fixed"), default="noninf",
         help="censoring model: gamma process, AFT trees, or fixed Kaplan-Meier weights")
    _add(p, "--fixed-weights", suppress=s, action="store_true", default=False,
         help="freeze the censoring model at its posterior-mean weights")
    _add(p, "--cens-grid-size", suppress=s, type=int, default=50, help="gamma-process intervals J (at most)")
    _add(p, "--kappa0", suppress=s, type=float, default=1.0, help="gamma-process prior precision")
    _add(p, "--alpha-increment", suppress=s, type=float, default=1.0, help="gamma-process prior mean increment")
    _add(p, "--cens-H", suppress=s, type=int, default=50, help="trees in the AFT censoring model")
    _add(p, "--weight-cap", suppress=s, type=float, default=20.0, help="cap on exp(Lambda) weights")
    _add(p, "--grid-size", suppress=s, type=int, default=100, help="cutpoints per covariate")
    _add(p, "--seed", suppress=s, type=int, default=0, help="master random seed")


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """The full parser. With ``suppress`` no defaults are filled in, which
    tells explicitly given flags apart from defaults."""
    s = suppress
    parser = _Parser(prog="rmstbart", description="Restricted mean survival time regression with BART.")
    parser.add_argument("--config", default=argparse.SUPPRESS if s else None,
                        help="YAML file of option values (flag names as keys)")
    parser.add_argument("--log-level", default=argparse.SUPPRESS if s else "INFO",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="stderr log level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit the model and write draws plus a per-row summary")
    _data_args(p, s)
    _sampler_args(p, s)
    _add(p, "--output-model", suppress=s, required=True, help="model JSON to write")
    _add(p, "--output-summary", suppress=s, required=True, help="per-row summary CSV to write")
    _add(p, "--level", suppress=s, type=float, default=0.95, help="credible level")

    p = sub.add_parser("predict", help="posterior mean and interval for new rows")
    _add(p, "--model", suppress=s, required=True, help="model JSON from fit")
    _add(p, "--input", suppress=s, required=True, help="CSV containing the model's covariate columns")
    _add(p, "--id-col", suppress=s, default=None, help="optional row identifier column")
    _add(p, "--delimiter", suppress=s, default=",", help="field delimiter")
    _add(p, "--output", suppress=s, required=True, help="CSV to write")
    _add(p, "--level", suppress=s, type=float, default=0.95, help="credible level")

    p = sub.add_parser("cv", help="choose eta by K-fold cross-validation")
    _data_args(p, s)
    _sampler_args(p, s)
    _add(p, "--candidates", suppress=s, type=_floats, default=list(DEFAULT_MULTIPLIERS),
         help="multipliers m of sigma_r^2; eta = 1/(2 m sigma_r^2)")
    _add(p, "--folds", suppress=s, type=int, default=5, help="number of folds")
    _add(p, "--jobs", suppress=s, type=int, default=1, help="parallel worker processes")
    _add(p, "--output", suppress=s, required=True, help="CSV of per-candidate fold scores")

    p = sub.add_parser("simulate", help="run a synthetic study and score RMSE and coverage")
    _add(p, "--family", suppress=s, choices=("friedman", "abs-linear"), default="friedman", help="mean function")
    _add(p, "--n", suppress=s, type=int, default=1000, help="training size")
    _add(p, "--n-test", suppress=s, type=int, default=1000, help="test size")
    _add(p, "--p", suppress=s, type=int, default=10, help="number of covariates")
    _add(p, "--sim-tau", suppress=s, type=float, default=None,
         help="restriction time; default 25 (friedman) or 5 (abs-linear)")
    _add(p, "--sim-censoring", suppress=s, choices=("noninf", "informative", "none"), default="noninf",
         help="censoring mechanism")
    _add(p, "--r", suppress=s, type=float, default=0.1, help="censoring rate r, or shape r_D when informative")
    _add(p, "--reps", suppress=s, type=int, default=5, help="replications")
    _add(p, "--methods", suppress=s, default="null,default",
         help=f"comma-separated methods from {', '.join(SIM_METHODS)}")
    _sampler_args(p, s)
    _add(p, "--candidates", suppress=s, type=_floats, default=list(DEFAULT_MULTIPLIERS),
         help="CV multipliers for the cv method")
    _add(p, "--folds", suppress=s, type=int, default=5, help="CV folds for the cv method")
    _add(p, "--jobs", suppress=s, type=int, default=1, help="parallel worker processes")
    _add(p, "--output", suppress=s, required=True, help="per-replication CSV")
    _add(p, "--aggregate", suppress=s, default=None, help="aggregate CSV (default: <output stem>_aggregate.csv)")

    p = sub.add_parser("importance", help="posterior mean split counts per covariate")
    _add(p, "--model", suppress=s, required=True, help="model JSON from fit")
    _add(p, "--output", suppress=s, required=True, help="CSV to write")

    p = sub.add_parser("pdp", help="partial dependence of the RMST on one covariate")
    _add(p, "--model", suppress=s, required=True, help="model JSON from fit")
    _add(p, "--input", suppress=s, required=True, help="training CSV (covariates)")
    _add(p, "--delimiter", suppress=s, default=",", help="field delimiter")
    _add(p, "--var", suppress=s, required=True, help="covariate name")
    _add(p, "--grid-points", suppress=s, type=int, default=20, help="evaluation points across the observed range")
    _add(p, "--output", suppress=s, required=True, help="CSV to write")

    # the global options are also accepted after the subcommand
    for p in sub.choices.values():
        p.add_argument("--config", default=argparse.SUPPRESS, help="YAML file of option values")
        p.add_argument("--log-level", default=argparse.SUPPRESS, choices=("DEBUG", "INFO", "WARNING", "ERROR"),
                       help="stderr log level")
    return parser


def parse_args(argv) -> argparse.Namespace:
    """Parse flags, then fill anything not given on the command line from ``--config``."""
    argv = list(argv)
    args = build_parser().parse_args(argv)
    explicit = set(vars(build_parser(suppress=True).parse_known_args(argv)[0]))
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            conf = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from None
        if not isinstance(conf, dict):
            raise ConfigurationError(f"{path} must hold a flat key/value mapping")
        known = set(vars(args))
        for key, value in conf.items():
            dest = str(key).lstrip("-").replace("-", "_")
            if dest not in known or dest in ("command", "config"):
                raise ConfigurationError(f"unknown option {key!r} in {path}")
            if isinstance(value, (dict, list)) and dest != "candidates":
                raise ConfigurationError(f"option {key!r} in {path} must be a scalar")
            if dest not in explicit:
                if dest == "candidates" and not isinstance(value, list):
                    value = _floats(value)
                setattr(args, dest, value)
    for req in ("input", "tau", "output", "output_model", "output_summary", "model", "var"):
        if hasattr(args, req) and getattr(args, req) is None:
            raise ConfigurationError(f"--{req.replace('_', '-')} is required")
    return args


def _sampler_config(args) -> SamplerConfig:
    try:
        prior = TreePriorParams(alpha=float(args.alpha), beta=float(args.beta))
        return SamplerConfig(
            H=int(args.H), eta=args.eta, sigma_mu=args.sigma_mu, kappa=float(args.kappa),
            tree_prior=prior, n_iter=int(args.iters), burn_in=int(args.burnin), thin=int(args.thin),
            censoring=args.censoring, fixed_weights=bool(args.fixed_weights), seed=int(args.seed),
            chains=int(args.chains), weight_cap=float(args.weight_cap), grid_size=int(args.grid_size),
            cens_grid_size=int(args.cens_grid_size), kappa0=float(args.kappa0),
            alpha_increment=float(args.alpha_increment), cens_H=int(args.cens_H), eta_rule=args.eta_rule,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, RmstBartError):
            raise
        raise ConfigurationError(str(exc)) from None


def _load(args):
    data = load_csv(args.input, args.time_col, args.event_col, delimiter=args.delimiter, id_col=args.id_col)
    return data, apply_truncation(data, float(args.tau), args.transform)


def _num(v: float) -> str:
    return repr(float(v))


def _write_summary(path, ids, summ):
    with atomic_open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "mean", "lower", "upper"])
        for i, rid in enumerate(ids):
            w.writerow([rid, _num(summ["mean"][i]), _num(summ["lower"][i]), _num(summ["upper"][i])])


def _clean(o):
    """JSON-safe copy: NaN becomes null, numpy scalars become Python numbers."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        return None if not math.isfinite(o) else float(o)
    return o


def cmd_fit(args) -> int:
    config = _sampler_config(args)
    data, trunc = _load(args)
    rng = RngHandle(config.seed)
    draws = run_mcmc(config, trunc, data, rng)
    meta = {
        "eta": draws.eta,
        "sigma_mu": draws.sigma_mu,
        "seed": config.seed,
        "censoring_model": CENSORING_TAGS[config.censoring],
        "fixed_weights": config.fixed_weights,
        "censoring": draws.censoring_info,
        "weight_cap": config.weight_cap,
        "weight_cap_events": int(draws.n_capped.sum()),
        "acceptance_rates": draws.acceptance_rates,
        "sampler": config.to_dict(),
        "streams": "chain c: trees from spawn_key (c, 0), censoring hazards from (c, 1)",
        "n": data.n,
        "dropped_rows": data.dropped_rows,
        "n_draws": draws.n_draws,
    }
    model = FittedModel.from_draws(draws, _clean(meta))
    model.save(args.output_model)
    _write_summary(args.output_summary, data.ids, draws.summary(args.level))
    log.info("fit finished in %.1fs: %d draws, eta=%.4g, sigma_mu=%.4g", draws.elapsed,
             draws.n_draws, draws.eta, draws.sigma_mu)
    return 0


def cmd_predict(args) -> int:
    model = FittedModel.load(args.model)
    X, ids, _ = load_covariates(args.input, model.covariate_names, delimiter=args.delimiter, id_col=args.id_col)
    draws = model.forests.predict(X, model.grid) + model.mu_hat_b if len(model.forests) else None
    if draws is None:
        raise InputError("model contains no posterior draws")
    _write_summary(args.output, ids, posterior_summary(draws, args.level))
    return 0


def cmd_importance(args) -> int:
    model = FittedModel.load(args.model)
    if len(model.forests) == 0:
        raise InputError("model contains no posterior draws")
    imp = model.forests.split_counts().mean(axis=0)
    order = sorted(range(len(imp)), key=lambda j: -imp[j])
    with atomic_open(args.output, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "mean_splits"])
        for j in order:
            w.writerow([model.covariate_names[j], _num(imp[j])])
    return 0


def cmd_pdp(args) -> int:
    model = FittedModel.load(args.model)
    if args.var not in model.covariate_names:
        raise InputError(f"covariate {args.var!r} is not in the model (covariates: {', '.join(model.covariate_names)})")
    if int(args.grid_points) < 2:
        raise ConfigurationError("--grid-points must be at least 2")
    X, _, _ = load_covariates(args.input, model.covariate_names, delimiter=args.delimiter)
    k = model.covariate_names.index(args.var)
    values = np.linspace(X[:, k].min(), X[:, k].max(), int(args.grid_points))
    rho = partial_dependence(model.forests, X, k, values, model.mu_hat_b, model.grid)
    with atomic_open(args.output, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([args.var, "partial_dependence"])
        for u, r in zip(values, rho):
            w.writerow([_num(u), _num(r)])
    return 0


def cmd_cv(args) -> int:
    config = _sampler_config(args)
    data, trunc = _load(args)
    rng = RngHandle(config.seed)
    sigma_r2 = default_sigma_r2(trunc, data)
    sel = cross_validate_eta(trunc, data, config, rng, args.candidates, int(args.folds), sigma_r2,
                             jobs=int(args.jobs))
    with atomic_open(args.output, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["multiplier", "sigma_r2", "eta"] + [f"fold_{k + 1}" for k in range(sel.folds)]
                   + ["mean_score", "chosen"])
        for c, m in enumerate(sel.multipliers):
            eta = sel.etas[c]
            w.writerow([_num(m), _num(m * sel.sigma_r2_tilde), _num(eta)] + [_num(v) for v in sel.scores[c]]
                       + [_num(sel.mean_scores[c]), int(eta == sel.chosen_eta)])
    log.info("chosen eta %.6g (sigma_r2 tilde %.6g)", sel.chosen_eta, sel.sigma_r2_tilde)
    print(repr(sel.chosen_eta))
    return 0


def cmd_simulate(args) -> int:
    scen = ScenarioConfig(family=args.family, n=int(args.n), n_test=int(args.n_test), p=int(args.p),
                          tau=args.sim_tau, censoring=args.sim_censoring, rate=float(args.r),
                          replications=int(args.reps), seed=int(args.seed))
    base = _sampler_config(args)
    names = [m.strip() for m in str(args.methods).split(",") if m.strip()]
    bad = [m for m in names if m not in SIM_METHODS]
    if bad or not names:
        raise ConfigurationError(f"unknown methods {bad}; choose from {', '.join(SIM_METHODS)}")
    methods = []
    for name in names:
        if name == "null":
            methods.append(MethodConfig("null", kind="null"))
        elif name == "default":
            methods.append(MethodConfig("rmst-bart-default", sampler=base))
        elif name == "cv":
            methods.append(MethodConfig("rmst-bart-cv", sampler=base, cv=True,
                                        multipliers=tuple(args.candidates), folds=int(args.folds)))
        elif name == "dep":
            methods.append(MethodConfig("rmst-bart-dep", sampler=replace(base, censoring="dep")))
        else:
            methods.append(MethodConfig("rmst-bart-fixed-weights", sampler=replace(base, fixed_weights=True)))
    rows, times = run_simulation(scen, methods, jobs=int(args.jobs))
    out = Path(args.output)
    agg_path = Path(args.aggregate) if args.aggregate else out.with_name(out.stem + "_aggregate.csv")
    write_rows(out, rows, RESULT_FIELDS)
    write_rows(agg_path, aggregate(rows), AGG_FIELDS)
    timing = [{"replication": r, "method": m, "wall_time": t} for r, m, t in times]
    write_rows(out.with_name(out.stem + "_timing.csv"), timing, ["replication", "method", "wall_time"])
    return 0


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "cv": cmd_cv, "simulate": cmd_simulate,
            "importance": cmd_importance, "pdp": cmd_pdp}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
        return COMMANDS[args.command](args)
    except RmstBartError as exc:
        print(f"rmstbart: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("rmstbart: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
