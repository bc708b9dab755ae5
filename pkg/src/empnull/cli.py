"""Command-line interface.

Subcommands: ``fit`` (estimate + per-provider report), ``flag`` (re-score
a summary file against a saved fit), ``simulate`` (replicated synthetic
experiments from a scenario file), ``posterior`` (density grid for one
provider).  Module errors exit with code 1 and a one-line JSON record on
stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import io as eio
from .errors import EmpnullError, IngestionError, ValidationError
from .fitting import FitConfig, fit, null_intervals
from .posterior import METHODS, corrected_posterior, lambda_posterior, nu_posterior, original_posterior
from .simulate import CreScenario, SimScenario, run_replicates
from .summaries import (
    EXP_FAMILY,
    NORMAL,
    POISSON,
    QUASI_POISSON,
    ConfoundingParams,
    Family,
    naive_z_many,
    stack_providers,
)

_FAMILIES = (POISSON, QUASI_POISSON, NORMAL, EXP_FAMILY)


def _make_family(kind: str, dispersion: float) -> Family:
    if kind == POISSON:
        return Family.poisson()
    return Family(kind, dispersion)


def _prior_matrix(scales, p: int) -> np.ndarray:
    if isinstance(scales, str):
        scales = [float(tok) for tok in scales.split(",")]
    values = [float(v) for v in scales]
    if len(values) == 1:
        values = values * p
    if len(values) != p:
        raise ValidationError(f"prior scale needs 1 or {p} values, got {len(values)}")
    if any(v < 0 for v in values):
        raise ValidationError("prior scales must be nonnegative")
    return np.diag(values)


def _fit_config(args) -> FitConfig:
    grid = tuple(np.linspace(args.pi0_min, args.pi0_max, args.pi0_points))
    return FitConfig(
        pi0_grid=grid,
        interval_multiplier=args.interval_multiplier,
        refit_intervals=args.refit_intervals,
        baseline=getattr(args, "baseline", False),
    )


def _config_echo(args, prior: np.ndarray) -> dict:
    return {
        "family": args.family,
        "dispersion": args.dispersion,
        "pi0_min": args.pi0_min,
        "pi0_max": args.pi0_max,
        "pi0_points": args.pi0_points,
        "interval_multiplier": args.interval_multiplier,
        "refit_intervals": args.refit_intervals,
        "prior_scale": [float(v) for v in np.diag(prior)],
        "nodes": args.nodes,
        "level": args.level,
        "seed": args.seed,
        "threads": args.threads,
        "baseline": bool(getattr(args, "baseline", False)),
    }


def _posterior_grid_rows(provider, params, covariance, prior, nodes, points):
    orig = original_posterior(provider.observed, provider.expected)
    nu_post = nu_posterior(params.nu_array, covariance, prior)
    lam = lambda_posterior(nu_post, provider.covariates, params.sigma2_alpha)
    adj = corrected_posterior(provider.observed, provider.expected, lam, nodes)
    r_hi = 1.05 * max(orig.quantile(0.9999), adj.quantile(0.9999))
    grid = np.linspace(0.0, r_hi, points)
    dens_o = orig.pdf(grid)
    dens_a = adj.pdf(grid)
    return [
        {"r": float(r), "density_orig": float(a), "density_adj": float(b)}
        for r, a, b in zip(grid, dens_o, dens_a)
    ]


def _cmd_fit(args) -> int:
    result = eio.ingest(args.input)
    providers = result.providers
    family = _make_family(args.family, args.dispersion)
    cfg = _fit_config(args)
    efit = fit(providers, family, cfg)
    p = len(providers[0].covariates)
    prior = _prior_matrix(args.prior_scale, p) if p else np.zeros((0, 0))
    rows, notes = eio.provider_table(
        providers, family, efit.params, efit.null_set, efit.intervals, efit.covariance,
        prior_covariance=prior, nodes=args.nodes, level=args.level,
    )
    payload = eio.fit_payload(
        family, efit, result.centers, _config_echo(args, prior),
        extra_warnings=tuple(result.warnings) + tuple(notes),
    )
    os.makedirs(args.out, exist_ok=True)
    eio.write_json(os.path.join(args.out, "fit.json"), payload)
    eio.write_csv(os.path.join(args.out, "providers.csv"), eio.PROVIDERS_CSV_COLUMNS, rows)
    by_id = {pr.id: pr for pr in providers}
    for pid in args.posterior_id or ():
        if pid not in by_id:
            raise ValidationError(f"unknown provider id {pid!r}")
        if not eio.supports_ratio_posteriors(family) or efit.covariance is None:
            raise ValidationError("posterior grids need a count family and a covariance")
        grid_rows = _posterior_grid_rows(
            by_id[pid], efit.params, efit.covariance, prior, args.nodes, args.points
        )
        eio.write_csv(
            os.path.join(args.out, f"posterior_{pid}.csv"),
            eio.POSTERIOR_CSV_COLUMNS,
            grid_rows,
        )
    return 0


def _load_saved_fit(path):
    payload = eio.load_fit_payload(path)
    family = _make_family(payload["family"], payload["dispersion"])
    params = ConfoundingParams(tuple(payload["nu_hat"]), payload["sigma2_alpha_hat"])
    cov = payload.get("covariance")
    covariance = None if cov is None else np.asarray(cov, dtype=float)
    return payload, family, params, covariance


def _cmd_flag(args) -> int:
    payload, family, params, covariance = _load_saved_fit(args.fit)
    result = eio.ingest(args.input, centers=payload["centers"])
    providers = result.providers
    config = payload.get("config", {})
    multiplier = float(config.get("interval_multiplier", 1.96))
    level = args.level if args.level is not None else float(config.get("level", 0.05))
    nodes = int(config.get("nodes", 64))
    prior_scale = config.get("prior_scale", [1.0])
    p = len(providers[0].covariates)
    prior = _prior_matrix(prior_scale, p) if p else np.zeros((0, 0))
    intervals = null_intervals(providers, family, params, multiplier)
    z = naive_z_many(stack_providers(providers, family), family)
    lo = np.array([iv.lower for iv in intervals])
    hi = np.array([iv.upper for iv in intervals])
    null_set = (z >= lo) & (z <= hi)
    rows, _ = eio.provider_table(
        providers, family, params, null_set, intervals, covariance,
        prior_covariance=prior, nodes=nodes, level=level,
    )
    os.makedirs(args.out, exist_ok=True)
    eio.write_csv(os.path.join(args.out, "providers.csv"), eio.PROVIDERS_CSV_COLUMNS, rows)
    return 0


def _cmd_posterior(args) -> int:
    payload, family, params, covariance = _load_saved_fit(args.fit)
    if not eio.supports_ratio_posteriors(family):
        raise ValidationError("measure-ratio posteriors apply to count outcomes only")
    if covariance is None:
        raise ValidationError("saved fit carries no covariance; cannot build the adjusted posterior")
    result = eio.ingest(args.input, centers=payload["centers"])
    by_id = {pr.id: pr for pr in result.providers}
    if args.id not in by_id:
        raise ValidationError(f"unknown provider id {args.id!r}")
    config = payload.get("config", {})
    nodes = int(config.get("nodes", 64))
    p = len(result.providers[0].covariates)
    prior = _prior_matrix(config.get("prior_scale", [1.0]), p)
    rows = _posterior_grid_rows(by_id[args.id], params, covariance, prior, nodes, args.points)
    os.makedirs(args.out, exist_ok=True)
    eio.write_csv(
        os.path.join(args.out, f"posterior_{args.id}.csv"),
        eio.POSTERIOR_CSV_COLUMNS,
        rows,
    )
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_VECTOR_KEYS = {"nu", "beta"}
_CRE_KEYS = {
    "xi", "sigma2_tau", "contamination", "x_mean", "x_mean_variance",
    "x_within_variance", "n_providers", "n_per_provider", "mu_star", "beta",
    "dispersion", "outlier_shift", "seed",
}
_STANDARD_KEYS = {
    "family", "dispersion", "n_providers", "n_per_provider", "nu", "sigma2_alpha",
    "outlier_proportion", "outlier_effect", "outlier_w_coupling", "mu_star",
    "beta", "seed", "target_w", "target_gamma",
}


def _expand_sweep(settings: dict) -> list[dict]:
    """Cartesian product over list-valued scalar keys, in file order."""
    sweep_keys = [
        k for k, v in settings.items() if isinstance(v, list) and k not in _VECTOR_KEYS
    ]
    points = [{k: v for k, v in settings.items() if k not in sweep_keys}]
    for key in sweep_keys:
        points = [dict(pt, **{key: v}) for pt in points for v in settings[key]]
    return points


def _scenario_from_settings(kind: str, settings: dict, seed_override):
    settings = dict(settings)
    if seed_override is not None:
        settings["seed"] = seed_override
    if kind == "cre":
        unknown = set(settings) - _CRE_KEYS
        if unknown:
            raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")
        x_mean = settings.pop("x_mean", -0.4)
        x_mean_var = settings.pop("x_mean_variance", 0.25)
        return CreScenario(x_mean_dist=(float(x_mean), float(x_mean_var)), **settings)
    unknown = set(settings) - _STANDARD_KEYS
    if unknown:
        raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")
    family_kind = settings.pop("family", POISSON)
    dispersion = settings.pop("dispersion", 1.0)
    for key in ("nu", "beta"):
        if key in settings and not isinstance(settings[key], list):
            settings[key] = [settings[key]]
    return SimScenario(family=_make_family(family_kind, dispersion), **settings)


def _metrics_rows(index: int, scenario, metrics, methods) -> list[dict]:
    base = {
        "scenario": index,
        "kind": "cre" if isinstance(scenario, CreScenario) else "standard",
        "family": scenario.family.kind,
        "n_providers": scenario.n_providers,
        "n_per_provider": scenario.n_per_provider,
        "seed": scenario.seed,
        "bias_nu": float(metrics.bias_nu[0]),
        "bias_sigma2_alpha": metrics.bias_sigma2_alpha,
        "mse_nu": float(metrics.mse_nu[0]),
        "baseline_bias_nu": float(metrics.baseline_bias_nu[0]),
        "baseline_bias_sigma2_alpha": metrics.baseline_bias_sigma2_alpha,
        "baseline_mse_nu": float(metrics.baseline_mse_nu[0]),
        "n_reps": metrics.n_reps,
        "n_failed": metrics.n_failed,
    }
    if isinstance(scenario, CreScenario):
        base.update(
            xi=scenario.xi, sigma2_tau=scenario.sigma2_tau,
            contamination=scenario.contamination,
        )
    else:
        base.update(
            nu=";".join(repr(v) for v in scenario.nu),
            sigma2_alpha=scenario.sigma2_alpha,
            outlier_proportion=scenario.outlier_proportion,
            outlier_effect=scenario.outlier_effect,
            target_w=scenario.target_w,
            target_gamma=scenario.target_gamma,
        )
    if metrics.flags is None:
        return [dict(base, method="none")]
    ffp = metrics.ffp
    tfp = metrics.tfp
    rows = []
    for m in methods:
        row = dict(base, method=m, flag_rate=metrics.flag_rate(m))
        if ffp is not None:
            row["ffp"] = ffp[m]
            row["ffp_se"] = metrics.flag_rate_se(m)
        if tfp is not None:
            row["tfp"] = tfp[m]
            se = (tfp[m] * (1 - tfp[m]) / len(metrics.flags[m])) ** 0.5
            row["tfp_se"] = se
        rows.append(row)
    return rows


def _cmd_simulate(args) -> int:
    settings = eio.parse_config(args.scenario)
    kind = settings.pop("kind", "standard")
    if kind not in ("standard", "cre"):
        raise ValidationError(f"scenario kind must be 'standard' or 'cre', got {kind!r}")
    requested = tuple(m.strip() for m in args.methods.split(",")) if args.methods else METHODS
    unknown = [m for m in requested if m not in METHODS]
    if unknown:
        raise ValidationError(f"unknown methods: {unknown}")
    rows = []
    for index, point in enumerate(_expand_sweep(settings)):
        scenario = _scenario_from_settings(kind, point, args.seed)
        methods = requested
        if scenario.family.kind == NORMAL:
            methods = tuple(m for m in requested if m.startswith("freq"))
        metrics = run_replicates(
            scenario, args.reps, methods=methods, level=args.level, threads=args.threads
        )
        rows.extend(_metrics_rows(index, scenario, metrics, metrics.methods))
    os.makedirs(args.out, exist_ok=True)
    eio.write_csv(os.path.join(args.out, "metrics.csv"), eio.METRICS_CSV_COLUMNS, rows)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common_fit_args(sub):
    sub.add_argument("--family", choices=_FAMILIES, default=POISSON)
    sub.add_argument("--dispersion", type=float, default=1.0)
    sub.add_argument("--pi0-min", type=float, default=0.02)
    sub.add_argument("--pi0-max", type=float, default=1.0)
    sub.add_argument("--pi0-points", type=int, default=50)
    sub.add_argument("--interval-multiplier", type=float, default=1.96)
    sub.add_argument("--refit-intervals", type=int, default=FitConfig().refit_intervals)
    sub.add_argument("--prior-scale", default="1.0",
                     help="diagonal of the effect prior covariance (one value or one per covariate)")
    sub.add_argument("--nodes", type=int, default=64)
    sub.add_argument("--level", type=float, default=0.05)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="empnull",
        description="Cluster-level confounding estimation and provider flagging "
                    "from summary statistics",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_fit = subs.add_parser("fit", help="fit the model and write reports")
    p_fit.add_argument("input", help="provider summary CSV")
    p_fit.add_argument("--out", default=".")
    _add_common_fit_args(p_fit)
    p_fit.add_argument("--baseline", action="store_true",
                       help="classical normal-MLE comparator (pi0=1, everyone null)")
    p_fit.add_argument("--posterior-id", action="append", default=[],
                       help="also write a posterior density grid for this provider id")
    p_fit.add_argument("--points", type=int, default=401)
    p_fit.set_defaults(func=_cmd_fit)

    p_flag = subs.add_parser("flag", help="re-score a summary file against a saved fit")
    p_flag.add_argument("input")
    p_flag.add_argument("--fit", required=True, help="fit.json from a previous run")
    p_flag.add_argument("--out", default=".")
    p_flag.add_argument("--level", type=float, default=None)
    p_flag.set_defaults(func=_cmd_flag)

    p_sim = subs.add_parser("simulate", help="run a replicated synthetic experiment")
    p_sim.add_argument("scenario", help="plain-text key=value scenario file")
    p_sim.add_argument("--reps", type=int, default=100)
    p_sim.add_argument("--out", default=".")
    p_sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_sim.add_argument("--threads", type=int, default=1)
    p_sim.add_argument("--level", type=float, default=0.05)
    p_sim.add_argument("--methods", default=None,
                       help="comma list from: " + ", ".join(METHODS))
    p_sim.set_defaults(func=_cmd_simulate)

    p_post = subs.add_parser("posterior", help="write a posterior density grid for one provider")
    p_post.add_argument("input")
    p_post.add_argument("--fit", required=True)
    p_post.add_argument("--id", required=True)
    p_post.add_argument("--out", default=".")
    p_post.add_argument("--points", type=int, default=401)
    p_post.set_defaults(func=_cmd_posterior)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EmpnullError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
