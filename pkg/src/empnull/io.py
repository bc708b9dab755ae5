"""File formats: summary CSV ingestion, report writers, config grammar.

The input CSV carries one provider per row with columns
``id, observed, expected, effective_size[, n_patients][, b3_sum], w_1..w_P``.
Covariates are centered column-wise at ingestion (the moment formulas
assume mean-zero confounders); the centers are recorded in the fit report
so later flag-only runs reuse them.

Outputs are schema-stable: ``fit.json`` for the fitted model and
``providers.csv`` for the per-provider table.  Writes go through a
temp-file rename so partial files never appear.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .errors import IngestionError, ValidationError
from .fitting import EnFit, FitConfig, null_intervals
from .posterior import (
    BAYES_ADJUSTED,
    BAYES_NAIVE,
    FREQ_ADJUSTED,
    FREQ_NAIVE,
    corrected_posterior,
    flag,
    lambda_posterior,
    nu_posterior,
    original_posterior,
)
from .summaries import (
    NORMAL,
    POISSON,
    QUASI_POISSON,
    ConfoundingParams,
    Family,
    ProviderSummary,
    corrected_z_many,
    naive_z_many,
    stack_providers,
)

REQUIRED_COLUMNS = ("id", "observed", "expected", "effective_size")
OPTIONAL_COLUMNS = ("n_patients", "b3_sum")

PROVIDERS_CSV_COLUMNS = (
    "id", "z_naive", "z_corrected", "A", "B", "in_null_set",
    "r_median_orig", "r_lo_orig", "r_hi_orig",
    "r_median_adj", "r_lo_adj", "r_hi_adj",
    "flag_freq_naive", "flag_freq_adj", "flag_bayes_naive", "flag_bayes_adj",
)

METRICS_CSV_COLUMNS = (
    "scenario", "kind", "family", "n_providers", "n_per_provider", "seed",
    "nu", "sigma2_alpha", "outlier_proportion", "outlier_effect",
    "target_w", "target_gamma", "xi", "sigma2_tau", "contamination",
    "method", "ffp", "ffp_se", "tfp", "tfp_se", "flag_rate",
    "bias_nu", "bias_sigma2_alpha", "mse_nu",
    "baseline_bias_nu", "baseline_bias_sigma2_alpha", "baseline_mse_nu",
    "n_reps", "n_failed",
)

POSTERIOR_CSV_COLUMNS = ("r", "density_orig", "density_adj")

_W_COLUMN = re.compile(r"^w_(\d+)$")


@dataclass
class IngestResult:
    providers: list[ProviderSummary]
    centers: np.ndarray
    covariate_names: tuple[str, ...]
    warnings: tuple[str, ...] = ()


def _parse_cell(raw: str, row: int, column: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise IngestionError(
            f"non-numeric value {raw!r} at row {row}, column {column!r}"
        ) from None
    if not math.isfinite(value):
        raise IngestionError(f"non-finite value at row {row}, column {column!r}")
    return value


def ingest(path, centers=None) -> IngestResult:
    """Read a provider summary CSV; center covariates (or apply given centers)."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror or exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise IngestionError(f"{path}: no data rows")

    for col in REQUIRED_COLUMNS:
        if col not in header:
            raise IngestionError(f"{path}: missing required column {col!r}")
    w_cols = sorted(
        ((int(m.group(1)), name) for name in header if (m := _W_COLUMN.match(name))),
    )
    w_names = tuple(name for _, name in w_cols)
    notes = []
    known = set(REQUIRED_COLUMNS) | set(OPTIONAL_COLUMNS) | set(w_names)
    extra = [c for c in header if c not in known]
    if extra:
        notes.append(f"ignoring unrecognized columns: {', '.join(extra)}")
    idx = {name: header.index(name) for name in header}

    ids, seen = [], set()
    observed, expected, effective = [], [], []
    n_patients, b3_sum = [], []
    covariates = []
    for r, row in enumerate(rows, start=2):  # header is line 1
        if len(row) != len(header):
            raise IngestionError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        pid = row[idx["id"]].strip()
        if not pid:
            raise IngestionError(f"{path}: empty id at row {r}")
        if pid in seen:
            raise IngestionError(f"{path}: duplicate id {pid!r} at row {r}")
        seen.add(pid)
        ids.append(pid)
        observed.append(_parse_cell(row[idx["observed"]], r, "observed"))
        expected.append(_parse_cell(row[idx["expected"]], r, "expected"))
        effective.append(_parse_cell(row[idx["effective_size"]], r, "effective_size"))
        if "n_patients" in idx and row[idx["n_patients"]].strip():
            value = _parse_cell(row[idx["n_patients"]], r, "n_patients")
            if value != int(value):
                raise IngestionError(f"{path}: n_patients must be an integer at row {r}")
            n_patients.append(int(value))
        else:
            n_patients.append(None)
        if "b3_sum" in idx and row[idx["b3_sum"]].strip():
            b3_sum.append(_parse_cell(row[idx["b3_sum"]], r, "b3_sum"))
        else:
            b3_sum.append(None)
        covariates.append([_parse_cell(row[idx[name]], r, name) for name in w_names])

    w = np.asarray(covariates, dtype=float).reshape(len(ids), len(w_names))
    if centers is None:
        centers = w.mean(axis=0) if w.size else np.zeros(len(w_names))
    else:
        centers = np.asarray(centers, dtype=float)
        if centers.shape != (len(w_names),):
            raise IngestionError(
                f"{path}: {len(centers)} saved centers but {len(w_names)} covariate columns"
            )
    w = w - centers
    for j, name in enumerate(w_names):
        if len(ids) > 1 and float(np.ptp(w[:, j])) == 0.0:
            notes.append(f"covariate column {name!r} is constant; the design will be rank-deficient")

    try:
        providers = [
            ProviderSummary(
                id=ids[i],
                observed=observed[i],
                expected=expected[i],
                effective_size=effective[i],
                covariates=tuple(w[i]),
                n_patients=n_patients[i],
                b3_sum=b3_sum[i],
            )
            for i in range(len(ids))
        ]
    except ValidationError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    return IngestResult(providers, centers, w_names, tuple(notes))


# ---------------------------------------------------------------------------
# Plain-text config grammar (also used for simulation scenarios)
# ---------------------------------------------------------------------------

def _parse_token(token: str):
    token = token.strip()
    low = token.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def parse_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, commas make lists."""
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror or exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise IngestionError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip().lower()
            if not key:
                raise IngestionError(f"{path}:{lineno}: empty key")
            tokens = [t for t in value.split(",")]
            parsed = [_parse_token(t) for t in tokens]
            out[key] = parsed[0] if len(parsed) == 1 else parsed
    return out


# ---------------------------------------------------------------------------
# Report builders
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    """Shortest round-trip decimal for floats; None becomes an empty cell."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _atomic_write(path, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    _atomic_write(path, buf.getvalue())


def write_json(path, payload: dict):
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def supports_ratio_posteriors(family: Family) -> bool:
    # The conjugate count model behind the ratio posterior needs counts.
    return family.kind in (POISSON, QUASI_POISSON)


def provider_table(
    providers: Sequence[ProviderSummary],
    family: Family,
    params: ConfoundingParams,
    null_set,
    intervals,
    covariance,
    *,
    prior_covariance,
    nodes: int,
    level: float,
) -> tuple[list[dict], list[str]]:
    """Per-provider report rows, in input order.

    Ratio-posterior columns stay empty for non-count families or when the
    effect covariance is unavailable.
    """
    arrays = stack_providers(providers, family)
    z = naive_z_many(arrays, family)
    cz = corrected_z_many(arrays, family, params)
    mask = np.asarray(null_set, dtype=bool)
    notes = []
    with_posteriors = supports_ratio_posteriors(family)
    nu_post = None
    if with_posteriors and covariance is None:
        notes.append("effect covariance unavailable; adjusted posterior columns left empty")
    elif with_posteriors:
        nu_post = nu_posterior(params.nu_array, covariance, prior_covariance)

    rows = []
    for i, p in enumerate(providers):
        row = {
            "id": p.id,
            "z_naive": float(z[i]),
            "z_corrected": float(cz[i]),
            "A": intervals[i].lower,
            "B": intervals[i].upper,
            "in_null_set": bool(mask[i]),
            "flag_freq_naive": flag(p.id, FREQ_NAIVE, z=float(z[i]), level=level).flag,
            "flag_freq_adj": flag(p.id, FREQ_ADJUSTED, z=float(cz[i]), level=level).flag,
        }
        if with_posteriors:
            orig = original_posterior(p.observed, p.expected)
            row["r_median_orig"] = orig.quantile(0.5)
            row["r_lo_orig"] = orig.quantile(level / 2.0)
            row["r_hi_orig"] = orig.quantile(1.0 - level / 2.0)
            row["flag_bayes_naive"] = flag(p.id, BAYES_NAIVE, posterior=orig, level=level).flag
            if nu_post is not None:
                lam = lambda_posterior(nu_post, p.covariates, params.sigma2_alpha)
                adj = corrected_posterior(p.observed, p.expected, lam, nodes)
                row["r_median_adj"] = adj.quantile(0.5)
                row["r_lo_adj"] = adj.quantile(level / 2.0)
                row["r_hi_adj"] = adj.quantile(1.0 - level / 2.0)
                row["flag_bayes_adj"] = flag(p.id, BAYES_ADJUSTED, posterior=adj, level=level).flag
        rows.append(row)
    return rows, notes


def fit_payload(
    family: Family,
    efit: EnFit,
    centers,
    config_echo: dict,
    extra_warnings: Sequence[str] = (),
    wald_multiplier: float | None = None,
) -> dict:
    """Assemble the ``fit.json`` document."""
    cov = efit.covariance
    nu = list(efit.params.nu)
    diag = {
        "converged": bool(efit.converged),
        "n_providers": int(efit.null_set.size),
        "n_null": efit.n_null,
        "init_nu": list(efit.init.nu0),
        "init_scale": efit.init.scale0,
        "init_sigma2_alpha": efit.init.sigma2_alpha0,
    }
    if cov is not None:
        m = wald_multiplier if wald_multiplier is not None else float(ndtri(0.975))
        half = m * np.sqrt(np.diag(cov))
        diag["nu_wald_low"] = [float(v - h) for v, h in zip(nu, half)]
        diag["nu_wald_high"] = [float(v + h) for v, h in zip(nu, half)]
    return {
        "family": family.kind,
        "dispersion": family.dispersion,
        "nu_hat": nu,
        "sigma2_alpha_hat": efit.params.sigma2_alpha,
        "pi0_hat": efit.pi0,
        "loglik": efit.loglik,
        "covariance": None if cov is None else [[float(v) for v in row] for row in cov],
        "centers": [float(c) for c in np.atleast_1d(centers)],
        "config": dict(config_echo),
        "warnings": list(efit.warnings) + list(extra_warnings),
        "diagnostics": diag,
    }


def load_fit_payload(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("family", "dispersion", "nu_hat", "sigma2_alpha_hat", "centers"):
        if key not in payload:
            raise IngestionError(f"{path}: fit file missing key {key!r}")
    return payload
