"""CSV ingestion and the files written by the command line (CSV for tables, JSON for scalars)."""
from __future__ import annotations

import json
import logging
import math
import os
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import MissingColumn, MissingValue, NonNumericCell, SgndError, UnknownCovariate
from likelihood import standardized_residuals
from models import (
    BootstrapResult, Dataset, DensityCurveRequest, FitResult, MetricsSummary, SgndShape,
    SimScenario, nu_index, param_labels,
)
from sgnd import NormConstCache, pdf, ppf

logger = logging.getLogger(__name__)

MISSING_TOKENS = {"", "NA", "N/A", "NaN", "nan", "NULL", "null", "None"}
CURVE_QUANTILES = (0.001, 0.999)


# ────────────────────────── reading ─────────────────────────────────────────

def read_csv(path: str, response: str, covariates: Optional[Sequence[str]] = None) -> Dataset:
    """Load ``response`` and ``covariates`` (default: every other column) as a Dataset.

    Cells are checked before conversion so errors name the offending data row
    (1-based, header excluded) and column.
    """
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    raw.columns = [c.strip() for c in raw.columns]
    if response not in raw.columns:
        raise MissingColumn("response column not found", column=response, path=str(path))
    if covariates is None:
        covariates = [c for c in raw.columns if c != response]
    missing = [c for c in covariates if c not in raw.columns]
    if missing:
        raise MissingColumn("covariate column not found", column=",".join(missing), path=str(path))

    columns = [response, *covariates]
    values = {}
    for col in columns:
        cells = raw[col].str.strip()
        absent = cells.isin(MISSING_TOKENS)
        if absent.any():
            row = int(np.flatnonzero(absent.to_numpy())[0])
            raise MissingValue("missing value", row=row + 1, column=col, value=raw[col].iloc[row])
        numeric = pd.to_numeric(cells, errors="coerce")
        bad = numeric.isna() | ~np.isfinite(numeric.to_numpy(dtype=float))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise NonNumericCell("cell is not a finite number", row=row + 1, column=col,
                                 value=raw[col].iloc[row])
        values[col] = numeric.to_numpy(dtype=float)

    Z = np.column_stack([values[c] for c in covariates]) if covariates else np.empty((len(raw), 0))
    logger.info("read %s: n=%d, %d covariates", path, len(raw), len(covariates))
    return Dataset.from_arrays(values[response], Z, list(covariates), response=response)


# ────────────────────────── writing ─────────────────────────────────────────

def _clean(value):
    """JSON-safe copy: numpy scalars to Python, NaN / inf to null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_json(path: str, payload: Dict) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_clean(payload), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_frame(path: str, frame: pd.DataFrame) -> str:
    frame.to_csv(path, index=False, encoding="utf-8")
    return path


def output_path(prefix: str, name: str) -> str:
    folder = os.path.dirname(prefix)
    if folder:
        os.makedirs(folder, exist_ok=True)
    return f"{prefix}{name}"


def path_frame(fit: FitResult) -> pd.DataFrame:
    """Telescope path: one row per epsilon, one column per standardized parameter."""
    cols = [f"{c}:{v}" for c, v in param_labels(fit.names)]
    frame = pd.DataFrame(fit.path, columns=cols)
    frame.insert(0, "epsilon", fit.epsilons)
    frame.insert(0, "step", np.arange(1, len(fit.epsilons) + 1))
    return frame


def fit_summary(fit: FitResult, record_timing: bool = False) -> Dict:
    se = fit.covariance.full_se(fit.theta_scaled.size)
    out = {
        "bic": fit.bic,
        "df": fit.df,
        "loglik": fit.loglik,
        "kappa_hat": fit.kappa_hat,
        "nu0_hat": fit.theta_original.nu0,
        "nu0_se": se[nu_index(len(fit.names))],
        "iterations": fit.diagnostics.total_iterations,
        "breakdown_flag": fit.breakdown_flag,
        "converged": fit.diagnostics.fully_converged,
        "stalled": fit.diagnostics.any_stalled,
        "nu_clamped": fit.diagnostics.nu_clamped,
        "eta_clipped": fit.diagnostics.eta_clipped,
        "n": fit.n,
        "mode": fit.config.mode,
        "family": fit.config.family,
        "tau": fit.config.tau,
        "kappa_min": fit.config.kappa_min,
        "criterion": fit.config.criterion,
        "active_beta": [v for v, a in zip(fit.names, fit.active_beta) if a],
        "active_alpha": [v for v, a in zip(fit.names, fit.active_alpha) if a],
    }
    if record_timing:
        out["timing"] = {"wall_seconds": fit.diagnostics.wall_time}
    return out


def write_fit(fit: FitResult, data: Dataset, prefix: str = "", record_timing: bool = False) -> List[str]:
    residuals = standardized_residuals(data, fit.theta_original)
    return [
        write_frame(output_path(prefix, "estimates.csv"), fit.coef_table()),
        write_frame(output_path(prefix, "path.csv"), path_frame(fit)),
        write_json(output_path(prefix, "summary.json"), fit_summary(fit, record_timing)),
        write_frame(output_path(prefix, "residuals.csv"),
                    pd.DataFrame({"row": np.arange(1, data.n + 1), "residual": residuals})),
    ]


def write_metrics(summary: MetricsSummary, scenario: SimScenario, prefix: str = "",
                  extra: Optional[Dict] = None) -> List[str]:
    selection = summary.selection_dict()
    selection["scenario"] = scenario.dict()
    if extra:
        selection.update(extra)
    return [
        write_frame(output_path(prefix, "metrics_params.csv"), summary.params),
        write_json(output_path(prefix, "metrics_selection.json"), selection),
    ]


def write_delta_bic(frame: pd.DataFrame, prefix: str = "") -> str:
    return write_frame(output_path(prefix, "delta_bic.csv"), frame)


def write_bootstrap(result: BootstrapResult, fit: FitResult, prefix: str = "") -> str:
    return write_frame(output_path(prefix, "bootstrap_se.csv"),
                       result.to_frame(se_sandwich=fit.covariance.se_original))


def write_error(err: Exception, prefix: str = "") -> str:
    if isinstance(err, SgndError):
        payload = err.to_dict()
    else:
        payload = {"error": type(err).__name__, "message": str(err)}
    return write_json(output_path(prefix, "error.json"), payload)


# ────────────────────────── density curves ──────────────────────────────────

def _profile(data: Dataset, request: DensityCurveRequest) -> np.ndarray:
    Z = data.X[:, 1:]
    if isinstance(request.others_at, str):
        if request.others_at.lower() != "median":
            raise ValueError(f"others_at must be 'median' or a mapping, got {request.others_at!r}")
        return np.median(Z, axis=0)
    unknown = [k for k in request.others_at if k not in data.names]
    if unknown:
        raise UnknownCovariate("profile names unknown covariates", variable=",".join(unknown))
    base = np.median(Z, axis=0)
    for k, v in request.others_at.items():
        base[data.names.index(k)] = float(v)
    return base


def _level_value(column: np.ndarray, level) -> float:
    if isinstance(level, str):
        q = {"Q1": 0.25, "MEDIAN": 0.5, "Q3": 0.75}[level.upper()]
        return float(np.quantile(column, q))
    return float(level)


def density_curves(data: Dataset, fit: FitResult, request: DensityCurveRequest) -> pd.DataFrame:
    """Long-format (level, value, mu, s, y, density) conditional densities.

    Every covariate except ``request.vary`` is held at the profile; ``vary``
    takes each requested level. All curves share one y-grid, spanning the
    0.001 to 0.999 quantiles of every curve unless y_min / y_max are given.
    """
    if request.vary not in data.names:
        raise UnknownCovariate("covariate is not in the model", variable=request.vary)
    j = data.names.index(request.vary)
    base = _profile(data, request)
    cfg = fit.config
    shape = SgndShape(kappa=fit.kappa_hat, tau=cfg.tau, kappa_min=cfg.kappa_min,
                      kappa_max=max(cfg.kappa_max, fit.kappa_hat))
    cache = NormConstCache()
    theta = fit.theta_original

    curves = []
    for level in request.levels:
        x = base.copy()
        x[j] = _level_value(data.X[:, j + 1], level)
        design = np.concatenate([[1.0], x])
        mu = float(design @ theta.beta)
        s = float(math.exp(0.5 * float(design @ theta.alpha)))
        curves.append((str(level), x[j], mu, s))

    lo = request.y_min
    hi = request.y_max
    if lo is None or hi is None:
        bounds = np.array([ppf(np.array(CURVE_QUANTILES), mu, s, shape, cache) for _, _, mu, s in curves])
        lo = float(bounds[:, 0].min()) if lo is None else lo
        hi = float(bounds[:, 1].max()) if hi is None else hi
    if not hi > lo:
        raise ValueError("y_max must exceed y_min")
    grid = np.linspace(lo, hi, request.points)

    frames = []
    for label, value, mu, s in curves:
        frames.append(pd.DataFrame({
            "level": label,
            "value": value,
            "mu": mu,
            "s": s,
            "y": grid,
            "density": pdf(grid, mu, s, shape, cache),
        }))
    return pd.concat(frames, ignore_index=True)


def write_curves(frame: pd.DataFrame, prefix: str = "") -> str:
    return write_frame(output_path(prefix, "curves.csv"), frame)


def parse_levels(values: Optional[Iterable[str]]) -> List:
    if not values:
        return ["Q1", "Q3"]
    out = []
    for v in values:
        out.append(v.upper() if v.upper() in ("Q1", "Q3", "MEDIAN") else float(v))
    return out
