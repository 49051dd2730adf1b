"""Refit-based inference: per-variable delta-BIC and bootstrap standard errors.

Both fan out independent telescope fits. Workers are module-level functions
so they pickle into a ProcessPoolExecutor; results are always put back in
task order before anything is aggregated.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import BootstrapFailure, SgndError, UnknownCovariate, VariableNotActive
from models import BootstrapResult, Dataset, FitConfig, FitResult, ThetaVector, alpha_index, beta_index
from optimizer import telescope_fit

logger = logging.getLogger(__name__)

COMPONENTS = ("beta", "alpha", "both")
REFIT_MODES = ("support", "telescope")
MAX_FAILED_SHARE = 0.2

Resampler = Callable[[np.random.Generator, int], np.ndarray]


def run_tasks(fn, tasks: Sequence, workers: int = 1) -> List:
    """map() over tasks, in a process pool when workers > 1; output is in task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def task_rng(seed: int, index: int) -> np.random.Generator:
    """Random stream that depends only on (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


# ────────────────────────── delta BIC ───────────────────────────────────────

def _is_active(fit: FitResult, variable: str, component: str) -> bool:
    j = fit.names.index(variable)
    if component == "beta":
        return bool(fit.active_beta[j])
    if component == "alpha":
        return bool(fit.active_alpha[j])
    return bool(fit.active_beta[j] or fit.active_alpha[j])


def _reduced_start(fit: FitResult, variable: str, component: str) -> ThetaVector:
    p = len(fit.names)
    j = fit.names.index(variable) + 1
    arr = fit.theta_scaled.to_array()
    if component in ("beta", "both"):
        arr[beta_index(p).start + j] = 0.0
    if component in ("alpha", "both"):
        arr[alpha_index(p).start + j] = 0.0
    return ThetaVector.from_array(arr)


def reduced_exclusions(fit: FitResult, variable: str, component: str,
                       refit: str = "support") -> List[Tuple[str, str]]:
    """Coefficients held at zero in the reduced model.

    ``support`` keeps the full fit's zeros and drops ``variable`` from
    ``component``, so no other covariate can enter in its place.
    ``telescope`` only drops ``variable`` and lets the telescope reselect.
    """
    if refit not in REFIT_MODES:
        raise ValueError(f"refit must be one of {REFIT_MODES}, got {refit!r}")
    out = [(component, variable)]
    if refit == "support":
        out += [("beta", v) for v, on in zip(fit.names, fit.active_beta) if not on]
        out += [("alpha", v) for v, on in zip(fit.names, fit.active_alpha) if not on]
    return out


def delta_bic(data: Dataset, fit: FitResult, variable: str, component: str,
              config: Optional[FitConfig] = None, strict: bool = True,
              refit: str = "support") -> float:
    """BIC(reduced) - BIC(full) after removing ``variable`` from ``component``.

    The reduced model reruns the telescope warm-started from the full fit
    with the removed entry set to zero; see reduced_exclusions for what else
    is held at zero. A variable that is already zero in that component raises
    VariableNotActive, or gives 0.0 when ``strict`` is False.
    """
    if component not in COMPONENTS:
        raise ValueError(f"component must be one of {COMPONENTS}, got {component!r}")
    if variable not in fit.names:
        raise UnknownCovariate("variable is not a model covariate", variable=variable)
    if not _is_active(fit, variable, component):
        if strict:
            raise VariableNotActive("variable is not in the active set", variable=variable,
                                    component=component)
        return 0.0
    reduced = telescope_fit(data, config or fit.config,
                            theta_start=_reduced_start(fit, variable, component),
                            exclude=reduced_exclusions(fit, variable, component, refit))
    return float(reduced.bic - fit.bic)


def _delta_task(args) -> float:
    data, fit, variable, component, config, refit = args
    return delta_bic(data, fit, variable, component, config, strict=False, refit=refit)


def delta_bic_table(data: Dataset, fit: FitResult, config: Optional[FitConfig] = None,
                    variables: Optional[Iterable[str]] = None, workers: int = 1,
                    refit: str = "support") -> pd.DataFrame:
    """One row per covariate with d_beta, d_alpha, d_both; NaN where not applicable."""
    if refit not in REFIT_MODES:
        raise ValueError(f"refit must be one of {REFIT_MODES}, got {refit!r}")
    variables = list(variables) if variables is not None else list(fit.names)
    unknown = [v for v in variables if v not in fit.names]
    if unknown:
        raise UnknownCovariate("variable is not a model covariate", variable=",".join(unknown))
    jobs: List[Tuple[str, str]] = [(v, c) for v in variables for c in COMPONENTS if _is_active(fit, v, c)]
    values = run_tasks(_delta_task, [(data, fit, v, c, config, refit) for v, c in jobs], workers)
    found = dict(zip(jobs, values))
    rows = []
    for v in variables:
        row = {"variable": v}
        for c in COMPONENTS:
            row[f"d_{c}"] = found.get((v, c), np.nan)
        for c in COMPONENTS:
            row[f"{c}_applicable"] = (v, c) in found
        rows.append(row)
    logger.info("delta-BIC computed for %d variable/component pairs", len(jobs))
    return pd.DataFrame(rows)


# ────────────────────────── bootstrap ───────────────────────────────────────

def resample_rows(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, n, size=n)


def _bootstrap_task(args):
    data, config, seed, b, resampler, index = args
    rows = np.asarray(resampler(task_rng(seed, b), data.n))
    try:
        refit = telescope_fit(data.take(rows), config)
    except (SgndError, np.linalg.LinAlgError) as err:
        return b, None, f"{type(err).__name__}: {err}"
    return b, refit.theta_original.to_array()[index], None


def bootstrap_se(data: Dataset, config: Optional[FitConfig] = None, B: int = 100, seed: int = 1,
                 fit: Optional[FitResult] = None, workers: int = 1,
                 resampler: Optional[Resampler] = None) -> BootstrapResult:
    """Row-resampling bootstrap with a full telescope refit per resample.

    SEs are the SD (divisor B - 1) of the resample estimates, on the original
    covariate scale, for the parameters estimated in ``fit``.
    """
    if B < 2:
        raise ValueError("bootstrap needs B >= 2")
    config = config or (fit.config if fit is not None else FitConfig())
    if fit is None:
        fit = telescope_fit(data, config)
    index = fit.covariance.index
    resampler = resampler or resample_rows
    tasks = [(data, config, seed, b, resampler, index) for b in range(B)]
    results = sorted(run_tasks(_bootstrap_task, tasks, workers), key=lambda r: r[0])
    good = [est for _, est, _ in results if est is not None]
    failures = [msg for _, est, msg in results if est is None]
    for msg in failures:
        logger.warning("bootstrap resample failed: %s", msg)
    if len(failures) > MAX_FAILED_SHARE * B or len(good) < 2:
        raise BootstrapFailure("too many bootstrap resamples failed", failed=len(failures), B=B)
    estimates = np.vstack(good)
    return BootstrapResult(
        index=index,
        param_labels=fit.covariance.param_labels,
        se=estimates.std(axis=0, ddof=1),
        estimates=estimates,
        n_failed=len(failures),
        B=B,
    )
