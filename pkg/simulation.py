"""Monte Carlo harness: covariate/response generation, replicate runs and selection metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import cholesky
from scipy.stats import norm

from errors import SgndError
from models import (
    Dataset, FitConfig, MetricsSummary, SelectionMetrics, SgndShape, SimScenario, alpha_index,
    beta_index, param_labels,
)
from optimizer import telescope_fit
from resampling import bootstrap_se, run_tasks, task_rng
from sgnd import NormConstCache, sample

logger = logging.getLogger(__name__)

MVN_RHO = 0.5
BERNOULLI_P = 0.75
CI_LEVEL = 0.95


# ────────────────────────── data generation ─────────────────────────────────

def _ar1_cholesky(m: int, rho: float = MVN_RHO) -> np.ndarray:
    lags = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    return cholesky(rho ** lags, lower=True)


def gen_covariates(scenario: SimScenario, rng: np.random.Generator) -> np.ndarray:
    """n x p covariates in scenario order.

    exp ~ Exponential(1), bern ~ Bernoulli(0.75), norm ~ N(0, 1); the mvn
    columns, taken in order, form one block with corr 0.5^|j-k|, drawn after
    the independent columns.
    """
    n = scenario.n
    X = np.empty((n, scenario.p))
    mvn_cols = []
    for j, tag in enumerate(scenario.covariate_spec):
        if tag == "exp":
            X[:, j] = rng.exponential(1.0, n)
        elif tag == "bern":
            X[:, j] = rng.binomial(1, BERNOULLI_P, n)
        elif tag == "norm":
            X[:, j] = rng.standard_normal(n)
        else:
            mvn_cols.append(j)
    if mvn_cols:
        L = _ar1_cholesky(len(mvn_cols))
        X[:, mvn_cols] = rng.standard_normal((n, len(mvn_cols))) @ L.T
    return X


def gen_response(scenario: SimScenario, X: np.ndarray, rng: np.random.Generator,
                 cache: Optional[NormConstCache] = None) -> np.ndarray:
    design = np.column_stack([np.ones(X.shape[0]), X])
    mu = design @ np.asarray(scenario.beta_true)
    s = np.exp(0.5 * (design @ np.asarray(scenario.alpha_true)))
    shape = SgndShape(kappa=scenario.kappa, tau=scenario.tau, kappa_min=scenario.kappa_min,
                      kappa_max=max(scenario.kappa, 20.0))
    return sample(rng, X.shape[0], mu, s, shape, cache)


def scenario_dataset(scenario: SimScenario, replicate: int) -> Dataset:
    """Replicate ``replicate`` of a scenario; depends only on (scenario.seed, replicate)."""
    rng = task_rng(scenario.seed, replicate)
    X = gen_covariates(scenario, rng)
    y = gen_response(scenario, X, rng)
    return Dataset.from_arrays(y, X, scenario_names(scenario))


# ────────────────────────── replicates ──────────────────────────────────────

@dataclass(frozen=True)
class ReplicateOutcome:
    index: int
    estimate: Optional[np.ndarray]
    se: Optional[np.ndarray]
    X: np.ndarray
    breakdown: bool
    error: Optional[str] = None


def _replicate_task(args) -> ReplicateOutcome:
    scenario, config, i, se_method, B = args
    data = scenario_dataset(scenario, i)
    X = data.X[:, 1:]
    try:
        fit = telescope_fit(data, config)
        est = fit.theta_original.to_array()
        se = fit.covariance.full_se(est.size)
        if se_method == "bootstrap":
            boot = bootstrap_se(data, config, B=B, seed=scenario.seed * 100_003 + i, fit=fit)
            se = np.full(est.size, np.nan)
            se[boot.index] = boot.se
    except (SgndError, np.linalg.LinAlgError) as err:
        return ReplicateOutcome(i, None, None, X, False, f"{type(err).__name__}: {err}")
    return ReplicateOutcome(i, est, se, X, fit.breakdown_flag)


def run_replicates(scenario: SimScenario, replicates: int, config: Optional[FitConfig] = None,
                   workers: int = 1, se_method: Literal["sandwich", "bootstrap"] = "sandwich",
                   B: int = 100) -> List[ReplicateOutcome]:
    if replicates < 1:
        raise ValueError("need at least one replicate")
    if se_method not in ("sandwich", "bootstrap"):
        raise ValueError(f"unknown se_method {se_method!r}")
    config = config or FitConfig(tau=scenario.tau, kappa_min=scenario.kappa_min)
    tasks = [(scenario, config, i, se_method, B) for i in range(replicates)]
    outcomes = sorted(run_tasks(_replicate_task, tasks, workers), key=lambda o: o.index)
    for o in outcomes:
        if o.error:
            logger.warning("replicate %d failed: %s", o.index, o.error)
    return outcomes


def run_study(scenario: SimScenario, replicates: int = 100, config: Optional[FitConfig] = None,
              workers: int = 1, se_method: Literal["sandwich", "bootstrap"] = "sandwich",
              B: int = 100) -> MetricsSummary:
    """Fit ``replicates`` simulated datasets and aggregate the selection metrics.

    Failed replicates are excluded from the metrics and counted in
    ``failure_count``. Output does not depend on ``workers``.
    """
    outcomes = run_replicates(scenario, replicates, config, workers, se_method, B)
    ok = [o for o in outcomes if o.error is None]
    failures = len(outcomes) - len(ok)
    if not ok:
        raise SgndError("every replicate failed", scenario=scenario.name, replicates=replicates)
    logger.info("scenario %s: %d replicates, %d failed", scenario.name, len(outcomes), failures)
    return compute_metrics([o.estimate for o in ok], [o.se for o in ok], scenario,
                           [o.X for o in ok], [o.breakdown for o in ok], failures)


# ────────────────────────── metrics ─────────────────────────────────────────

def _component_metrics(est: np.ndarray, truth: np.ndarray, idx: slice,
                       X_list: Sequence[np.ndarray]) -> SelectionMetrics:
    slopes = np.arange(truth.size)[idx][1:]
    true_zero = truth[slopes] == 0.0
    zero = est[:, slopes] == 0.0
    C = zero[:, true_zero].sum(axis=1)
    IC = zero[:, ~true_zero].sum(axis=1)
    PT = np.all(zero == true_zero, axis=1)
    mse = []
    for r, X in enumerate(X_list):
        design = np.column_stack([np.ones(X.shape[0]), X])
        fitted = design @ (est[r, idx] - truth[idx])
        mse.append(float(fitted @ fitted) / X.shape[0])
    return SelectionMetrics(C=float(C.mean()), IC=float(IC.mean()), PT=float(PT.mean()),
                            MSE=float(np.mean(mse)), ic_counts=tuple(int(c) for c in IC))


def compute_metrics(estimates: Sequence[np.ndarray], ses: Sequence[np.ndarray], scenario: SimScenario,
                    X_list: Sequence[np.ndarray], breakdown_flags: Optional[Sequence[bool]] = None,
                    failures: int = 0) -> MetricsSummary:
    """C / IC / PT / MSE per component and mean / SE / SEE / CP per parameter.

    ``estimates`` and ``ses`` are full parameter vectors on the original
    scale; an SE of NaN marks a parameter that was not estimated (zeroed or
    held fixed), whose interval is the single point of the estimate.
    """
    if not estimates:
        raise ValueError("compute_metrics needs at least one replicate")
    est = np.vstack(estimates)
    se = np.vstack(ses)
    truth = scenario.theta_true().to_array()
    R = est.shape[0]
    p = scenario.p

    components = {
        "beta": _component_metrics(est, truth, beta_index(p), X_list),
        "alpha": _component_metrics(est, truth, alpha_index(p), X_list),
    }
    slopes = np.concatenate([np.arange(truth.size)[beta_index(p)][1:],
                             np.arange(truth.size)[alpha_index(p)][1:]])
    pt_joint = float(np.mean(np.all((est[:, slopes] == 0.0) == (truth[slopes] == 0.0), axis=1)))

    z = norm.ppf(1.0 - (1.0 - CI_LEVEL) / 2.0)
    with np.errstate(invalid="ignore"):
        covered = np.where(np.isnan(se), est == truth, np.abs(est - truth) <= z * se)
    labels = param_labels(scenario_names(scenario))
    params = pd.DataFrame({
        "component": [c for c, _ in labels],
        "variable": [v for _, v in labels],
        "truth": truth,
        "mean": est.mean(axis=0),
        "SE": est.std(axis=0, ddof=1) if R > 1 else np.full(truth.size, np.nan),
        "SEE": pd.DataFrame(se).mean(axis=0, skipna=True).to_numpy(),
        "CP": covered.mean(axis=0),
    })
    flags = list(breakdown_flags) if breakdown_flags is not None else []
    return MetricsSummary(
        components=components,
        pt_joint=pt_joint,
        params=params,
        replicate_count=R,
        failure_count=int(failures),
        breakdown_rate=float(np.mean(flags)) if flags else 0.0,
        se_defined=R > 1,
    )


def scenario_names(scenario: SimScenario) -> List[str]:
    return [f"x{j + 1}" for j in range(scenario.p)]


# ────────────────────────── named scenarios ─────────────────────────────────

SCENARIO_KAPPAS = {"1": 1.0, "1.33": 4.0 / 3.0, "1.67": 5.0 / 3.0, "2": 2.0}


def named_scenario(name: str, **overrides) -> SimScenario:
    """table1-kappa{1,1.33,1.67,2}, null, homoscedastic-kappa<k>, or a path to a scenario JSON file."""
    if name.endswith(".json"):
        return SimScenario.parse_file(name).copy(update=overrides)
    if name.startswith("table1-kappa") and name[len("table1-kappa"):] in SCENARIO_KAPPAS:
        return SimScenario.canonical(kappa=SCENARIO_KAPPAS[name[len("table1-kappa"):]], **overrides)
    if name == "null":
        return SimScenario.null(**overrides)
    if name.startswith("homoscedastic-kappa"):
        key = name[len("homoscedastic-kappa"):]
        kappa = SCENARIO_KAPPAS.get(key)
        if kappa is not None:
            return SimScenario.homoscedastic(kappa=kappa, **overrides)
    raise ValueError(f"unknown scenario {name!r}")
