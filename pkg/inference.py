"""Post-fit inference: sandwich covariance, confidence intervals and BIC."""
from __future__ import annotations

import logging
import math
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import norm

from errors import SingularInformation
from likelihood import info_blocks, loglik
from models import (
    BicReport, CovarianceResult, Dataset, FitResult, PenaltySpec, ThetaVector, alpha_index,
    beta_index, param_labels,
)
from sgnd import NormConstCache

logger = logging.getLogger(__name__)

BREAKDOWN_SE = 1e-10


def _unscale_factors(data: Dataset) -> np.ndarray:
    """Multipliers taking standardized-scale entries of theta to the original scale."""
    p = data.p
    d = np.ones(2 * (p + 1) + 1)
    if data.scaled:
        d[beta_index(p)][1:] = 1.0 / data.col_sd
        d[alpha_index(p)][1:] = 1.0 / data.col_sd
    return d


def sandwich_cov(data: Dataset, theta_hat: ThetaVector, penalty: PenaltySpec, tau: float,
                 kappa_min: float, free: Optional[np.ndarray] = None,
                 cache: Optional[NormConstCache] = None) -> CovarianceResult:
    """I^-1 I0 I^-1 restricted to the estimated, non-zero parameters.

    Zero penalized coefficients and parameters held fixed are removed before
    inversion. ``data`` is the design the fit was computed on (normally the
    standardized one); SEs are also returned on the original covariate scale.
    """
    info = info_blocks(data, theta_hat, penalty, tau, kappa_min, cache)
    arr = theta_hat.to_array()
    if free is None:
        free = np.ones(arr.size, dtype=bool)
    keep = free & ((arr != 0.0) | ~penalty.penalize_mask)
    idx = np.flatnonzero(keep)
    I = info.assembled_full[np.ix_(idx, idx)]
    I0 = info.unpenalized[np.ix_(idx, idx)]
    try:
        I_inv = np.linalg.inv(I)
    except np.linalg.LinAlgError as err:
        raise SingularInformation("information matrix is singular on the active set",
                                  size=int(idx.size)) from err
    if not np.all(np.isfinite(I_inv)):
        raise SingularInformation("information matrix inverse is not finite", size=int(idx.size))
    cov = I_inv @ I0 @ I_inv
    cov = 0.5 * (cov + cov.T)
    diag = np.diag(cov)
    se = np.where(diag >= 0, np.sqrt(np.abs(diag)), np.nan)
    positive_definite = bool(np.linalg.eigvalsh(I).min() > 0)

    d = _unscale_factors(data)[idx]
    cov_orig = cov * np.outer(d, d)
    se_orig = se * d
    breakdown = bool(
        not positive_definite
        or np.any(~np.isfinite(se))
        or np.any(se < BREAKDOWN_SE)
    )
    labels = param_labels(data.names)
    return CovarianceResult(
        index=idx,
        param_labels=tuple(labels[i] for i in idx),
        estimate=arr[idx],
        cov=cov,
        se=se,
        estimate_original=arr[idx] * d,
        cov_original=cov_orig,
        se_original=se_orig,
        breakdown_flag=breakdown,
    )


def confidence_intervals(cov_result: CovarianceResult, level: float = 0.95,
                         original: bool = True) -> pd.DataFrame:
    """Wald intervals estimate +- z * se."""
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    z = norm.ppf(1.0 - (1.0 - level) / 2.0)
    est = cov_result.estimate_original if original else cov_result.estimate
    se = cov_result.se_original if original else cov_result.se
    return pd.DataFrame({
        "component": [c for c, _ in cov_result.param_labels],
        "variable": [v for _, v in cov_result.param_labels],
        "estimate": est,
        "se": se,
        "lower": est - z * se,
        "upper": est + z * se,
    })


def bic_value(loglik_at_hat: float, df: int, n: int) -> float:
    return -2.0 * loglik_at_hat + math.log(n) * df


def bic(data: Dataset, fit: FitResult) -> BicReport:
    """BIC of a fit on the original (unscaled) data; df counts non-zero slopes + 3."""
    ll = loglik(data, fit.theta_original, fit.config.tau, fit.config.kappa_min)
    return BicReport(bic=bic_value(ll, fit.df, data.n), df=fit.df, loglik_at_hat=ll, n=data.n)
