"""SGND regression likelihood, smooth-L0 penalty, analytic score and information.

Links: mu_i = x_i'beta, log(s_i^2) = x_i'alpha, log(kappa - kappa_min) = nu0.
Parameter order everywhere is (beta, alpha, nu0).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from errors import DegenerateColumn, NonFiniteLikelihood
from models import (
    A_FLOOR, ETA_CLIP, Dataset, InfoBlocks, NormConstEval, PenaltySpec, ScoreBlocks,
    SgndShape, ThetaVector, alpha_index, beta_index, nu_index,
)
from sgnd import NormConstCache, log_density, norm_const

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class _Residuals:
    r: np.ndarray          # y - mu
    s2inv: np.ndarray      # exp(-x'alpha)
    u: np.ndarray          # r^2 / s^2
    a: np.ndarray          # smoothed |r / s|, floored
    D: np.ndarray          # a + tau
    kappa: float
    k: float               # kappa - kappa_min
    nc: NormConstEval
    eta_clipped: bool


def _shape(theta: ThetaVector, tau: float, kappa_min: float) -> SgndShape:
    # the optimizer keeps kappa below its cap; no upper bound is enforced here
    return SgndShape(kappa=theta.kappa(kappa_min), tau=tau, kappa_min=kappa_min, kappa_max=np.inf)


def _residuals(data: Dataset, theta: ThetaVector, tau: float, kappa_min: float,
               cache: Optional[NormConstCache]) -> _Residuals:
    if theta.p != data.p:
        raise ValueError(f"theta has p={theta.p}, data has p={data.p}")
    eta = data.X @ theta.alpha
    clipped = bool(np.any(np.abs(eta) > ETA_CLIP))
    if clipped:
        logger.warning("x'alpha clipped to +-%g", ETA_CLIP)
        eta = np.clip(eta, -ETA_CLIP, ETA_CLIP)
    r = data.y - data.X @ theta.beta
    s2inv = np.exp(-eta)
    u = r * r * s2inv
    a = np.maximum(u / (np.sqrt(u + tau * tau) + tau), A_FLOOR)
    shape = _shape(theta, tau, kappa_min)
    return _Residuals(r=r, s2inv=s2inv, u=u, a=a, D=a + tau, kappa=shape.kappa,
                      k=shape.kappa - kappa_min, nc=norm_const(shape, cache), eta_clipped=clipped)


# ────────────────────────── likelihood & penalty ────────────────────────────

def loglik_terms(data: Dataset, theta: ThetaVector, tau: float, kappa_min: float,
                 cache: Optional[NormConstCache] = None) -> np.ndarray:
    """Per-observation log-likelihood contributions."""
    eta = np.clip(data.X @ theta.alpha, -ETA_CLIP, ETA_CLIP)
    mu = data.X @ theta.beta
    s = np.exp(0.5 * eta)
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise NonFiniteLikelihood("scale under/overflow", max_eta=float(np.max(np.abs(eta))))
    with np.errstate(over="ignore", invalid="ignore"):
        terms = log_density(data.y, mu, s, _shape(theta, tau, kappa_min), cache)
    return np.atleast_1d(terms)


def loglik(data: Dataset, theta: ThetaVector, tau: float, kappa_min: float,
           cache: Optional[NormConstCache] = None) -> float:
    value = float(np.sum(loglik_terms(data, theta, tau, kappa_min, cache)))
    if not np.isfinite(value):
        raise NonFiniteLikelihood("log-likelihood is not finite", kappa=theta.kappa(kappa_min))
    return value


def phi_eps(theta_j, epsilon: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """phi(t) = t^2 / (t^2 + eps^2) with first and second derivatives."""
    t = np.asarray(theta_j, dtype=float)
    e2 = epsilon * epsilon
    d = t * t + e2
    value = t * t / d
    d1 = 2.0 * t * e2 / d ** 2
    d2 = 2.0 * e2 * (e2 - 3.0 * t * t) / d ** 3
    return value, d1, d2


def smooth_l0_norm(values, epsilon: float) -> float:
    return float(np.sum(phi_eps(values, epsilon)[0]))


def sic_objective(data: Dataset, theta: ThetaVector, penalty: PenaltySpec, tau: float,
                  kappa_min: float, cache: Optional[NormConstCache] = None,
                  include_constant: bool = True) -> float:
    """l(theta) - lam/2 * (||beta~||_0,eps + ||alpha~||_0,eps + 3)."""
    ll = loglik(data, theta, tau, kappa_min, cache)
    norm = smooth_l0_norm(theta.to_array()[penalty.penalize_mask], penalty.epsilon)
    const = 3.0 if include_constant else 0.0
    return ll - 0.5 * penalty.lam * (norm + const)


# ────────────────────────── derivatives ─────────────────────────────────────

def score(data: Dataset, theta: ThetaVector, penalty: PenaltySpec, tau: float, kappa_min: float,
          cache: Optional[NormConstCache] = None) -> ScoreBlocks:
    res = _residuals(data, theta, tau, kappa_min, cache)
    kappa, a, D = res.kappa, res.a, res.D
    ak1 = a ** (kappa - 1.0)
    z_beta = res.s2inv * kappa * res.r * ak1 / D
    # da/du = 1 / (2(a + tau))
    z_alpha = res.u * kappa * ak1 / (2.0 * D) - 0.5
    z_nu = res.nc.dlogc_dnu - np.log(a) * a ** kappa * res.k

    p = data.p
    mask = penalty.penalize_mask
    _, d1, _ = phi_eps(theta.to_array(), penalty.epsilon)
    xi = np.where(mask, d1, 0.0)
    xi_beta, xi_alpha = xi[beta_index(p)], xi[alpha_index(p)]
    half_lam = 0.5 * penalty.lam
    return ScoreBlocks(
        grad_beta=data.X.T @ z_beta - half_lam * xi_beta,
        grad_alpha=data.X.T @ z_alpha - half_lam * xi_alpha,
        grad_nu=float(np.sum(z_nu)),
        z_beta=z_beta, z_alpha=z_alpha, z_nu=z_nu,
        xi_beta=xi_beta, xi_alpha=xi_alpha,
    )


def info_blocks(data: Dataset, theta: ThetaVector, penalty: PenaltySpec, tau: float,
                kappa_min: float, cache: Optional[NormConstCache] = None) -> InfoBlocks:
    """Negative Hessian of the SIC objective, with and without the cross blocks."""
    res = _residuals(data, theta, tau, kappa_min, cache)
    kappa, a, D, u, r, s2inv, k = res.kappa, res.a, res.D, res.u, res.r, res.s2inv, res.k
    ak = a ** kappa
    ak1 = a ** (kappa - 1.0)
    ak2 = a ** (kappa - 2.0)
    L = np.log(a)

    # h = dg/du and its u-derivative, with u = r^2/s^2 and D = a + tau = sqrt(u + tau^2)
    h = kappa * ak1 / (2.0 * D)
    hp = kappa * ((kappa - 1.0) * ak2 * D - ak1) / (4.0 * D ** 3)
    dh_nu = k * ak1 * (1.0 + kappa * L) / (2.0 * D)

    Wb = 2.0 * s2inv * h + 4.0 * r * r * s2inv * s2inv * hp
    Wa = u * h + u * u * hp
    Wba = 2.0 * r * s2inv * (h + u * hp)
    Wbn = -2.0 * r * s2inv * dh_nu
    Wan = -u * dh_nu
    # second nu-derivative of -a^kappa carries (k L + 1)
    Wn = -res.nc.d2logc_dnu2 + k * L * ak * (k * L + 1.0)

    X = data.X
    p = data.p
    size = 2 * (p + 1) + 1
    bi, ai, ni = beta_index(p), alpha_index(p), nu_index(p)
    I0 = np.zeros((size, size))
    I0[bi, bi] = X.T @ (Wb[:, None] * X)
    I0[ai, ai] = X.T @ (Wa[:, None] * X)
    I0[bi, ai] = X.T @ (Wba[:, None] * X)
    I0[ai, bi] = I0[bi, ai].T
    I0[bi, ni] = I0[ni, bi] = X.T @ Wbn
    I0[ai, ni] = I0[ni, ai] = X.T @ Wan
    I0[ni, ni] = np.sum(Wn)

    _, _, d2 = phi_eps(theta.to_array(), penalty.epsilon)
    sigma = np.where(penalty.penalize_mask, d2, 0.0)
    full = I0 + np.diag(0.5 * penalty.lam * sigma)
    full = 0.5 * (full + full.T)

    block = np.zeros_like(full)
    block[bi, bi] = full[bi, bi]
    block[ai, ai] = full[ai, ai]
    block[ni, ni] = full[ni, ni]
    return InfoBlocks(
        Wb=Wb, Wa=Wa, Wn=Wn, Wba=Wba, Wbn=Wbn, Wan=Wan,
        Sigma_beta=sigma[bi], Sigma_alpha=sigma[ai],
        unpenalized=0.5 * (I0 + I0.T), assembled_full=full, assembled_block_diag=block,
        eta_clipped=res.eta_clipped,
    )


# ────────────────────────── scaling ─────────────────────────────────────────

def standardize(data: Dataset) -> Dataset:
    """Divide every covariate column by its sample SD (divisor n - 1)."""
    if data.scaled:
        return data
    sd = np.asarray(data.col_sd)
    bad = [name for name, v in zip(data.names, sd) if not v > 0]
    if bad:
        raise DegenerateColumn("covariate has zero standard deviation", columns=",".join(bad))
    X = data.X.copy()
    X[:, 1:] = X[:, 1:] / sd
    return replace(data, X=X, scaled=True)


def unscale_theta(theta: ThetaVector, col_sd) -> ThetaVector:
    sd = np.asarray(col_sd, dtype=float)
    beta = theta.beta.copy()
    alpha = theta.alpha.copy()
    beta[1:] = beta[1:] / sd
    alpha[1:] = alpha[1:] / sd
    return ThetaVector(beta=beta, alpha=alpha, nu0=theta.nu0)


def standardized_residuals(data: Dataset, theta: ThetaVector) -> np.ndarray:
    """(y - mu) / s at theta; data and theta must be on the same covariate scale."""
    eta = np.clip(data.X @ theta.alpha, -ETA_CLIP, ETA_CLIP)
    return (data.y - data.X @ theta.beta) / np.exp(0.5 * eta)
