"""Block Newton-Raphson ("RS") solver and the epsilon-telescope driver.

One telescope step maximizes the SIC objective at a fixed epsilon by solving
the beta, alpha and nu blocks of the Newton system separately (cross blocks of
the information matrix are dropped). Steps are warm-started from the previous
epsilon and the final estimates are thresholded, unscaled and given sandwich
standard errors.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import (
    BlockSolveFailure, MaxIterations, NoAscentDirection, NonFiniteLikelihood,
    QuadratureFailure, SgndError, SingularDesign, TelescopeFailure,
)
from inference import bic_value, sandwich_cov
from likelihood import info_blocks, loglik, score, sic_objective, standardize, unscale_theta
from models import (
    Dataset, FitConfig, FitDiagnostics, FitResult, PenaltySpec, TelescopeConfig, ThetaVector,
    alpha_index, beta_index, nu_index, penalized_mask,
)
from sgnd import NormConstCache

logger = logging.getLogger(__name__)

RIDGE = 1e-8
RIDGE_RETRIES = 5


@dataclass(frozen=True)
class NewtonUpdate:
    theta: ThetaVector
    objective: float
    halvings: int
    nu_clamped: bool
    eta_clipped: bool


@dataclass(frozen=True)
class InnerResult:
    theta: ThetaVector
    converged: bool
    iterations: int
    halvings: int
    stalled: bool
    nu_clamped: bool
    eta_clipped: bool
    trace: np.ndarray


# ────────────────────────── helpers ─────────────────────────────────────────

def free_mask(p: int, mode: str = "mpr", fixed_nu: Optional[float] = None,
              exclude: Iterable[int] = ()) -> np.ndarray:
    """Entries of theta the solver may move; the rest stay where they start."""
    mask = np.ones(2 * (p + 1) + 1, dtype=bool)
    if mode == "spr":
        mask[alpha_index(p)] = False
        mask[p + 1] = True
    if fixed_nu is not None:
        mask[nu_index(p)] = False
    for j in exclude:
        mask[j] = False
    return mask


def _nu_bounds(config: FitConfig) -> Tuple[float, float]:
    return config.telescope.nu_floor, math.log(config.kappa_max - config.kappa_min)


def threshold_zero(theta: ThetaVector, zero_tol: float) -> ThetaVector:
    """Set penalized entries with |theta_j| < zero_tol to exactly zero."""
    arr = theta.to_array()
    mask = penalized_mask(theta.p) & (np.abs(arr) < zero_tol)
    arr[mask] = 0.0
    return ThetaVector.from_array(arr)


# ────────────────────────── initialization ──────────────────────────────────

def initialize(data: Dataset, kappa_min: float = 0.2, nu0: Optional[float] = None) -> ThetaVector:
    """OLS location, log residual variance scale intercept, normal-like shape."""
    X, y = data.X, data.y
    XtX = X.T @ X
    Xty = X.T @ y
    k = X.shape[1]
    if np.linalg.matrix_rank(XtX) < k:
        XtX = XtX + RIDGE * np.eye(k)
        if np.linalg.matrix_rank(XtX) < k:
            raise SingularDesign("X'X is rank deficient even after ridge", rank=int(np.linalg.matrix_rank(XtX)))
    beta = np.linalg.solve(XtX, Xty)
    resid = y - X @ beta
    q2 = max(float(resid @ resid) / (data.n - data.p), 1e-10)
    alpha = np.zeros(k)
    alpha[0] = math.log(q2)
    if nu0 is None:
        nu0 = math.log(2.0 - kappa_min)
    return ThetaVector(beta=beta, alpha=alpha, nu0=nu0)


# ────────────────────────── one Newton step ─────────────────────────────────

def _solve_block(H: np.ndarray, g: np.ndarray, name: str) -> np.ndarray:
    jitter = RIDGE * max(float(np.mean(np.abs(np.diag(H)))), 1.0)
    A = H
    for attempt in range(RIDGE_RETRIES + 1):
        try:
            step = np.linalg.solve(A, g)
            if np.all(np.isfinite(step)):
                break
        except np.linalg.LinAlgError:
            pass
        A = H + jitter * (10.0 ** attempt) * np.eye(H.shape[0])
    else:
        raise BlockSolveFailure(f"{name} block could not be solved", size=int(H.shape[0]))
    if g @ step < 0:
        # indefinite block: shift the spectrum so the step is an ascent direction
        lo = float(np.linalg.eigvalsh(H).min())
        step = np.linalg.solve(H + (jitter - lo) * np.eye(H.shape[0]), g)
    return step


def newton_step(data: Dataset, theta: ThetaVector, penalty: PenaltySpec, tau: float,
                kappa_min: float, free: Optional[np.ndarray] = None,
                nu_bounds: Tuple[float, float] = (-math.inf, math.inf), max_halvings: int = 20,
                cache: Optional[NormConstCache] = None,
                current: Optional[float] = None) -> NewtonUpdate:
    """One RS update with step-halving; the objective never decreases."""
    p = data.p
    if free is None:
        free = np.ones(theta.size, dtype=bool)
    if current is None:
        current = sic_objective(data, theta, penalty, tau, kappa_min, cache)
    grad = score(data, theta, penalty, tau, kappa_min, cache).gradient
    info = info_blocks(data, theta, penalty, tau, kappa_min, cache)
    H = info.assembled_block_diag

    delta = np.zeros(theta.size)
    for name, idx in (("beta", beta_index(p)), ("alpha", alpha_index(p)), ("nu", slice(nu_index(p), nu_index(p) + 1))):
        pos = np.arange(theta.size)[idx][free[idx]]
        if pos.size == 0:
            continue
        g = grad[pos]
        if not np.any(g):
            continue
        delta[pos] = _solve_block(H[np.ix_(pos, pos)], g, name)

    if not np.any(delta):
        return NewtonUpdate(theta, current, 0, False, info.eta_clipped)

    base = theta.to_array()
    lo, hi = nu_bounds
    ni = nu_index(p)
    t = 1.0
    for halvings in range(max_halvings + 1):
        cand = base + t * delta
        clamped = not (lo <= cand[ni] <= hi)
        cand[ni] = min(max(cand[ni], lo), hi)
        new_theta = ThetaVector.from_array(cand)
        try:
            value = sic_objective(data, new_theta, penalty, tau, kappa_min, cache)
        except (NonFiniteLikelihood, QuadratureFailure):
            value = -math.inf
        if value >= current:
            return NewtonUpdate(new_theta, value, halvings, clamped, info.eta_clipped)
        t *= 0.5
    raise NoAscentDirection("no ascent after step-halving", halvings=max_halvings)


# ────────────────────────── one epsilon ─────────────────────────────────────

def fit_at_eps(data: Dataset, theta0: ThetaVector, epsilon: float, penalty: PenaltySpec,
               config: FitConfig, free: Optional[np.ndarray] = None,
               cache: Optional[NormConstCache] = None, strict: bool = False) -> InnerResult:
    """Iterate newton_step until max |theta(m+1) - theta(m)| <= omega.

    Hitting max_inner_iter is recorded in the result; with ``strict`` it raises
    MaxIterations instead.
    """
    tele = config.telescope
    penalty = penalty.with_epsilon(epsilon)
    theta = theta0
    current = sic_objective(data, theta, penalty, config.tau, config.kappa_min, cache)
    trace = [current]
    halvings = 0
    clamped = clipped = stalled = converged = False
    iterations = 0
    while iterations < tele.max_inner_iter:
        iterations += 1
        try:
            upd = newton_step(data, theta, penalty, config.tau, config.kappa_min, free=free,
                              nu_bounds=_nu_bounds(config), max_halvings=tele.max_halvings,
                              cache=cache, current=current)
        except NoAscentDirection:
            # zero step: the iterate is as good as step-halving can make it
            stalled = converged = True
            break
        halvings += upd.halvings
        clamped |= upd.nu_clamped
        clipped |= upd.eta_clipped
        change = float(np.max(np.abs(upd.theta.to_array() - theta.to_array())))
        theta, current = upd.theta, upd.objective
        trace.append(current)
        if change <= tele.omega:
            converged = True
            break
    if not converged:
        if strict:
            raise MaxIterations("inner loop hit max_inner_iter", epsilon=epsilon, iterations=iterations)
        logger.warning("inner loop hit max_inner_iter=%d at eps=%.3g; carrying the iterate forward",
                       iterations, epsilon)
    return InnerResult(theta=theta, converged=converged, iterations=iterations, halvings=halvings,
                       stalled=stalled, nu_clamped=clamped, eta_clipped=clipped, trace=np.array(trace))


# ────────────────────────── telescope ───────────────────────────────────────

def _resolve_exclusions(names: Sequence[str], exclude: Iterable[Tuple[str, str]]) -> List[int]:
    p = len(names)
    out = []
    for component, variable in exclude:
        j = list(names).index(variable) + 1
        if component in ("beta", "both"):
            out.append(beta_index(p).start + j)
        if component in ("alpha", "both"):
            out.append(alpha_index(p).start + j)
    return out


def telescope_fit(data: Dataset, config: Optional[FitConfig] = None,
                  theta_start: Optional[ThetaVector] = None,
                  exclude: Iterable[Tuple[str, str]] = ()) -> FitResult:
    """Run the epsilon-telescope on unscaled data and return the final fit.

    ``theta_start`` (standardized scale) replaces the OLS start; ``exclude``
    lists ``(component, variable)`` pairs held at exactly zero, with
    component one of beta / alpha / both.
    """
    config = config or FitConfig()
    tele: TelescopeConfig = config.telescope
    started = time.perf_counter()
    scaled = standardize(data)
    p = scaled.p
    excluded = _resolve_exclusions(scaled.names, exclude)
    free = free_mask(p, config.mode, config.fixed_nu, excluded)
    cache = NormConstCache()
    lam = config.lam(scaled.n)
    epsilons = tele.epsilons()
    penalty = PenaltySpec.for_design(p, lam, epsilons[0])

    def start() -> ThetaVector:
        theta = theta_start if theta_start is not None else initialize(scaled, config.kappa_min, config.fixed_nu)
        arr = theta.to_array()
        arr[~free & penalized_mask(p)] = 0.0
        if config.fixed_nu is not None:
            arr[nu_index(p)] = config.fixed_nu
        lo, hi = _nu_bounds(config)
        arr[nu_index(p)] = min(max(arr[nu_index(p)], lo), hi)
        return ThetaVector.from_array(arr)

    theta = start()
    path = np.zeros((tele.steps, theta.size))
    traces, iters, halvings, converged, stalled = [], [], [], [], []
    clamped = clipped = False
    for t, eps in enumerate(epsilons):
        theta0 = theta if (tele.warm_start or t == 0) else start()
        try:
            inner = fit_at_eps(scaled, theta0, eps, penalty, config, free=free, cache=cache)
        except SgndError as err:
            raise TelescopeFailure(f"telescope step {t + 1} failed: {err}", step=t + 1,
                                   cause=type(err).__name__) from err
        theta = inner.theta
        path[t] = theta.to_array()
        traces.append(inner.trace)
        iters.append(inner.iterations)
        halvings.append(inner.halvings)
        converged.append(inner.converged)
        stalled.append(inner.stalled)
        clamped |= inner.nu_clamped
        clipped |= inner.eta_clipped
        logger.debug("telescope step %d eps=%.3g iterations=%d objective=%.6f",
                     t + 1, eps, inner.iterations, inner.trace[-1])

    theta = threshold_zero(theta, tele.zero_tol)
    path[-1] = theta.to_array()
    final_penalty = penalty.with_epsilon(epsilons[-1])
    covariance = sandwich_cov(scaled, theta, final_penalty, config.tau, config.kappa_min,
                              free=free, cache=cache)
    theta_orig = unscale_theta(theta, scaled.col_sd)
    ll = loglik(scaled, theta, config.tau, config.kappa_min, cache)
    arr = theta.to_array()
    active = (arr != 0.0) & penalized_mask(p)
    # two intercepts and nu0 always count, as in the SIC constant
    df = int(np.sum(active)) + 3
    if clamped:
        logger.warning("nu0 hit its clamp; kappa is at a bound")
    if covariance.breakdown_flag:
        logger.warning("standard error breakdown detected")
    elapsed = time.perf_counter() - started
    logger.info("fit done: n=%d p=%d kappa=%.4f loglik=%.4f in %.2fs", scaled.n, p,
                theta.kappa(config.kappa_min), ll, elapsed)
    return FitResult(
        theta_scaled=theta,
        theta_original=theta_orig,
        active_beta=theta.beta[1:] != 0.0,
        active_alpha=theta.alpha[1:] != 0.0,
        kappa_hat=theta.kappa(config.kappa_min),
        covariance=covariance,
        loglik=ll,
        bic=bic_value(ll, df, scaled.n),
        df=df,
        sic_trace=tuple(traces),
        path=path,
        epsilons=epsilons,
        diagnostics=FitDiagnostics(
            iterations=tuple(iters), halvings=tuple(halvings), converged=tuple(converged),
            stalled=tuple(stalled), nu_clamped=clamped, eta_clipped=clipped, wall_time=elapsed,
        ),
        names=scaled.names,
        n=scaled.n,
        free_mask=free,
        config=config,
    )
