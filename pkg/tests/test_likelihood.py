"""
Tests for the regression likelihood and its derivatives.
Covers:
- log-likelihood against the density and a direct transcription
- smooth-L0 penalty values and derivatives
- analytic score and information against finite differences
- covariate standardization and back-transformation
"""
import math
import os
import sys

import numpy as np
import pytest
from scipy import integrate

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from errors import DegenerateColumn
from likelihood import (
    info_blocks, loglik, loglik_terms, phi_eps, score, sic_objective, smooth_l0_norm, standardize,
    standardized_residuals, unscale_theta,
)
from models import Dataset, PenaltySpec, SgndShape, ThetaVector, alpha_index, beta_index, nu_index
from sgnd import NormConstCache, log_density, norm_const

KMIN = 0.2


def random_instance(rng, n, p, kappa, tau=0.15):
    Z = rng.normal(size=(n, p))
    data0 = Dataset.from_arrays(np.zeros(n), Z)
    theta = ThetaVector(beta=rng.normal(scale=0.5, size=p + 1), alpha=rng.normal(scale=0.3, size=p + 1),
                        nu0=math.log(kappa - KMIN))
    mu = data0.X @ theta.beta
    s = np.exp(0.5 * data0.X @ theta.alpha)
    y = mu + s * rng.standard_t(5, size=n)
    return Dataset.from_arrays(y, Z), theta


def numeric_gradient(f, x, rel_step=1e-5):
    g = np.zeros_like(x)
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        up, down = x.copy(), x.copy()
        up[j] += h
        down[j] -= h
        g[j] = (f(up) - f(down)) / (2 * h)
    return g


def numeric_jacobian(f, x, rel_step=1e-5):
    cols = []
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        up, down = x.copy(), x.copy()
        up[j] += h
        down[j] -= h
        cols.append((f(up) - f(down)) / (2 * h))
    return np.column_stack(cols)


# ────────────────────────── likelihood ──────────────────────────────────────

def test_loglik_term_at_location():
    X = np.array([[0.5], [1.5], [-1.0]])
    theta = ThetaVector(beta=np.array([1.0, 2.0]), alpha=np.array([0.4, 0.0]), nu0=math.log(1.3))
    y = np.array([1.0 + 2.0 * 0.5, 0.0, 3.0])
    data = Dataset.from_arrays(y, X)
    terms = loglik_terms(data, theta, 0.15, KMIN)
    shape = SgndShape.from_nu0(theta.nu0, tau=0.15)
    assert terms[0] == pytest.approx(norm_const(shape).log_c - 0.2, abs=1e-12)


def test_loglik_equals_sum_of_log_density():
    rng = np.random.default_rng(3)
    data, theta = random_instance(rng, 40, 3, 1.6)
    shape = SgndShape.from_nu0(theta.nu0, tau=0.15)
    mu = data.X @ theta.beta
    s = np.exp(0.5 * data.X @ theta.alpha)
    expected = np.sum(log_density(data.y, mu, s, shape))
    assert loglik(data, theta, 0.15, KMIN) == pytest.approx(expected, abs=1e-12)


def test_loglik_independent_transcription():
    y = np.array([0.3, -1.2, 2.5, 0.9, -0.4])
    x = np.array([0.1, -0.7, 1.3, 0.4, -1.1])
    beta = np.array([0.2, 0.8])
    alpha = np.array([-0.3, 0.5])
    kappa, tau = 1.45, 0.15
    theta = ThetaVector(beta=beta, alpha=alpha, nu0=math.log(kappa - KMIN))

    def kernel(z):
        return (math.sqrt(z * z + tau * tau) - tau) ** kappa

    total, _ = integrate.quad(lambda z: math.exp(-kernel(z)), -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)
    ll = 0.0
    for yi, xi in zip(y, x):
        mu = beta[0] + beta[1] * xi
        s = math.exp(0.5 * (alpha[0] + alpha[1] * xi))
        ll += -math.log(total) - math.log(s) - kernel((yi - mu) / s)
    assert loglik(Dataset.from_arrays(y, x), theta, tau, KMIN) == pytest.approx(ll, abs=1e-8)


# ────────────────────────── penalty ─────────────────────────────────────────

def test_phi_eps_values():
    eps = 0.3
    v, d1, d2 = phi_eps(0.0, eps)
    assert (float(v), float(d1)) == (0.0, 0.0)
    assert float(d2) == pytest.approx(2 / eps ** 2)
    assert float(phi_eps(eps, eps)[0]) == pytest.approx(0.5)
    assert float(phi_eps(3.0, 0.01)[0]) == pytest.approx(0.9999888890, rel=1e-9)


def test_phi_eps_derivatives_match_finite_differences():
    eps, t, h = 0.5, 0.8, 1e-5
    _, d1, d2 = phi_eps(t, eps)
    fd1 = (phi_eps(t + h, eps)[0] - phi_eps(t - h, eps)[0]) / (2 * h)
    fd2 = (phi_eps(t + h, eps)[1] - phi_eps(t - h, eps)[1]) / (2 * h)
    assert float(d1) == pytest.approx(float(fd1), rel=1e-6)
    assert float(d2) == pytest.approx(float(fd2), rel=1e-6)


def test_smooth_l0_norm_bounds_and_monotone():
    rng = np.random.default_rng(1)
    values = rng.normal(size=6)
    norms = [smooth_l0_norm(values, eps) for eps in (10.0, 1.0, 0.1, 1e-3)]
    assert all(0 <= n <= 6 for n in norms)
    assert all(a <= b for a, b in zip(norms, norms[1:]))


def test_sic_objective_penalty():
    rng = np.random.default_rng(2)
    data, theta = random_instance(rng, 30, 2, 1.5)
    ll = loglik(data, theta, 0.15, KMIN)
    assert sic_objective(data, theta, PenaltySpec.for_design(2, 0.0, 0.1), 0.15, KMIN) == ll
    zero = ThetaVector(beta=np.array([theta.beta[0], 0, 0]), alpha=np.array([theta.alpha[0], 0, 0]),
                       nu0=theta.nu0)
    lam = math.log(data.n)
    expected = loglik(data, zero, 0.15, KMIN) - 1.5 * lam
    assert sic_objective(data, zero, PenaltySpec.for_design(2, lam, 0.1), 0.15, KMIN) == pytest.approx(expected)


def test_penalty_spec_rejects_penalized_intercept():
    mask = np.zeros(7, dtype=bool)
    mask[0] = True
    with pytest.raises(ValueError):
        PenaltySpec(lam=1.0, epsilon=0.1, penalize_mask=mask)
    assert PenaltySpec.resolve_lambda("bic", 100) == pytest.approx(math.log(100))
    assert PenaltySpec.resolve_lambda("aic", 100) == 2.0


# ────────────────────────── score ───────────────────────────────────────────

DERIVATIVE_DRAWS = 200
FD_STEP = 1e-6


def derivative_case(seed):
    """Random instance over n in [20, 100], p in [1, 5], kappa in [0.5, 3]."""
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(20, 101))
    p = int(rng.integers(1, 6))
    kappa = float(rng.uniform(0.5, 3.0))
    tau = (0.05, 0.15)[seed % 2]
    eps = (10.0, 0.1, 1e-3)[seed % 3]
    data, theta = random_instance(rng, n, p, kappa, tau)
    return data, theta, PenaltySpec.for_design(p, math.log(n), eps), tau


@pytest.mark.parametrize("seed", range(DERIVATIVE_DRAWS))
def test_score_matches_finite_differences(seed):
    data, theta, penalty, tau = derivative_case(seed)
    cache = NormConstCache()

    def objective(arr):
        return sic_objective(data, ThetaVector.from_array(arr), penalty, tau, KMIN, cache)

    x = theta.to_array()
    fd = numeric_gradient(objective, x, FD_STEP)
    g = score(data, theta, penalty, tau, KMIN, cache).gradient
    assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) <= 1e-4


def test_score_small_epsilon_away_from_zero():
    rng = np.random.default_rng(7)
    data, theta = random_instance(rng, 50, 3, 1.8)
    arr = theta.to_array()
    arr[np.abs(arr) < 0.1] = 0.1
    theta = ThetaVector.from_array(arr)
    penalty = PenaltySpec.for_design(3, math.log(50), 1e-3)
    cache = NormConstCache()
    fd = numeric_gradient(lambda a: sic_objective(data, ThetaVector.from_array(a), penalty, 0.15, KMIN, cache),
                          arr)
    g = score(data, theta, penalty, 0.15, KMIN, cache).gradient
    assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) <= 1e-4


def test_score_intercepts_unpenalized():
    rng = np.random.default_rng(4)
    data, theta = random_instance(rng, 25, 2, 1.4)
    blocks = score(data, theta, PenaltySpec.for_design(2, 3.0, 0.5), 0.15, KMIN)
    assert blocks.xi_beta[0] == 0.0 and blocks.xi_alpha[0] == 0.0
    np.testing.assert_allclose(blocks.grad_beta, data.X.T @ blocks.z_beta - 1.5 * blocks.xi_beta)
    assert blocks.grad_nu == pytest.approx(float(np.sum(blocks.z_nu)))


def test_score_reduces_to_normal():
    # kappa = 2, tau -> 0 is a location-scale normal with variance s^2 / 2
    rng = np.random.default_rng(9)
    n, p = 60, 2
    Z = rng.normal(size=(n, p))
    X = np.column_stack([np.ones(n), Z])
    beta = np.array([0.5, 1.0, -0.4])
    alpha = np.array([0.2, 0.3, 0.0])
    s2 = np.exp(X @ alpha)
    y = X @ beta + np.sqrt(s2 / 2) * rng.normal(size=n)
    data = Dataset.from_arrays(y, Z)
    theta = ThetaVector(beta=beta, alpha=alpha, nu0=math.log(2.0 - KMIN))
    blocks = score(data, theta, PenaltySpec.for_design(p, 0.0, 1.0), 1e-8, KMIN)
    r = y - X @ beta
    np.testing.assert_allclose(blocks.grad_beta, X.T @ (2 * r / s2), atol=1e-5)
    np.testing.assert_allclose(blocks.grad_alpha, X.T @ (r * r / s2 - 0.5), atol=1e-5)


# ────────────────────────── information ─────────────────────────────────────

@pytest.mark.parametrize("seed", range(DERIVATIVE_DRAWS))
def test_information_matches_score_jacobian(seed):
    data, theta, penalty, tau = derivative_case(seed)
    cache = NormConstCache()

    def grad(arr):
        return score(data, ThetaVector.from_array(arr), penalty, tau, KMIN, cache).gradient

    J = numeric_jacobian(grad, theta.to_array(), FD_STEP)
    info = info_blocks(data, theta, penalty, tau, KMIN, cache)
    scale = np.max(np.abs(J))
    np.testing.assert_allclose(info.assembled_full, -0.5 * (J + J.T), rtol=1e-3, atol=1e-3 * scale)


def test_information_structure():
    rng = np.random.default_rng(12)
    data, theta = random_instance(rng, 30, 3, 1.5)
    info = info_blocks(data, theta, PenaltySpec.for_design(3, 3.4, 0.2), 0.15, KMIN)
    full, block = info.assembled_full, info.assembled_block_diag
    assert np.max(np.abs(full - full.T)) <= 1e-12
    bi, ai, ni = beta_index(3), alpha_index(3), nu_index(3)
    assert np.all(block[bi, ai] == 0) and np.all(block[ai, bi] == 0)
    assert np.all(block[bi, ni] == 0) and np.all(block[ai, ni] == 0)
    np.testing.assert_array_equal(block[bi, bi], full[bi, bi])
    assert info.Sigma_beta[0] == 0.0 and info.Sigma_alpha[0] == 0.0


def test_information_without_penalty_is_unpenalized():
    rng = np.random.default_rng(13)
    data, theta = random_instance(rng, 30, 2, 2.2)
    info = info_blocks(data, theta, PenaltySpec.for_design(2, 0.0, 0.2), 0.15, KMIN)
    np.testing.assert_allclose(info.assembled_full, info.unpenalized, rtol=0, atol=1e-12)


# ────────────────────────── scaling ─────────────────────────────────────────

def test_standardize_and_unscale_round_trip():
    rng = np.random.default_rng(14)
    data, theta_raw = random_instance(rng, 40, 3, 1.5)
    scaled = standardize(data)
    np.testing.assert_allclose(scaled.X[:, 1:].std(axis=0, ddof=1), 1.0, atol=1e-12)
    theta_scaled = ThetaVector(beta=theta_raw.beta * np.r_[1.0, data.col_sd],
                               alpha=theta_raw.alpha * np.r_[1.0, data.col_sd], nu0=theta_raw.nu0)
    back = unscale_theta(theta_scaled, data.col_sd)
    np.testing.assert_allclose(scaled.X @ theta_scaled.beta, data.X @ back.beta, atol=1e-12)
    np.testing.assert_allclose(back.alpha, theta_raw.alpha, atol=1e-12)
    np.testing.assert_allclose(standardized_residuals(scaled, theta_scaled),
                               standardized_residuals(data, back), atol=1e-10)


def test_unscale_identity_for_unit_sd():
    theta = ThetaVector(beta=np.array([1.0, 2.0]), alpha=np.array([0.1, -0.3]), nu0=0.4)
    back = unscale_theta(theta, np.array([1.0]))
    np.testing.assert_array_equal(back.to_array(), theta.to_array())


def test_standardize_rejects_constant_column():
    data = Dataset.from_arrays(np.arange(5.0), np.column_stack([np.ones(5) * 3, np.arange(5.0)]))
    with pytest.raises(DegenerateColumn):
        standardize(data)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset.from_arrays(np.arange(3.0), np.ones((3, 2)))
    data = Dataset.from_arrays(np.arange(6.0), np.arange(12.0).reshape(6, 2), names=["a", "b"])
    assert data.n == 6 and data.p == 2 and data.names == ("a", "b")
    assert not data.X.flags.writeable
