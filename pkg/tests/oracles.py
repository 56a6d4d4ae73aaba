"""Independent reference computations used by several test modules.

Nothing here calls into the package's numerical code: each oracle works
from the model definition with dense linear algebra, quadrature or a
different sampling scheme.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate


def dense_B_posterior(U, X, W, Gamma, b0, Omega0):
    """Mean and covariance of vec(B) from the explicit Kronecker-form GLS.

    The weighted likelihood prod_i N(u_i; B'x_i, Gamma)^{w_i} is written as
    one Gaussian in vec(U) with precision Gamma^{-1} kron diag(W).
    """
    U = np.asarray(U, dtype=float)
    n, K = U.shape
    Z = np.kron(np.eye(K), X)
    Lam = np.kron(np.linalg.inv(Gamma), np.diag(W))
    P = Z.T @ Lam @ Z + Omega0
    cov = np.linalg.inv(P)
    mean = cov @ (Z.T @ Lam @ U.ravel(order="F") + Omega0 @ b0)
    return mean, cov


def conditional_normal(mean, cov, fixed, values):
    """Mean and covariance of the free coordinates given the fixed ones."""
    f = np.asarray(fixed, dtype=bool)
    a = ~f
    S_af = cov[np.ix_(a, f)]
    S_ff_inv = np.linalg.inv(cov[np.ix_(f, f)])
    m = mean[a] + S_af @ S_ff_inv @ (values - mean[f])
    c = cov[np.ix_(a, a)] - S_af @ S_ff_inv @ S_af.T
    return m, c


def moment_z_scores(draws, mean, cov):
    """z-scores of sample means, variances and covariances against the truth."""
    n = draws.shape[0]
    zm = (draws.mean(axis=0) - mean) / np.sqrt(np.diag(cov) / n)
    C = np.cov(draws, rowvar=False)
    d = np.diag(cov)
    se = np.sqrt((np.outer(d, d) + cov**2) / n)
    zc = (C - cov) / se
    return zm, zc


def batch_means_se(x, n_batches: int = 50) -> float:
    """Monte Carlo standard error of the mean of an autocorrelated series."""
    x = np.asarray(x, dtype=float)
    m = len(x) // n_batches
    means = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def sd_posterior_mean(ss: float, n_eff: float, lo: float, hi: float) -> float:
    """Posterior mean of a K=1 residual sd with a flat prior on (lo, hi).

    density(s) proportional to s^{-n_eff} exp(-ss / (2 s^2)).
    """
    # work relative to the mode to avoid underflow
    mode = np.sqrt(ss / n_eff)

    def logk(s):
        return -n_eff * np.log(s / mode) - 0.5 * ss * (1.0 / s**2 - 1.0 / mode**2)

    pts = [p for p in (mode,) if lo < p < hi]
    z = integrate.quad(lambda s: np.exp(logk(s)), lo, hi, points=pts, epsabs=0, epsrel=1e-12, limit=200)[0]
    m = integrate.quad(lambda s: s * np.exp(logk(s)), lo, hi, points=pts, epsabs=0, epsrel=1e-12, limit=200)[0]
    return m / z


def lkj_vine_k3(n: int, eta: float, rng: np.random.Generator):
    """Draw 3x3 correlation matrices from LKJ(eta) by the C-vine method.

    Returns (r12, r13, r23) arrays.
    """
    beta = eta + 0.5
    p12 = 2.0 * rng.beta(beta, beta, n) - 1.0
    p13 = 2.0 * rng.beta(beta, beta, n) - 1.0
    beta -= 0.5
    p23 = 2.0 * rng.beta(beta, beta, n) - 1.0
    r23 = p23 * np.sqrt((1 - p12**2) * (1 - p13**2)) + p12 * p13
    return p12, p13, r23


def correlation_posterior_is(A, n_eff: float, n_draws: int, rng: np.random.Generator):
    """Posterior mean (and its standard error) of (r21, r31, r32) for K=3, S=1.

    Target: |R|^{-n_eff/2} exp(-tr(A R^{-1}) / 2) under a uniform prior on
    correlation matrices, computed by self-normalized importance sampling
    with the prior as proposal.
    """
    r12, r13, r23 = lkj_vine_k3(n_draws, 1.0, rng)
    R = np.empty((n_draws, 3, 3))
    R[:, 0, 0] = R[:, 1, 1] = R[:, 2, 2] = 1.0
    R[:, 0, 1] = R[:, 1, 0] = r12
    R[:, 0, 2] = R[:, 2, 0] = r13
    R[:, 1, 2] = R[:, 2, 1] = r23
    sign, logdet = np.linalg.slogdet(R)
    Rinv = np.linalg.inv(R)
    logw = -0.5 * n_eff * logdet - 0.5 * np.einsum("ij,nji->n", A, Rinv)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    x = np.stack([r12, r13, r23], axis=1)
    mean = w @ x
    se = np.sqrt((w[:, None] ** 2 * (x - mean) ** 2).sum(axis=0))
    return mean, se, 1.0 / np.sum(w**2)
