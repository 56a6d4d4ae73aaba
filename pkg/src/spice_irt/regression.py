"""Block latent regressions u = B'X + e with e ~ N(0, S R S).

B gets a conjugate multivariate-normal draw.  R is moved through the
Cholesky factor L of R, reparameterized to unconstrained coordinates
y = atanh(z) with z the partial correlations of each row of L, and
updated one coordinate at a time by random-walk Metropolis.  The standard
deviations S are updated one at a time with a logit-normal proposal
confined to their uniform-prior bounds.
"""

from __future__ import annotations

import copy
import math
from functools import cached_property
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import solve_triangular

from .errors import DomainError, NumericalError, ValidationError

_LOG2 = np.log(2.0)


@dataclass
class PriorSpec:
    """Prior hyperparameters for one block.

    b0, Omega0 : mean and precision of vec(B) (columns of B stacked)
    S_lower, S_upper : uniform-prior bounds for each standard deviation
    eta : LKJ shape; 1 is uniform over correlation matrices
    """

    b0: NDArray[np.float64]
    Omega0: NDArray[np.float64]
    S_lower: NDArray[np.float64]
    S_upper: NDArray[np.float64]
    eta: float = 1.0

    def __post_init__(self):
        self.b0 = np.asarray(self.b0, dtype=float).ravel()
        self.Omega0 = np.atleast_2d(np.asarray(self.Omega0, dtype=float))
        self.S_lower = np.atleast_1d(np.asarray(self.S_lower, dtype=float))
        self.S_upper = np.atleast_1d(np.asarray(self.S_upper, dtype=float))
        n = self.b0.size
        if self.Omega0.shape != (n, n):
            raise ValidationError(f"Omega0 must be {n}x{n}, got {self.Omega0.shape}")
        if not np.allclose(self.Omega0, self.Omega0.T):
            raise ValidationError("Omega0 must be symmetric")
        if np.linalg.eigvalsh(self.Omega0).min() < -1e-10 * max(1.0, np.abs(self.Omega0).max()):
            raise ValidationError("Omega0 must be positive semidefinite")
        if self.S_lower.shape != self.S_upper.shape:
            raise ValidationError("S bounds must have equal length")
        if np.any(self.S_lower < 0) or np.any(self.S_lower >= self.S_upper):
            raise ValidationError("need 0 <= S_lower < S_upper elementwise")
        if not self.eta > 0:
            raise ValidationError("eta must be > 0")

    @classmethod
    def default(
        cls,
        p: int,
        K: int,
        precision: float = 0.01,
        s_bounds: tuple[float, float] = (0.01, 3.0),
        eta: float = 1.0,
    ) -> "PriorSpec":
        return cls(
            b0=np.zeros(p * K),
            Omega0=precision * np.eye(p * K),
            S_lower=np.full(K, s_bounds[0]),
            S_upper=np.full(K, s_bounds[1]),
            eta=eta,
        )


@dataclass
class BlockDesign:
    """Stacked unit features X0 (U x p) and person weights W (length U)."""

    X0: NDArray[np.float64]
    W: NDArray[np.float64] = None
    check_rank: bool = True

    def __post_init__(self):
        self.X0 = np.atleast_2d(np.asarray(self.X0, dtype=float))
        U = self.X0.shape[0]
        self.W = np.ones(U) if self.W is None else np.asarray(self.W, dtype=float).ravel()
        if self.W.shape != (U,):
            raise ValidationError("weights must have one entry per unit")
        if np.any(self.W < 0):
            raise ValidationError("weights must be nonnegative")
        if not self.U_eff > 0:
            raise ValidationError("effective number of units must be positive")
        if self.check_rank and np.linalg.matrix_rank(self.X0 * np.sqrt(self.W)[:, None]) < self.X0.shape[1]:
            raise ValidationError("feature matrix is not of full column rank")

    @property
    def U(self) -> int:
        return self.X0.shape[0]

    @property
    def p(self) -> int:
        return self.X0.shape[1]

    @property
    def U_eff(self) -> float:
        return float(self.W.sum())

    @cached_property
    def XtWX(self) -> NDArray[np.float64]:
        return self.X0.T @ (self.X0 * self.W[:, None])


@dataclass
class RegressionParams:
    """Current (B, S, L) of one block plus masks of held-fixed entries."""

    B: NDArray[np.float64]
    S: NDArray[np.float64]
    L: NDArray[np.float64]
    fixed_B: NDArray[np.bool_] = None
    fixed_S: NDArray[np.bool_] = None
    fixed_R: bool = False

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.S = np.atleast_1d(np.asarray(self.S, dtype=float))
        self.L = np.atleast_2d(np.asarray(self.L, dtype=float))
        K = self.S.size
        if self.B.shape[1] != K or self.L.shape != (K, K):
            raise ValidationError("inconsistent B, S, L shapes")
        if self.fixed_B is None:
            self.fixed_B = np.zeros(self.B.shape, dtype=bool)
        if self.fixed_S is None:
            self.fixed_S = np.zeros(K, dtype=bool)
        self.fixed_B = np.asarray(self.fixed_B, dtype=bool).reshape(self.B.shape)
        self.fixed_S = np.asarray(self.fixed_S, dtype=bool).reshape(K)
        if K == 1:
            self.fixed_R = True

    @property
    def K(self) -> int:
        return self.S.size

    @property
    def R(self) -> NDArray[np.float64]:
        return self.L @ self.L.T

    @property
    def Gamma(self) -> NDArray[np.float64]:
        return self.S[:, None] * self.R * self.S[None, :]

    @property
    def Gamma_inv(self) -> NDArray[np.float64]:
        return gamma_inverse(self.S, self.L)

    def copy(self) -> "RegressionParams":
        return replace(
            self,
            B=self.B.copy(),
            S=self.S.copy(),
            L=self.L.copy(),
            fixed_B=self.fixed_B.copy(),
            fixed_S=self.fixed_S.copy(),
        )


def _inv_chol_scaled(S, L):
    # M = L^{-1} S^{-1}, so Gamma^{-1} = M' M
    return np.linalg.inv(L) / S[None, :]


def gamma_inverse(S, L) -> NDArray[np.float64]:
    """(S L L' S)^{-1} computed through the triangular factor."""
    M = _inv_chol_scaled(np.asarray(S, dtype=float), np.asarray(L, dtype=float))
    return M.T @ M


# ---------------------------------------------------------------------------
# B


def residual_crossprod(units, design: BlockDesign, B) -> NDArray[np.float64]:
    """E'WE for residuals E = units - X0 B."""
    E = np.asarray(units, dtype=float) - design.X0 @ np.asarray(B, dtype=float)
    out = E.T @ (E * design.W[:, None])
    return 0.5 * (out + out.T)


def b_conditional(units, design: BlockDesign, S, L, prior: PriorSpec):
    """Precision P and right-hand side h of the full conditional of vec(B).

    The conditional mean is P^{-1} h.  (Gamma^{-1} kron X'WX) applied to the
    weighted OLS estimate reduces to vec(X'WU Gamma^{-1}), so the OLS
    estimate itself is never formed.
    """
    units = np.asarray(units, dtype=float)
    Ginv = gamma_inverse(S, L)
    XtWU = design.X0.T @ (units * design.W[:, None])
    K, p = Ginv.shape[0], design.p
    # Ginv kron X'WX without np.kron's generic machinery
    P = (Ginv[:, None, :, None] * design.XtWX[None, :, None, :]).reshape(K * p, K * p) + prior.Omega0
    h = (XtWU @ Ginv).ravel(order="F") + prior.Omega0 @ prior.b0
    return P, h


def sample_B(
    units,
    design: BlockDesign,
    S,
    L,
    prior: PriorSpec,
    rng: np.random.Generator,
    fixed_mask=None,
    B_current=None,
) -> NDArray[np.float64]:
    """Draw B from its full conditional.

    Entries flagged in ``fixed_mask`` keep their value in ``B_current``; the
    remaining entries are drawn from the normal conditional on them.
    """
    P, h = b_conditional(units, design, S, L, prior)
    p, K = design.p, np.size(S)
    z = rng.standard_normal(p * K)
    if fixed_mask is None or not np.any(fixed_mask):
        out = _draw_normal_precision(P, h, z)
        return out.reshape((p, K), order="F")
    fixed = np.asarray(fixed_mask, dtype=bool).ravel(order="F")
    out = np.asarray(B_current, dtype=float).ravel(order="F").copy()
    free = ~fixed
    if free.any():
        fi, xi = np.flatnonzero(free), np.flatnonzero(fixed)
        P_aa = P[fi[:, None], fi]
        h_a = h[fi] - P[fi[:, None], xi] @ out[xi]
        out[fi] = _draw_normal_precision(P_aa, h_a, z[: fi.size])
    return out.reshape((p, K), order="F")


def _draw_normal_precision(P, h, z):
    """mean + C^{-T} z for N(P^{-1} h, P^{-1}), with P = C C'."""
    try:
        C = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"posterior precision of B is singular (condition number {np.linalg.cond(P):.3g})"
        ) from None
    w = solve_triangular(C, h, lower=True, check_finite=False)
    return solve_triangular(C, w + z, lower=True, trans="T", check_finite=False)


# ---------------------------------------------------------------------------
# R through L and y


def n_corr(K: int) -> int:
    return K * (K - 1) // 2


def _dim_from_count(n: int) -> int:
    K = int(round((1 + np.sqrt(1 + 8 * n)) / 2))
    if n_corr(K) != n:
        raise DomainError(f"{n} is not a triangular count K(K-1)/2")
    return K


def corr_pairs(K: int) -> list[tuple[int, int]]:
    """Free (row, col) positions of L in row order: (1,0), (2,0), (2,1), ..."""
    return [(i, j) for i in range(1, K) for j in range(i)]


def chol_to_unconstrained(L) -> NDArray[np.float64]:
    """Map a correlation Cholesky factor to its K(K-1)/2 unconstrained values."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    K = L.shape[0]
    if L.shape != (K, K) or np.any(np.triu(L, 1) != 0):
        raise DomainError("L must be square lower-triangular")
    if np.any(np.abs(np.einsum("ij,ij->i", L, L) - 1.0) > 1e-8):
        raise DomainError("rows of L must have unit length")
    if np.any(np.diag(L) <= 0):
        raise DomainError("diagonal of L must be positive")
    y = np.empty(n_corr(K))
    t = 0
    for i in range(1, K):
        rem = 1.0
        for j in range(i):
            z = L[i, j] / np.sqrt(rem)
            y[t] = np.arctanh(z)
            rem -= L[i, j] ** 2
            t += 1
    return y


def unconstrained_to_chol(y, K: int | None = None) -> NDArray[np.float64]:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if K is None:
        K = _dim_from_count(y.size)
    L = np.zeros((K, K))
    L[0, 0] = 1.0
    z = np.tanh(y)
    t = 0
    for i in range(1, K):
        rem = 1.0
        for j in range(i):
            L[i, j] = z[t] * np.sqrt(rem)
            rem -= L[i, j] ** 2
            t += 1
        L[i, i] = np.sqrt(max(rem, 0.0))
    return L


def _log_sech2(y):
    a = np.abs(y)
    return -2.0 * (a + np.log1p(np.exp(-2.0 * a)) - _LOG2)


def log_jacobian_unconstrained_to_chol(y, L) -> float:
    """log |d ell / d y| for the y -> z -> ell map."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    L = np.atleast_2d(L)
    out = float(np.sum(_log_sech2(y)))
    for i in range(1, L.shape[0]):
        # prefix sums sum_{j' < j} ell_ij'^2 for j = 0..i-1
        prefix = np.concatenate(([0.0], np.cumsum(L[i, : i - 1] ** 2)))
        out += 0.5 * float(np.sum(np.log1p(-prefix)))
    return out


def log_full_conditional_L(L, S, EtWE, U_eff: float, eta: float) -> float:
    """Log full conditional of L given residual cross-products, up to a constant."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    S = np.atleast_1d(np.asarray(S, dtype=float))
    K = L.shape[0]
    diag = np.diag(L)
    if np.any(diag <= 0):
        if np.any(diag[1:] == 0):
            return -np.inf
        raise NumericalError("L is singular")
    k = np.arange(2, K + 1)
    out = float(np.sum((K - k + 2.0 * eta - 2.0 - U_eff) * np.log(diag[1:])))
    out -= U_eff * float(np.sum(np.log(S)))
    M = _inv_chol_scaled(S, L)
    out -= 0.5 * float(np.sum(np.asarray(EtWE) * (M.T @ M)))
    return out


def _chol_logjac(y, K: int):
    """L and the log-Jacobian of y -> L in one pass (scalar loop; K is small)."""
    L = np.zeros((K, K))
    L[0, 0] = 1.0
    logjac = 0.0
    t = 0
    for i in range(1, K):
        rem = 1.0
        for j in range(i):
            if rem <= 0.0:
                return L, -math.inf
            yt = float(y[t])
            a = abs(yt)
            logjac += -2.0 * (a + math.log1p(math.exp(-2.0 * a)) - _LOG2) + 0.5 * math.log(rem)
            lij = math.tanh(yt) * math.sqrt(rem)
            L[i, j] = lij
            rem -= lij * lij
            t += 1
        if rem <= 0.0:
            return L, -math.inf
        L[i, i] = math.sqrt(rem)
    return L, logjac


def _chol_to_y(L, K: int) -> NDArray[np.float64]:
    # unvalidated inverse of _chol_logjac, for the sampler's inner loop
    y = np.empty(K * (K - 1) // 2)
    t = 0
    for i in range(1, K):
        rem = 1.0
        for j in range(i):
            lij = float(L[i, j])
            y[t] = math.atanh(lij / math.sqrt(rem))
            rem -= lij * lij
            t += 1
    return y


def _log_target_y(y, A, U_eff, eta, K):
    """Target of update_R on the y scale, dropping terms constant in L.

    ``A`` is S^{-1} E'WE S^{-1}, so tr(E'WE Gamma^{-1}) = tr(A R^{-1}).
    """
    L, logjac = _chol_logjac(y, K)
    if logjac == -math.inf:
        return -math.inf, L
    out = logjac
    for k in range(1, K):
        out += (K - (k + 1) + 2.0 * eta - 2.0 - U_eff) * math.log(L[k, k])
    if A is not None:
        Linv = np.linalg.inv(L)
        out -= 0.5 * float(np.sum(A * (Linv.T @ Linv)))
    return out, L


def update_R(
    params: RegressionParams,
    EtWE,
    U_eff: float,
    prior: PriorSpec,
    proposal_sds,
    rng: np.random.Generator,
) -> tuple[RegressionParams, NDArray[np.bool_]]:
    """Random-walk Metropolis over the unconstrained coordinates of L, in row order."""
    if params.fixed_R or params.K == 1:
        return params, np.zeros(0, dtype=bool)
    K = params.K
    m = n_corr(K)
    sds = np.broadcast_to(np.asarray(proposal_sds, dtype=float), (m,))
    steps = rng.standard_normal(m)
    log_u = np.log(rng.random(m))
    y = _chol_to_y(params.L, K)
    EtWE = np.asarray(EtWE, dtype=float)
    A = EtWE / np.outer(params.S, params.S) if np.any(EtWE) else None
    cur, L = _log_target_y(y, A, U_eff, prior.eta, K)
    accepted = np.zeros(m, dtype=bool)
    for t in range(m):
        y_new = y.copy()
        y_new[t] += sds[t] * steps[t]
        new, L_new = _log_target_y(y_new, A, U_eff, prior.eta, K)
        if log_u[t] < new - cur:
            y, cur, L = y_new, new, L_new
            accepted[t] = True
    # arrays are never modified in place, so a shallow copy is enough
    out = copy.copy(params)
    out.L = L
    return out, accepted


# ---------------------------------------------------------------------------
# S


def bounded_log_q_ratio(y0: float, y1: float, a: float, b: float) -> float:
    """log q(y0 | y1) - log q(y1 | y0) for the logit-normal bounded proposal."""
    return float(np.log((y1 - a) * (b - y1)) - np.log((y0 - a) * (b - y0)))


def bounded_proposal(y0: float, a: float, b: float, sigma: float, rng: np.random.Generator, z: float | None = None):
    """Propose y1 in (a, b) from a normal step on logit((y - a)/(b - a)).

    Returns ``(y1, log_q_ratio)``.  ``z`` may carry a pre-drawn standard
    normal; otherwise one is drawn from ``rng``.
    """
    if not a < y0 < b:
        raise DomainError(f"current value {y0} is outside ({a}, {b})")
    if not sigma > 0:
        raise DomainError("sigma must be > 0")
    if z is None:
        z = rng.standard_normal()
    x0 = np.log((y0 - a) / (b - y0))
    x1 = x0 + sigma * z
    # a + (b - a) * expit(x1), written to stay strictly inside (a, b)
    if x1 >= 0:
        e = np.exp(-x1)
        y1 = (a * e + b) / (1.0 + e)
    else:
        e = np.exp(x1)
        y1 = (a + b * e) / (1.0 + e)
    if not a < y1 < b:
        # saturated logit; stay put, which is a rejected move
        return y0, 0.0
    return y1, bounded_log_q_ratio(y0, y1, a, b)


def log_full_conditional_S(S, L, EtWE, U_eff: float) -> float:
    S = np.atleast_1d(np.asarray(S, dtype=float))
    M = _inv_chol_scaled(S, np.atleast_2d(L))
    return -U_eff * float(np.sum(np.log(S))) - 0.5 * float(np.sum(np.asarray(EtWE) * (M.T @ M)))


def update_S(
    params: RegressionParams,
    EtWE,
    U_eff: float,
    prior: PriorSpec,
    proposal_sds,
    rng: np.random.Generator,
) -> tuple[RegressionParams, NDArray[np.bool_]]:
    """Metropolis-Hastings update of each free standard deviation in turn."""
    K = params.K
    sds = np.broadcast_to(np.asarray(proposal_sds, dtype=float), (K,))
    steps = rng.standard_normal(K)
    log_u = np.log(rng.random(K))
    S = params.S.copy()
    cur = log_full_conditional_S(S, params.L, EtWE, U_eff)
    accepted = np.zeros(K, dtype=bool)
    for k in range(K):
        if params.fixed_S[k]:
            continue
        s1, lqr = bounded_proposal(S[k], prior.S_lower[k], prior.S_upper[k], sds[k], rng, z=steps[k])
        S_new = S.copy()
        S_new[k] = s1
        new = log_full_conditional_S(S_new, params.L, EtWE, U_eff)
        if log_u[k] < new - cur + lqr:
            S, cur = S_new, new
            accepted[k] = s1 != params.S[k]
    out = copy.copy(params)
    out.S = S
    return out, accepted
