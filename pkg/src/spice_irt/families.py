"""Unidimensional item response families.

Each family knows its natural parameter names, the bijection between the
natural parameters and the unconstrained scale on which item latents are
stored, a vectorized log-likelihood and a response simulator.

Vectorized methods take ``psi`` with shape ``(n, param_count)``, ``theta``
with shape ``(n,)`` and ``y`` with shape ``(n,)``; no validation is done
there, since they sit on the sampler's hot path.  The scalar entry points
:func:`log_likelihood`, :func:`to_unconstrained` and :func:`to_natural`
validate their inputs.
"""

from __future__ import annotations

import re

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit, logsumexp

from .errors import DomainError

_LOG_2PI = np.log(2.0 * np.pi)


def _log_sigmoid(x):
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


class ItemFamily:
    """Base class for item response families."""

    tag: str = ""
    param_names: tuple[str, ...] = ()
    discrete: bool = True

    @property
    def param_count(self) -> int:
        return len(self.param_names)

    @property
    def n_categories(self) -> int | None:
        return 2 if self.discrete else None

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self.tag == other.tag

    def __hash__(self) -> int:
        return hash(self.tag)

    # -- transforms -----------------------------------------------------
    def to_natural(self, psi: NDArray) -> NDArray:
        raise NotImplementedError

    def to_unconstrained(self, psi: NDArray) -> NDArray:
        raise NotImplementedError

    def check_natural(self, psi: NDArray, strict: bool = True) -> None:
        """Raise :class:`DomainError` if ``psi`` is outside the admissible region.

        With ``strict`` the open region is required (transform domain);
        otherwise closed boundaries that the likelihood tolerates are allowed.
        """
        psi = np.asarray(psi, dtype=float)
        if psi.shape[-1] != self.param_count:
            raise DomainError(
                f"{self.tag} expects {self.param_count} parameters, got {psi.shape[-1]}"
            )
        if not np.all(np.isfinite(psi)):
            raise DomainError(f"{self.tag} parameters must be finite")

    # -- likelihood -----------------------------------------------------
    def loglik(self, psi: NDArray, theta: NDArray, y: NDArray) -> NDArray:
        raise NotImplementedError

    def check_response(self, y: float) -> None:
        if self.discrete:
            m = self.n_categories
            if float(y) != int(y) or not 0 <= int(y) < m:
                raise DomainError(f"response {y!r} is not a category of {self.tag}")
        elif not np.isfinite(y):
            raise DomainError(f"response {y!r} is not finite")

    def simulate(self, psi: NDArray, theta: NDArray, rng: np.random.Generator) -> NDArray:
        raise NotImplementedError

    def expected_score(self, psi: NDArray, theta: NDArray) -> NDArray:
        raise NotImplementedError


class _Logistic(ItemFamily):
    """Shared machinery for the 1PL-4PL binary families.

    P(y = 1) = c + (u - c) * logistic(a * theta + d).
    """

    def _parts(self, psi):
        n = psi.shape[0]
        d = psi[:, 0]
        a = psi[:, 1] if self.param_count > 1 else np.ones(n, dtype=psi.dtype)
        c = psi[:, 2] if self.param_count > 2 else np.zeros(n, dtype=psi.dtype)
        u = psi[:, 3] if self.param_count > 3 else np.ones(n, dtype=psi.dtype)
        return d, a, c, u

    def prob(self, psi, theta):
        d, a, c, u = self._parts(psi)
        return c + (u - c) * expit(a * theta + d)

    def loglik(self, psi, theta, y):
        d, a, c, u = self._parts(psi)
        x = a * theta + d
        if self.param_count <= 2:
            return _log_sigmoid(np.where(y > 0.5, x, -x))
        ls_pos = _log_sigmoid(x)
        ls_neg = _log_sigmoid(-x)
        with np.errstate(divide="ignore"):
            # c*s(-x) + u*s(x) and (1-u)*s(x) + (1-c)*s(-x), both sums of
            # nonnegative terms
            lp1 = np.logaddexp(np.log(c) + ls_neg, np.log(u) + ls_pos)
            lp0 = np.logaddexp(np.log1p(-u) + ls_pos, np.log1p(-c) + ls_neg)
        return np.where(y > 0.5, lp1, lp0)

    def simulate(self, psi, theta, rng):
        p = self.prob(psi, theta)
        return (rng.random(p.shape) < p).astype(float)

    def expected_score(self, psi, theta):
        return self.prob(psi, theta)

    def check_natural(self, psi, strict=True):
        super().check_natural(psi, strict)
        psi = np.atleast_2d(np.asarray(psi, dtype=float))
        d, a, c, u = self._parts(psi)
        if np.any(a <= 0):
            raise DomainError(f"{self.tag}: discrimination a must be > 0")
        if self.param_count > 2:
            lo_ok = c > 0 if strict else c >= 0
            hi_ok = u < 1 if (strict and self.param_count > 3) else u <= 1
            if not (np.all(lo_ok) and np.all(c < u) and np.all(hi_ok)):
                bounds = "0 < c < u < 1" if strict else "0 <= c < u <= 1"
                raise DomainError(f"{self.tag}: asymptotes must satisfy {bounds}")


class Rasch(_Logistic):
    tag = "1PL"
    param_names = ("d",)

    def to_natural(self, psi):
        return np.array(psi, dtype=float, copy=True)

    def to_unconstrained(self, psi):
        return np.array(psi, dtype=float, copy=True)


class TwoPL(_Logistic):
    tag = "2PL"
    param_names = ("d", "a")

    def to_natural(self, psi):
        out = np.array(psi, copy=True)
        out[..., 1] = np.exp(out[..., 1])
        return out

    def to_unconstrained(self, psi):
        out = np.array(psi, dtype=float, copy=True)
        out[..., 1] = np.log(out[..., 1])
        return out


class ThreePL(_Logistic):
    tag = "3PL"
    param_names = ("d", "a", "c")

    def to_natural(self, psi):
        out = np.array(psi, copy=True)
        out[..., 1] = np.exp(out[..., 1])
        out[..., 2] = expit(out[..., 2])
        return out

    def to_unconstrained(self, psi):
        out = np.array(psi, dtype=float, copy=True)
        out[..., 1] = np.log(out[..., 1])
        out[..., 2] = logit(out[..., 2])
        return out


class FourPL(_Logistic):
    tag = "4PL"
    param_names = ("d", "a", "c", "u")

    def to_natural(self, psi):
        out = np.array(psi, copy=True)
        out[..., 1] = np.exp(out[..., 1])
        c = expit(out[..., 2])
        out[..., 2] = c
        # u lives on (c, 1)
        out[..., 3] = c + (1.0 - c) * expit(out[..., 3])
        return out

    def to_unconstrained(self, psi):
        out = np.array(psi, dtype=float, copy=True)
        c = out[..., 2].copy()
        out[..., 1] = np.log(out[..., 1])
        out[..., 2] = logit(c)
        out[..., 3] = logit((out[..., 3] - c) / (1.0 - c))
        return out


class GPCM(ItemFamily):
    """Generalized partial credit model with ``m`` ordered categories.

    P(y = k) is proportional to exp(sum_{v=1..k} a (theta - b_v)); the empty
    sum for k = 0 is zero.  Natural parameters are ``(a, b_1, ..., b_{m-1})``.
    """

    def __init__(self, m: int):
        if int(m) < 2:
            raise DomainError("GPCM needs at least 2 categories")
        self.m = int(m)
        self.tag = f"GPCM({self.m})"
        self.param_names = ("a",) + tuple(f"b{v}" for v in range(1, self.m))

    def __repr__(self):
        return f"GPCM({self.m})"

    @property
    def n_categories(self):
        return self.m

    def _logits(self, psi, theta):
        a = psi[:, :1]
        steps = a * (theta[:, None] - psi[:, 1:])
        logits = np.zeros((psi.shape[0], self.m), dtype=np.result_type(psi, theta))
        np.cumsum(steps, axis=1, out=logits[:, 1:])
        return logits

    def category_probs(self, psi, theta):
        logits = self._logits(psi, theta)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def loglik(self, psi, theta, y):
        logits = self._logits(psi, theta)
        yi = y.astype(np.intp)
        picked = np.take_along_axis(logits, yi[:, None], axis=1)[:, 0]
        return picked - logsumexp(logits, axis=1)

    def simulate(self, psi, theta, rng):
        p = self.category_probs(psi, theta)
        u = rng.random(p.shape[0])
        cdf = np.cumsum(p, axis=1)
        return np.minimum((u[:, None] > cdf).sum(axis=1), self.m - 1).astype(float)

    def expected_score(self, psi, theta):
        return self.category_probs(psi, theta) @ np.arange(self.m)

    def to_natural(self, psi):
        out = np.array(psi, copy=True)
        out[..., 0] = np.exp(out[..., 0])
        return out

    def to_unconstrained(self, psi):
        out = np.array(psi, dtype=float, copy=True)
        out[..., 0] = np.log(out[..., 0])
        return out

    def check_natural(self, psi, strict=True):
        super().check_natural(psi, strict)
        if np.any(np.atleast_2d(psi)[:, 0] <= 0):
            raise DomainError(f"{self.tag}: discrimination a must be > 0")


class ContinuousGaussian(ItemFamily):
    """y ~ Normal(a * theta + d, sigma_e**2)."""

    tag = "GAUSSIAN"
    param_names = ("d", "a", "sigma")
    discrete = False

    def loglik(self, psi, theta, y):
        d, a, s = psi[:, 0], psi[:, 1], psi[:, 2]
        z = (y - a * theta - d) / s
        return -0.5 * (z * z + _LOG_2PI) - np.log(s)

    def simulate(self, psi, theta, rng):
        return psi[:, 0] + psi[:, 1] * theta + psi[:, 2] * rng.standard_normal(theta.shape)

    def expected_score(self, psi, theta):
        return psi[:, 0] + psi[:, 1] * theta

    def to_natural(self, psi):
        out = np.array(psi, copy=True)
        out[..., 1:] = np.exp(out[..., 1:])
        return out

    def to_unconstrained(self, psi):
        out = np.array(psi, dtype=float, copy=True)
        out[..., 1:] = np.log(out[..., 1:])
        return out

    def check_natural(self, psi, strict=True):
        super().check_natural(psi, strict)
        if np.any(np.atleast_2d(psi)[:, 1:] <= 0):
            raise DomainError(f"{self.tag}: a and sigma must be > 0")


class BoundedContinuous(ItemFamily):
    """Logit-normal responses on (0, 1).

    logit(y) ~ Normal(a * theta + d, 1 / precision); the log-density includes
    the change-of-variables term -log(y (1 - y)).
    """

    tag = "BOUNDED"
    param_names = ("d", "a", "precision")
    discrete = False

    def loglik(self, psi, theta, y):
        d, a, tau = psi[:, 0], psi[:, 1], psi[:, 2]
        ly = logit(y)
        r = ly - a * theta - d
        return 0.5 * (np.log(tau) - _LOG_2PI - tau * r * r) - np.log(y) - np.log1p(-y)

    def simulate(self, psi, theta, rng):
        z = psi[:, 0] + psi[:, 1] * theta + rng.standard_normal(theta.shape) / np.sqrt(psi[:, 2])
        return expit(z)

    def expected_score(self, psi, theta):
        return expit(psi[:, 0] + psi[:, 1] * theta)

    def check_response(self, y):
        if not 0.0 < float(y) < 1.0:
            raise DomainError(f"response {y!r} is outside (0, 1)")

    to_natural = ContinuousGaussian.to_natural
    to_unconstrained = ContinuousGaussian.to_unconstrained

    def check_natural(self, psi, strict=True):
        ItemFamily.check_natural(self, psi, strict)
        if np.any(np.atleast_2d(psi)[:, 1:] <= 0):
            raise DomainError(f"{self.tag}: a and precision must be > 0")


_ALIASES = {
    "1PL": Rasch,
    "RASCH": Rasch,
    "RASCH_1PL": Rasch,
    "2PL": TwoPL,
    "TWO_PL": TwoPL,
    "3PL": ThreePL,
    "THREE_PL": ThreePL,
    "4PL": FourPL,
    "FOUR_PL": FourPL,
    "GAUSSIAN": ContinuousGaussian,
    "CONTINUOUS_GAUSSIAN": ContinuousGaussian,
    "BOUNDED": BoundedContinuous,
    "BOUNDED_CONTINUOUS": BoundedContinuous,
}


def get_family(tag: str | ItemFamily) -> ItemFamily:
    """Look up a family by tag, e.g. ``"2PL"`` or ``"GPCM(3)"``."""
    if isinstance(tag, ItemFamily):
        return tag
    key = str(tag).strip().upper()
    m = re.fullmatch(r"GPCM\((\d+)\)", key)
    if m:
        return GPCM(int(m.group(1)))
    try:
        return _ALIASES[key]()
    except KeyError:
        raise DomainError(f"unknown item family {tag!r}") from None


def log_likelihood(family, psi_natural, theta, value) -> float:
    """Log-probability (or log-density) of one response.

    ``theta`` may be a scalar or a vector; only its first entry is used
    since all families are unidimensional.
    """
    family = get_family(family)
    psi = np.asarray(psi_natural, dtype=float).reshape(1, -1)
    family.check_natural(psi, strict=False)
    family.check_response(value)
    th = np.atleast_1d(np.asarray(theta, dtype=float))[:1]
    out = family.loglik(psi, th, np.array([float(value)]))[0]
    return float(out)


def to_unconstrained(family, psi_natural) -> NDArray:
    family = get_family(family)
    psi = np.asarray(psi_natural, dtype=float)
    family.check_natural(psi.reshape(-1, family.param_count), strict=True)
    return family.to_unconstrained(psi)


def to_natural(family, psi_unconstrained) -> NDArray:
    family = get_family(family)
    psi = np.asarray(psi_unconstrained, dtype=float)
    if psi.shape[-1] != family.param_count or not np.all(np.isfinite(psi)):
        raise DomainError(f"{family.tag}: expected {family.param_count} finite values")
    return family.to_natural(psi)
