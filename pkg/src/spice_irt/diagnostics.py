"""Convergence and fit diagnostics over stored draws."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from .errors import DiagnosticError

MIN_RELIABLE_SAMPLES = 10


def gelman_rubin(draws, split: bool = False) -> float:
    """Potential scale reduction factor of one parameter.

    Parameters
    ----------
    draws : array, shape (chains, samples)
    split : bool
        Halve every chain first (the split-chain variant).

    Raises
    ------
    DiagnosticError
        Fewer than 2 chains or 2 samples, or zero within-chain variance.
        Fewer than 10 samples per chain only warns: the statistic is
        computable but unreliable.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim != 2:
        raise DiagnosticError("draws must be (chains, samples)")
    if split:
        half = x.shape[1] // 2
        x = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    m, n = x.shape
    if m < 2 or n < 2:
        raise DiagnosticError(f"need >= 2 chains and >= 2 samples, got {m}x{n}")
    if n < MIN_RELIABLE_SAMPLES:
        warnings.warn(f"R-hat from only {n} samples per chain is unreliable", stacklevel=2)
    W = x.var(axis=1, ddof=1).mean()
    if not W > 0:
        raise DiagnosticError("zero within-chain variance")
    B = n * x.mean(axis=1).var(ddof=1)
    return float(np.sqrt(((n - 1) / n * W + B / n) / W))


def gelman_rubin_all(draws, split: bool = False) -> NDArray[np.float64]:
    """R-hat for every parameter of a (chains, samples, params) array.

    Parameters whose statistic is undefined get NaN instead of raising.
    """
    x = np.asarray(draws, dtype=float)
    out = np.full(x.shape[2], np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for j in range(x.shape[2]):
            try:
                out[j] = gelman_rubin(x[:, :, j], split=split)
            except DiagnosticError:
                pass
    if x.shape[1] < MIN_RELIABLE_SAMPLES:
        warnings.warn(f"R-hat from only {x.shape[1]} samples per chain is unreliable", stacklevel=2)
    return out


def waic(pointwise_loglik) -> tuple[float, float, float]:
    """(elpd, p_waic, waic) from a (draws, N) matrix of log-likelihoods.

    p_waic uses the per-observation sample variance over draws.
    """
    ll = np.asarray(pointwise_loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise DiagnosticError("WAIC needs a (draws, N) matrix with at least 2 draws")
    if not np.all(np.isfinite(ll)):
        raise DiagnosticError("pointwise log-likelihood has non-finite entries")
    S = ll.shape[0]
    lppd = logsumexp(ll, axis=0) - np.log(S)
    p = ll.var(axis=0, ddof=1)
    elpd = float(np.sum(lppd - p))
    return elpd, float(np.sum(p)), -2.0 * elpd


class PointwiseAccumulator:
    """Streaming version of :func:`waic` that keeps O(N) state.

    Running log-sum-exp and Welford variance per observation.
    """

    def __init__(self, n_obs: int):
        self.n = 0
        self.max = np.full(n_obs, -np.inf)
        self.sumexp = np.zeros(n_obs)
        self.mean = np.zeros(n_obs)
        self.m2 = np.zeros(n_obs)

    def update(self, ll) -> None:
        ll = np.asarray(ll, dtype=float)
        self.n += 1
        new_max = np.maximum(self.max, ll)
        with np.errstate(invalid="ignore"):
            self.sumexp = self.sumexp * np.exp(self.max - new_max) + np.exp(ll - new_max)
        self.max = new_max
        delta = ll - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (ll - self.mean)

    def result(self) -> tuple[float, float, float]:
        if self.n < 2:
            raise DiagnosticError("WAIC needs at least 2 draws")
        lppd = self.max + np.log(self.sumexp) - np.log(self.n)
        p = self.m2 / (self.n - 1)
        elpd = float(np.sum(lppd - p))
        return elpd, float(np.sum(p)), -2.0 * elpd


@dataclass
class ChainSummary:
    """Per-parameter summary across chains.

    ``rhat`` is NaN where undefined (a single chain, or no within-chain
    variation); values near 1 indicate agreement between chains.
    """

    names: list[str]
    mean: NDArray[np.float64]
    sd: NDArray[np.float64]
    acceptance: NDArray[np.float64]
    rhat: NDArray[np.float64]


def summarize(samples: list) -> ChainSummary:
    """Pool running moments and acceptance over chains; R-hat from stored draws."""
    names = samples[0].names
    means = np.stack([s.mean for s in samples])
    sds = np.stack([s.sd for s in samples])
    mean = means.mean(axis=0)
    # pooled second moment about the grand mean
    sd = np.sqrt(np.maximum((sds**2 + means**2).mean(axis=0) - mean**2, 0.0))
    acc = np.stack([s.acceptance for s in samples]).mean(axis=0)
    if len(samples) >= 2:
        rhat = gelman_rubin_all(np.stack([s.draws for s in samples]))
    else:
        rhat = np.full(len(names), np.nan)
    return ChainSummary(list(names), mean, sd, acc, rhat)


@dataclass
class FitReport:
    elpd: float
    p_waic: float
    waic: float
    ppp: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    skipped: dict[str, NDArray[np.int_]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# posterior predictive checks


@dataclass
class PPCDraw:
    """Unit latents for one posterior draw: theta per person (N_I x K) and
    natural item parameters per item block."""

    theta: NDArray[np.float64]
    psi: dict[int, NDArray[np.float64]]


def simulate_responses(draw: PPCDraw, data, rng: np.random.Generator) -> NDArray[np.float64]:
    """Replicate every observed response under one draw, over the same linkage."""
    y = np.empty(data.responses.n_obs)
    link = data.linkage
    for b in data.blocks:
        if b.side != "item":
            continue
        for seg in link.blocks[b.block_id].segments:
            psi = draw.psi[b.block_id][seg.local]
            theta = draw.theta[seg.partner_unit, b.person_dim]
            y[seg.obs] = b.family.simulate(psi, theta, rng)
    return y


def pointwise_loglik(draw: PPCDraw, data) -> NDArray[np.float64]:
    """log p(y_n | draw) for every observed response."""
    out = np.empty(data.responses.n_obs)
    y = data.responses.value
    for b in data.blocks:
        if b.side != "item":
            continue
        for seg in data.linkage.blocks[b.block_id].segments:
            theta = draw.theta[seg.partner_unit, b.person_dim]
            out[seg.obs] = b.family.loglik(draw.psi[b.block_id][seg.local], theta, y[seg.obs])
    return out


def posterior_predictive_check(
    draws: Iterable[PPCDraw],
    data,
    statistic: Callable,
    rng: np.random.Generator,
):
    """Posterior predictive p-values, elementwise over the statistic's output.

    ``statistic(values, data)`` maps a full response vector to a scalar or an
    array.  ppp is the fraction of draws with stat(replicate) >= stat(observed);
    draws where an entry is non-finite (on either side) are skipped for that
    entry and counted.

    Returns
    -------
    ppp : array
    skipped : int array, same shape
    """
    observed = np.asarray(statistic(data.responses.value, data), dtype=float)
    ge = np.zeros(observed.shape)
    used = np.zeros(observed.shape)
    n = 0
    for draw in draws:
        rep = np.asarray(statistic(simulate_responses(draw, data, rng), data), dtype=float)
        ok = np.isfinite(rep) & np.isfinite(observed)
        ge += ok & (rep >= observed)
        used += ok
        n += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        ppp = np.where(used > 0, ge / np.maximum(used, 1), np.nan)
    return ppp, (n - used).astype(int)


def item_mean_score(values, data, persons=None) -> NDArray[np.float64]:
    """Mean response per item, optionally over a subset of persons (mask over persons)."""
    resp = data.responses
    keep = np.ones(resp.n_obs, dtype=bool) if persons is None else np.asarray(persons)[resp.person]
    tot = np.bincount(resp.item[keep], weights=np.asarray(values)[keep], minlength=resp.n_items)
    cnt = np.bincount(resp.item[keep], minlength=resp.n_items)
    with np.errstate(invalid="ignore", divide="ignore"):
        return tot / cnt


def person_score_quantiles(values, data, q=(0.1, 0.25, 0.5, 0.75, 0.9)) -> NDArray[np.float64]:
    """Quantiles of the persons' raw-score distribution."""
    resp = data.responses
    scores = np.bincount(resp.person, weights=np.asarray(values), minlength=resp.n_persons)
    return np.quantile(scores, q)


def item_pair_odds_ratios(values, data, pairs) -> NDArray[np.float64]:
    """Log odds ratio of (dichotomized) responses for each (item, item) pair.

    Responses are split at the item's midpoint category (>= 1 for binary).
    Computed over persons answering both items; NaN when a cell is empty.
    """
    resp = data.responses
    vals = np.asarray(values) >= 1
    lookup = {}
    for n, (i, j) in enumerate(zip(resp.person, resp.item)):
        lookup.setdefault(int(j), {})[int(i)] = n
    out = np.full(len(pairs), np.nan)
    for t, (j1, j2) in enumerate(pairs):
        a, b = lookup.get(int(j1), {}), lookup.get(int(j2), {})
        common = sorted(set(a) & set(b))
        if not common:
            continue
        x = vals[[a[i] for i in common]]
        y = vals[[b[i] for i in common]]
        n11 = np.sum(x & y)
        n00 = np.sum(~x & ~y)
        n10 = np.sum(x & ~y)
        n01 = np.sum(~x & y)
        if min(n11, n00, n10, n01) == 0:
            continue
        out[t] = np.log(n11 * n00 / (n10 * n01))
    return out


def sample_item_pairs(data, n_pairs: int, rng: np.random.Generator, min_common: int = 20):
    """Pick item pairs that share at least ``min_common`` persons."""
    link = data.linkage
    resp = data.responses
    persons_of = [set(resp.person[link.item_responses(j)].tolist()) for j in range(resp.n_items)]
    candidates = [
        (j1, j2)
        for j1 in range(resp.n_items)
        for j2 in range(j1 + 1, resp.n_items)
        if len(persons_of[j1] & persons_of[j2]) >= min_common
    ]
    if not candidates:
        return []
    idx = rng.choice(len(candidates), size=min(n_pairs, len(candidates)), replace=False)
    return [candidates[i] for i in sorted(idx)]


def builtin_statistics(data, rng: np.random.Generator, n_pairs: int = 20) -> dict[str, Callable]:
    """The three default test statistics."""
    pairs = sample_item_pairs(data, n_pairs, rng)
    return {
        "item_mean": item_mean_score,
        "person_score_quantiles": person_score_quantiles,
        "item_pair_log_odds_ratio": lambda v, d: item_pair_odds_ratios(v, d, pairs),
    }
