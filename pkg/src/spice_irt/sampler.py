"""Metropolis-Hastings-within-Gibbs sampler with four-phase proposal tuning."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy.special import logit

from .diagnostics import PointwiseAccumulator
from .errors import NumericalError, ValidationError
from .model import BlockSpec, LinkageIndex, ResponseData, build_linkage
from .regression import (
    BlockDesign,
    PriorSpec,
    RegressionParams,
    corr_pairs,
    n_corr,
    residual_crossprod,
    sample_B,
    update_R,
    update_S,
)
from .rng import STAGE_B, STAGE_INIT, STAGE_R, STAGE_S, StreamFactory

log = logging.getLogger(__name__)

MAX_INIT_ATTEMPTS = 100


@dataclass
class SamplerConfig:
    """Run lengths, tuning targets and execution settings.

    Attributes
    ----------
    M1, M2, M3, M4 : int
        Iterations in each phase.  Only phase 4 is used for inference.
    a0, a1 : float
        Acceptance band used by the factor-5 rule after phase 2.
    a_star : float
        Target acceptance for the phase-4 proposal scales.
    thin : int
        Keep every ``thin``-th phase-4 draw.
    init_proposal_sd : float
        Proposal sd used in phases 1-2, on the unconstrained scales.
    worker_count : int
        Threads used for within-block unit updates.  Results do not depend
        on it.
    precision : {"double", "single"}
        Storage precision of unit latents and pointwise log-likelihoods.
    """

    M1: int = 200
    M2: int = 500
    M3: int = 500
    M4: int = 1000
    a0: float = 0.2
    a1: float = 0.5
    a_star: float = 0.35
    thin: int = 1
    n_chains: int = 1
    seed: int = 0
    init_proposal_sd: float = 2.5
    worker_count: int = 1
    precision: str = "double"
    store_trace: bool = False
    store_pointwise: bool = False

    def __post_init__(self):
        if not 0 < self.a0 < self.a_star < self.a1 < 1:
            raise ValidationError("need 0 < a0 < a_star < a1 < 1")
        if min(self.M1, self.M2, self.M3) < 0 or self.M4 < 1:
            raise ValidationError("need M1, M2, M3 >= 0 and M4 >= 1")
        if self.thin < 1 or self.n_chains < 1 or self.worker_count < 1:
            raise ValidationError("thin, n_chains and worker_count must be >= 1")
        if not self.init_proposal_sd > 0:
            raise ValidationError("init_proposal_sd must be > 0")
        if self.precision not in ("double", "single"):
            raise ValidationError("precision must be 'double' or 'single'")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    @property
    def total_iterations(self) -> int:
        return self.M1 + self.M2 + self.M3 + self.M4


@dataclass
class RegressionFix:
    """Held-fixed latent regression entries for one block.

    ``B``/``S`` give values; the masks select which entries are fixed (all
    of them when a mask is omitted).  ``R`` fixes the whole correlation
    matrix.
    """

    B: NDArray | None = None
    B_mask: NDArray | None = None
    S: NDArray | None = None
    S_mask: NDArray | None = None
    R: NDArray | None = None


@dataclass
class Constraints:
    """Fixed units (keyed by ``(side, dense index)``, values on the natural
    scale) and fixed regression entries per block."""

    fixed_units: dict[tuple[str, int], NDArray] = field(default_factory=dict)
    regression: dict[int, RegressionFix] = field(default_factory=dict)


@dataclass
class CalibrationData:
    """Responses, blocks and per-block designs, with the linkage built once."""

    responses: ResponseData
    blocks: list[BlockSpec]
    designs: dict[int, BlockDesign]
    linkage: LinkageIndex = None

    def __post_init__(self):
        ids = [b.block_id for b in self.blocks]
        if len(set(ids)) != len(ids):
            raise ValidationError("block ids must be unique")
        for b in self.blocks:
            d = self.designs.get(b.block_id)
            if d is None:
                raise ValidationError(f"block {b.block_id} has no design")
            if d.U != b.size or d.p != b.n_features:
                raise ValidationError(
                    f"block {b.block_id}: design is {d.U}x{d.p}, expected {b.size}x{b.n_features}"
                )
        # persons first, then items: this is the sweep order
        self.blocks = sorted(self.blocks, key=lambda b: (b.side != "person", ids.index(b.block_id)))
        if self.linkage is None:
            self.linkage = build_linkage(self.responses, self.blocks)
        for b in self.blocks:
            if b.side == "item" and b.person_dim >= self.person_dim:
                raise ValidationError(f"item block {b.block_id} measures missing person dimension")

    @property
    def person_dim(self) -> int:
        return next(b.dim for b in self.blocks if b.side == "person")

    def block(self, block_id: int) -> BlockSpec:
        return next(b for b in self.blocks if b.block_id == block_id)


@dataclass
class ChainState:
    """Complete state of one chain between iterations."""

    latents: dict[int, NDArray]
    regression: dict[int, RegressionParams]
    unit_sd: dict[int, NDArray]
    unit_acc: dict[int, NDArray]
    S_sd: dict[int, NDArray]
    S_acc: dict[int, NDArray]
    R_sd: dict[int, NDArray]
    R_acc: dict[int, NDArray]
    loglik: NDArray
    iteration: int = 0
    phase: int = 1
    n_tallied: int = 0

    def reset_tallies(self):
        for d in (self.unit_acc, self.S_acc, self.R_acc):
            for k in d:
                d[k][...] = 0
        self.n_tallied = 0

    def acceptance(self):
        n = max(self.n_tallied, 1)
        return (
            {b: a / n for b, a in self.unit_acc.items()},
            {b: a / n for b, a in self.S_acc.items()},
            {b: a / n for b, a in self.R_acc.items()},
        )

    def copy(self) -> "ChainState":
        return ChainState(
            latents={b: v.copy() for b, v in self.latents.items()},
            regression={b: v.copy() for b, v in self.regression.items()},
            unit_sd={b: v.copy() for b, v in self.unit_sd.items()},
            unit_acc={b: v.copy() for b, v in self.unit_acc.items()},
            S_sd={b: v.copy() for b, v in self.S_sd.items()},
            S_acc={b: v.copy() for b, v in self.S_acc.items()},
            R_sd={b: v.copy() for b, v in self.R_sd.items()},
            R_acc={b: v.copy() for b, v in self.R_acc.items()},
            loglik=self.loglik.copy(),
            iteration=self.iteration,
            phase=self.phase,
            n_tallied=self.n_tallied,
        )


def state_hash(state: ChainState) -> str:
    h = hashlib.sha256()
    for b in sorted(state.latents):
        h.update(np.ascontiguousarray(state.latents[b]).tobytes())
        r = state.regression[b]
        for arr in (r.B, r.S, r.L):
            h.update(np.ascontiguousarray(arr).tobytes())
    h.update(np.ascontiguousarray(state.loglik).tobytes())
    return h.hexdigest()


@dataclass
class PosteriorSamples:
    """Phase-4 output of one chain."""

    chain: int
    names: list[str]
    draws: NDArray[np.float64]
    mean: NDArray[np.float64]
    sd: NDArray[np.float64]
    acceptance: NDArray[np.float64]
    waic: tuple[float, float, float]
    n_iterations: int
    phase4_iterations: int
    proposal_sds: dict[str, NDArray] = field(default_factory=dict)
    phase_acceptance: dict[int, float] = field(default_factory=dict)
    trace: NDArray | None = None
    pointwise: NDArray | None = None
    final_state: ChainState | None = None

    def column(self, name: str) -> NDArray[np.float64]:
        return self.draws[:, self.names.index(name)]


# ---------------------------------------------------------------------------
# tuning rules


def adapt_factor5(acc_rate, a0: float, a1: float, sd):
    """Shrink the proposal sd 5x below ``a0``, grow it 5x above ``a1``."""
    acc = np.asarray(acc_rate, dtype=float)
    sd = np.asarray(sd, dtype=float)
    out = np.where(acc < a0, sd / 5.0, np.where(acc > a1, sd * 5.0, sd))
    return out if out.ndim else float(out)


def adapt_interpolate(sd2, acc2, sd3, acc3, a_star: float):
    """Phase-4 proposal sd from the phase-2 and phase-3 (sd, acceptance) pairs.

    Linear interpolation of log sd against logit acceptance, evaluated at
    ``a_star`` and clamped to [min(sd2, sd3)/5, 5 max(sd2, sd3)].  Falls back
    to ``sd3`` when the two sds or the two clamped rates coincide.
    """
    sd2, acc2, sd3, acc3 = (np.asarray(v, dtype=float) for v in (sd2, acc2, sd3, acc3))
    l2 = logit(np.clip(acc2, 0.01, 0.99))
    l3 = logit(np.clip(acc3, 0.01, 0.99))
    degenerate = (sd2 == sd3) | (l2 == l3)
    denom = np.where(degenerate, 1.0, l3 - l2)
    log_sd4 = np.log(sd2) + (logit(a_star) - l2) * (np.log(sd3) - np.log(sd2)) / denom
    lo = np.minimum(sd2, sd3) / 5.0
    hi = np.maximum(sd2, sd3) * 5.0
    out = np.where(degenerate, sd3, np.clip(np.exp(log_sd4), lo, hi))
    return out if out.ndim else float(out)


def normalize_weights(w) -> NDArray[np.float64]:
    """Scale weights so they sum to the number of positive weights.

    Weights already normalized to rounding error are returned unchanged, so
    normalizing is idempotent and written weights read back bit-exactly.
    """
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite and nonnegative")
    pos = int(np.count_nonzero(w > 0))
    if pos == 0:
        raise ValidationError("at least one weight must be positive")
    total = w.sum()
    if abs(total - pos) <= 1e-12 * pos:
        return w.copy()
    return w * (pos / total)


# ---------------------------------------------------------------------------
# sampler


class GibbsSampler:
    """One chain of the Metropolis-within-Gibbs sampler.

    Parameters
    ----------
    config : SamplerConfig
    data : CalibrationData
    priors : dict of block id to PriorSpec, optional
        Blocks without an entry get :meth:`PriorSpec.default`.
    constraints : Constraints, optional
    chain : int
        Chain number; selects the chain's random streams.
    """

    def __init__(
        self,
        config: SamplerConfig,
        data: CalibrationData,
        priors: dict[int, PriorSpec] | None = None,
        constraints: Constraints | None = None,
        chain: int = 0,
    ):
        self.config = config
        self.data = data
        self.constraints = constraints or Constraints()
        self.priors = {}
        for b in data.blocks:
            pr = (priors or {}).get(b.block_id) or PriorSpec.default(b.n_features, b.dim)
            if pr.b0.size != b.n_features * b.dim or pr.S_lower.size != b.dim:
                raise ValidationError(f"prior for block {b.block_id} has wrong dimensions")
            self.priors[b.block_id] = pr
        self.chain = chain
        self.streams = StreamFactory(config.seed, chain)
        self.dtype = config.dtype
        self.y = data.responses.value.astype(self.dtype)
        self.person_weight = data.responses.person_weight
        self._blocks = {b.block_id: b for b in data.blocks}
        self._fixed_units = self._unit_masks()
        self._pool = ThreadPoolExecutor(config.worker_count) if config.worker_count > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __del__(self):
        self.close()

    # -- setup ------------------------------------------------------------
    def _unit_masks(self):
        masks = {}
        values = {}
        link = self.data.linkage
        for b in self.data.blocks:
            masks[b.block_id] = np.zeros(b.size, dtype=bool)
            values[b.block_id] = {}
        for (side, idx), val in self.constraints.fixed_units.items():
            owner = link.person_block if side == "person" else link.item_block
            local = link.person_local if side == "person" else link.item_local
            if not 0 <= idx < len(owner):
                raise ValidationError(f"fixed {side} {idx} does not exist")
            bid = int(owner[idx])
            b = self._blocks[bid]
            val = np.asarray(val, dtype=float).reshape(b.dim)
            if side == "item":
                val = b.family.to_unconstrained(val[None, :])[0]
            masks[bid][local[idx]] = True
            values[bid][int(local[idx])] = val
        self._fixed_values = values
        return masks

    def _initial_regression(self, b: BlockSpec) -> RegressionParams:
        prior = self.priors[b.block_id]
        fix = self.constraints.regression.get(b.block_id, RegressionFix())
        K, p = b.dim, b.n_features
        B = prior.b0.reshape((p, K), order="F").copy()
        fixed_B = np.zeros((p, K), dtype=bool)
        if fix.B is not None:
            vals = np.asarray(fix.B, dtype=float).reshape(p, K)
            fixed_B = np.ones((p, K), dtype=bool) if fix.B_mask is None else np.asarray(fix.B_mask, bool).reshape(p, K)
            B[fixed_B] = vals[fixed_B]
        S = 0.5 * (prior.S_lower + prior.S_upper)
        fixed_S = np.zeros(K, dtype=bool)
        if fix.S is not None:
            vals = np.asarray(fix.S, dtype=float).reshape(K)
            fixed_S = np.ones(K, dtype=bool) if fix.S_mask is None else np.asarray(fix.S_mask, bool).reshape(K)
            S[fixed_S] = vals[fixed_S]
        L = np.eye(K)
        fixed_R = K == 1
        if fix.R is not None:
            L = np.linalg.cholesky(np.asarray(fix.R, dtype=float).reshape(K, K))
            fixed_R = True
        return RegressionParams(B, S, L, fixed_B, fixed_S, fixed_R)

    def initial_state(self) -> ChainState:
        """Random initial state; retried until the log-likelihood is finite."""
        cfg = self.config
        for attempt in range(MAX_INIT_ATTEMPTS):
            latents, regression = {}, {}
            for b in self.data.blocks:
                rng = self.streams.stream(attempt, b.block_id, STAGE_INIT)
                params = self._initial_regression(b)
                regression[b.block_id] = params
                if b.side == "person":
                    lat = rng.standard_normal((b.size, b.dim))
                else:
                    mean = self.data.designs[b.block_id].X0 @ params.B
                    chol = params.S[:, None] * params.L
                    lat = mean + rng.standard_normal((b.size, b.dim)) @ chol.T
                for local, val in self._fixed_values[b.block_id].items():
                    lat[local] = val
                latents[b.block_id] = lat.astype(self.dtype)
            state = ChainState(
                latents=latents,
                regression=regression,
                unit_sd={b.block_id: np.full((b.size, b.dim), cfg.init_proposal_sd) for b in self.data.blocks},
                unit_acc={b.block_id: np.zeros((b.size, b.dim)) for b in self.data.blocks},
                S_sd={b.block_id: np.full(b.dim, cfg.init_proposal_sd) for b in self.data.blocks},
                S_acc={b.block_id: np.zeros(b.dim) for b in self.data.blocks},
                R_sd={b.block_id: np.full(n_corr(b.dim), cfg.init_proposal_sd) for b in self.data.blocks},
                R_acc={b.block_id: np.zeros(n_corr(b.dim)) for b in self.data.blocks},
                loglik=np.zeros(self.data.responses.n_obs, dtype=self.dtype),
            )
            state.loglik[:] = self.pointwise_loglik(state)
            if np.all(np.isfinite(state.loglik)):
                return state
            log.debug("chain %d: non-finite initial log-likelihood, attempt %d", self.chain, attempt)
        bad = np.flatnonzero(~np.isfinite(state.loglik))
        raise NumericalError(
            f"chain {self.chain}: no finite initial log-likelihood after {MAX_INIT_ATTEMPTS} attempts; "
            f"{bad.size} responses non-finite, e.g. rows {bad[:10].tolist()}"
        )

    # -- likelihood ------------------------------------------------------
    def natural_params(self, state: ChainState, block_id: int) -> NDArray:
        b = self._blocks[block_id]
        return b.family.to_natural(state.latents[block_id])

    def pointwise_loglik(self, state: ChainState) -> NDArray:
        """log p(Y_n | theta, psi) for every response at the current state."""
        out = np.zeros(self.data.responses.n_obs, dtype=self.dtype)
        for b in self.data.blocks:
            if b.side != "item":
                continue
            psi = self.natural_params(state, b.block_id)
            for seg in self.data.linkage.blocks[b.block_id].segments:
                theta = state.latents[seg.partner_block][seg.partner_local, b.person_dim]
                out[seg.obs] = b.family.loglik(psi[seg.local], theta, self.y[seg.obs])
        return out

    def unit_log_target(self, state: ChainState, block_id: int, local: int, latent=None) -> float:
        """Full-conditional log density of one unit, evaluated response by response.

        This is the slow reference path; the sampler uses the vectorized
        block update.
        """
        b = self._blocks[block_id]
        lat = state.latents[block_id][local].astype(float) if latent is None else np.asarray(latent, dtype=float)
        params = state.regression[block_id]
        mu = self.data.designs[block_id].X0[local] @ params.B
        r = lat - mu
        out = -0.5 * float(r @ params.Gamma_inv @ r)
        link = self.data.linkage
        unit = b.unit_ids[local]
        if b.side == "person":
            for n in link.person_responses(unit):
                j = self.data.responses.item[n]
                ib = self._blocks[int(link.item_block[j])]
                psi = ib.family.to_natural(state.latents[ib.block_id][link.item_local[j]][None, :].astype(float))
                out += float(ib.family.loglik(psi, np.array([lat[ib.person_dim]]), np.array([float(self.y[n])]))[0])
        else:
            psi = b.family.to_natural(lat[None, :])
            for n in link.item_responses(unit):
                i = self.data.responses.person[n]
                pb = int(link.person_block[i])
                theta = float(state.latents[pb][link.person_local[i], b.person_dim])
                w = self.person_weight[i]
                out += w * float(b.family.loglik(psi, np.array([theta]), np.array([float(self.y[n])]))[0])
        return out

    # -- unit updates ----------------------------------------------------
    def _chunks(self, U: int):
        w = min(self.config.worker_count, max(U, 1))
        edges = np.linspace(0, U, w + 1).astype(int)
        return [(int(edges[c]), int(edges[c + 1])) for c in range(w) if edges[c + 1] > edges[c]]

    def _update_chunk(self, state, b, k, start, stop, z, log_u, mu, Ginv, sd, fixed, acc_counter):
        lat = state.latents[b.block_id]
        dt = self.dtype
        cur = lat[start:stop]
        step = sd[start:stop, k] * z[start:stop]
        new_k = (cur[:, k] + step).astype(dt)
        step = new_k.astype(float) - cur[:, k].astype(float)
        resid = cur.astype(float) - mu[start:stop]
        g = resid @ Ginv[:, k]
        delta = -0.5 * (2.0 * step * g + step * step * Ginv[k, k])
        pending = []
        view = self.data.linkage.blocks[b.block_id]
        if b.side == "person":
            for seg in view.segments:
                ib = self._blocks[seg.partner_block]
                if ib.person_dim != k:
                    continue
                sl = seg.slice_units(start, stop)
                if sl.start == sl.stop:
                    continue
                obs = seg.obs[sl]
                loc = seg.local[sl] - start
                psi = self._psi_cache[ib.block_id][seg.partner_local[sl]]
                ll_new = ib.family.loglik(psi, new_k[loc], self.y[obs])
                delta += np.bincount(loc, weights=ll_new - state.loglik[obs], minlength=stop - start)
                pending.append((obs, loc, ll_new))
        else:
            prop = cur.copy()
            prop[:, k] = new_k
            psi_new = b.family.to_natural(prop)
            for seg in view.segments:
                sl = seg.slice_units(start, stop)
                if sl.start == sl.stop:
                    continue
                obs = seg.obs[sl]
                loc = seg.local[sl] - start
                pu = seg.partner_unit[sl]
                theta = state.latents[seg.partner_block][seg.partner_local[sl], b.person_dim]
                ll_new = b.family.loglik(psi_new[loc], theta, self.y[obs])
                w = self.person_weight[pu]
                delta += np.bincount(loc, weights=w * (ll_new - state.loglik[obs]), minlength=stop - start)
                pending.append((obs, loc, ll_new))
        accept = (log_u[start:stop] < delta) & ~fixed[start:stop]
        accept &= np.isfinite(delta)
        cur[accept, k] = new_k[accept]
        for obs, loc, ll_new in pending:
            m = accept[loc]
            state.loglik[obs[m]] = ll_new[m]
        acc_counter[start:stop, k] += accept

    def update_block_units(self, state: ChainState, block_id: int):
        """One random-walk Metropolis step for every coordinate of every free unit."""
        b = self._blocks[block_id]
        params = state.regression[block_id]
        mu = self.data.designs[block_id].X0 @ params.B
        Ginv = params.Gamma_inv
        fixed = self._fixed_units[block_id]
        sd = state.unit_sd[block_id]
        U = b.size
        chunks = self._chunks(U)
        for k in range(b.dim):
            rng = self.streams.stream(state.iteration, block_id, k)
            z = rng.standard_normal(U)
            log_u = np.log(rng.random(U))
            if b.side == "person":
                self._psi_cache = {
                    ib.block_id: self.natural_params(state, ib.block_id)
                    for ib in self.data.blocks
                    if ib.side == "item"
                }
            args = (state, b, k)
            tail = (z, log_u, mu, Ginv, sd, fixed, state.unit_acc[block_id])
            if self._pool is None or len(chunks) == 1:
                for start, stop in chunks:
                    self._update_chunk(*args, start, stop, *tail)
            else:
                futures = [self._pool.submit(self._update_chunk, *args, s, e, *tail) for s, e in chunks]
                for f in futures:
                    f.result()

    # -- regression updates ------------------------------------------------
    def update_block_regression(self, state: ChainState, block_id: int):
        design = self.data.designs[block_id]
        prior = self.priors[block_id]
        params = state.regression[block_id]
        units = state.latents[block_id].astype(float)
        if not params.fixed_B.all():
            rng = self.streams.stream(state.iteration, block_id, STAGE_B)
            try:
                params.B = sample_B(units, design, params.S, params.L, prior, rng, params.fixed_B, params.B)
            except NumericalError as exc:
                raise NumericalError(f"iteration {state.iteration}, block {block_id}: {exc}") from exc
        if params.fixed_R and params.fixed_S.all():
            return
        EtWE = residual_crossprod(units, design, params.B)
        if not params.fixed_R:
            rng = self.streams.stream(state.iteration, block_id, STAGE_R)
            params, acc = update_R(params, EtWE, design.U_eff, prior, state.R_sd[block_id], rng)
            state.R_acc[block_id] += acc
        if not params.fixed_S.all():
            rng = self.streams.stream(state.iteration, block_id, STAGE_S)
            params, acc = update_S(params, EtWE, design.U_eff, prior, state.S_sd[block_id], rng)
            state.S_acc[block_id] += acc
        state.regression[block_id] = params

    def gibbs_iteration(self, state: ChainState) -> ChainState:
        """One full sweep: person units, item units, then block regressions."""
        for b in self.data.blocks:
            if not self._fixed_units[b.block_id].all():
                self.update_block_units(state, b.block_id)
        for b in self.data.blocks:
            self.update_block_regression(state, b.block_id)
        state.iteration += 1
        state.n_tallied += 1
        return state

    # -- parameter bookkeeping -------------------------------------------
    def parameter_names(self) -> list[str]:
        names = []
        state_reg = {b.block_id: self._initial_regression(b) for b in self.data.blocks}
        for b in self.data.blocks:
            r = state_reg[b.block_id]
            p, K = r.B.shape
            names += [
                f"block{b.block_id}.B[{row},{col}]"
                for col in range(K)
                for row in range(p)
                if not r.fixed_B[row, col]
            ]
            names += [f"block{b.block_id}.S[{k}]" for k in range(K) if not r.fixed_S[k]]
            if not r.fixed_R:
                names += [f"block{b.block_id}.R[{i},{j}]" for i, j in corr_pairs(K)]
        for b in self.data.blocks:
            free = np.flatnonzero(~self._fixed_units[b.block_id])
            if b.side == "person":
                names += [f"person{b.unit_ids[u]}.dim{k}" for u in free for k in range(b.dim)]
            else:
                names += [f"item{b.unit_ids[u]}.{nm}" for u in free for nm in b.family.param_names]
        return names

    def flatten(self, state: ChainState) -> NDArray[np.float64]:
        parts = []
        for b in self.data.blocks:
            r = state.regression[b.block_id]
            parts.append(r.B.T[~r.fixed_B.T])
            parts.append(r.S[~r.fixed_S])
            if not r.fixed_R:
                R = r.R
                parts.append(np.array([R[i, j] for i, j in corr_pairs(r.K)]))
        for b in self.data.blocks:
            free = ~self._fixed_units[b.block_id]
            if b.side == "person":
                parts.append(state.latents[b.block_id][free].ravel())
            else:
                parts.append(self.natural_params(state, b.block_id)[free].ravel())
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])

    def flat_acceptance(self, state: ChainState) -> NDArray[np.float64]:
        """Acceptance rate of each flattened parameter; Gibbs-drawn B counts as 1."""
        unit_acc, S_acc, R_acc = state.acceptance()
        parts = []
        for b in self.data.blocks:
            r = state.regression[b.block_id]
            parts.append(np.ones(int((~r.fixed_B).sum())))
            parts.append(S_acc[b.block_id][~r.fixed_S])
            if not r.fixed_R:
                parts.append(R_acc[b.block_id])
        for b in self.data.blocks:
            free = ~self._fixed_units[b.block_id]
            parts.append(unit_acc[b.block_id][free].ravel())
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])

    def flat_mh_mask(self, state: ChainState) -> NDArray[np.bool_]:
        """True for flattened parameters updated by Metropolis steps (everything but B)."""
        parts = []
        for b in self.data.blocks:
            r = state.regression[b.block_id]
            parts.append(np.zeros(int((~r.fixed_B).sum()), dtype=bool))
            parts.append(np.ones(int((~r.fixed_S).sum()), dtype=bool))
            if not r.fixed_R:
                parts.append(np.ones(n_corr(r.K), dtype=bool))
        for b in self.data.blocks:
            free = ~self._fixed_units[b.block_id]
            parts.append(np.ones(int(free.sum()) * b.dim, dtype=bool))
        return np.concatenate(parts)

    # -- tuning ----------------------------------------------------------
    def _all_sds(self, state):
        return [state.unit_sd, state.S_sd, state.R_sd]

    def _all_acc(self, state):
        ua, sa, ra = state.acceptance()
        return [ua, sa, ra]

    def _adapt_after_phase2(self, state):
        cfg = self.config
        self._phase2 = (
            [{b: v.copy() for b, v in d.items()} for d in self._all_sds(state)],
            [{b: v.copy() for b, v in d.items()} for d in self._all_acc(state)],
        )
        for sds, accs in zip(self._all_sds(state), self._all_acc(state)):
            for b in sds:
                sds[b] = np.asarray(adapt_factor5(accs[b], cfg.a0, cfg.a1, sds[b]), dtype=float).reshape(sds[b].shape)

    def _adapt_after_phase3(self, state):
        cfg = self.config
        sd2s, acc2s = self._phase2
        for sds, accs, sd2, acc2 in zip(self._all_sds(state), self._all_acc(state), sd2s, acc2s):
            for b in sds:
                changed = sd2[b] != sds[b]
                new = np.asarray(adapt_interpolate(sd2[b], acc2[b], sds[b], accs[b], cfg.a_star), dtype=float)
                sds[b] = np.where(changed, new.reshape(sds[b].shape), sds[b])

    # -- driver ----------------------------------------------------------
    def run(self, progress: Callable[[dict], None] | None = None, progress_every: int = 100) -> PosteriorSamples:
        cfg = self.config
        state = self.initial_state()
        phase_acc = {}
        lengths = [cfg.M1, cfg.M2, cfg.M3]
        mh = None
        for phase, M in enumerate(lengths, start=1):
            state.phase = phase
            state.reset_tallies()
            for t in range(M):
                self.gibbs_iteration(state)
                if progress and (t + 1) % progress_every == 0:
                    progress(self._event(state, mh))
            if mh is None:
                mh = self.flat_mh_mask(state)
            phase_acc[phase] = float(self.flat_acceptance(state)[mh].mean()) if M else float("nan")
            if phase == 2:
                self._adapt_after_phase2(state)
            elif phase == 3:
                self._adapt_after_phase3(state)

        state.phase = 4
        state.reset_tallies()
        names = self.parameter_names()
        P = len(names)
        n_store = cfg.M4 // cfg.thin
        draws = np.empty((n_store, P))
        mean = np.zeros(P)
        m2 = np.zeros(P)
        trace = np.empty((cfg.M4, P)) if cfg.store_trace else None
        pointwise = np.empty((cfg.M4, state.loglik.size)) if cfg.store_pointwise else None
        acc_ll = PointwiseAccumulator(state.loglik.size)
        stored = 0
        for t in range(cfg.M4):
            self.gibbs_iteration(state)
            x = self.flatten(state)
            delta = x - mean
            mean += delta / (t + 1)
            m2 += delta * (x - mean)
            acc_ll.update(state.loglik)
            if trace is not None:
                trace[t] = x
            if pointwise is not None:
                pointwise[t] = state.loglik
            if (t + 1) % cfg.thin == 0:
                draws[stored] = x
                stored += 1
            if progress and (t + 1) % progress_every == 0:
                progress(self._event(state, mh))
        acc = self.flat_acceptance(state)
        phase_acc[4] = float(acc[self.flat_mh_mask(state)].mean()) if mh is not None and mh.any() else float("nan")
        sds = {}
        for b in self.data.blocks:
            sds[f"block{b.block_id}.units"] = state.unit_sd[b.block_id].copy()
            sds[f"block{b.block_id}.S"] = state.S_sd[b.block_id].copy()
            sds[f"block{b.block_id}.R"] = state.R_sd[b.block_id].copy()
        return PosteriorSamples(
            chain=self.chain,
            names=names,
            draws=draws,
            mean=mean,
            sd=np.sqrt(m2 / cfg.M4),
            acceptance=acc,
            waic=acc_ll.result(),
            n_iterations=state.iteration,
            phase4_iterations=cfg.M4,
            proposal_sds=sds,
            phase_acceptance=phase_acc,
            trace=trace,
            pointwise=pointwise,
            final_state=state,
        )

    def _event(self, state, mh):
        ua, sa, ra = state.acceptance()
        summary = {}
        for b in self.data.blocks:
            free = ~self._fixed_units[b.block_id]
            if free.any():
                summary[f"block{b.block_id}.units"] = round(float(ua[b.block_id][free].mean()), 4)
            if not state.regression[b.block_id].fixed_S.all():
                summary[f"block{b.block_id}.S"] = round(float(sa[b.block_id].mean()), 4)
            if not state.regression[b.block_id].fixed_R:
                summary[f"block{b.block_id}.R"] = round(float(ra[b.block_id].mean()), 4)
        return {
            "chain": self.chain,
            "iteration": state.iteration,
            "phase": state.phase,
            "acceptance": summary,
        }


def gibbs_iteration(sampler: GibbsSampler, state: ChainState) -> ChainState:
    return sampler.gibbs_iteration(state)


def _run_chain(args):
    config, data, priors, constraints, chain = args
    sampler = GibbsSampler(config, data, priors, constraints, chain)
    try:
        out = sampler.run()
    finally:
        sampler.close()
    out.final_state = None
    return out


def run(
    config: SamplerConfig,
    data: CalibrationData,
    priors: dict[int, PriorSpec] | None = None,
    constraints: Constraints | None = None,
    progress: Callable[[dict], None] | None = None,
    progress_every: int = 100,
    chain_processes: int = 1,
) -> list[PosteriorSamples]:
    """Run ``config.n_chains`` independent chains.

    With ``chain_processes > 1`` chains run in separate processes (no
    per-iteration progress events in that case).  Output is identical
    either way.
    """
    if chain_processes > 1 and config.n_chains > 1:
        jobs = [(config, data, priors, constraints, c) for c in range(config.n_chains)]
        with ProcessPoolExecutor(min(chain_processes, config.n_chains)) as ex:
            results = list(ex.map(_run_chain, jobs))
        if progress:
            for r in results:
                progress({"chain": r.chain, "iteration": r.n_iterations, "phase": 4, "done": True})
        return results
    results = []
    for c in range(config.n_chains):
        sampler = GibbsSampler(config, data, priors, constraints, c)
        try:
            results.append(sampler.run(progress, progress_every))
        finally:
            sampler.close()
        if progress:
            progress({"chain": c, "iteration": results[-1].n_iterations, "phase": 4, "done": True})
    return results
