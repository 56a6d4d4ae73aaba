"""Synthetic data from the full generative model, for recovery studies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ValidationError
from .families import ItemFamily, get_family
from .model import BlockSpec, ResponseData
from .regression import BlockDesign, corr_pairs
from .sampler import CalibrationData, normalize_weights


@dataclass
class SimBlock:
    """One simulated block.

    ``B`` has one row per design column: the intercept (when ``intercept``)
    followed by ``n_features`` standard-normal features.  For item blocks
    the latent scale is the family's unconstrained scale.
    """

    side: str
    size: int
    B: NDArray
    S: NDArray
    R: NDArray | None = None
    family: str | ItemFamily | None = None
    n_features: int = 0
    intercept: bool = True
    person_dim: int = 0
    features: NDArray | None = None

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.S = np.atleast_1d(np.asarray(self.S, dtype=float))
        K = self.S.size
        self.R = np.eye(K) if self.R is None else np.asarray(self.R, dtype=float)
        if self.family is not None:
            self.family = get_family(self.family)
        p = self.n_features + int(self.intercept)
        if self.B.shape != (p, K):
            raise ValidationError(f"B must be {p}x{K}, got {self.B.shape}")
        if np.any(self.S < 0):
            raise ValidationError("S must be nonnegative")
        if np.linalg.eigvalsh(self.R).min() <= 0 or not np.allclose(np.diag(self.R), 1):
            raise ValidationError("R must be a positive-definite correlation matrix")
        if self.side == "item" and (self.family is None or self.family.param_count != K):
            raise ValidationError("item blocks need a family whose parameter count equals K")

    @property
    def K(self) -> int:
        return self.S.size


@dataclass
class SimSpec:
    """Blocks, sparsity and exposure of a simulated data set.

    responses_per_person : items assigned to every person, without
        replacement from the whole bank
    zipf_exponent : when set, item exposure probabilities are proportional to
        rank**(-zipf_exponent) instead of uniform
    weight_sd : log-sd of lognormal person weights (0 gives unit weights)
    """

    blocks: list[SimBlock]
    responses_per_person: int
    zipf_exponent: float | None = None
    weight_sd: float = 0.0
    seed: int = 0


@dataclass
class SimResult:
    data: CalibrationData
    truth: dict[str, float]
    latents: dict[int, NDArray]
    features: dict[int, NDArray]
    person_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)


def _design(block: SimBlock, rng):
    if block.features is not None:
        F = np.asarray(block.features, dtype=float).reshape(block.size, block.n_features)
    else:
        F = rng.standard_normal((block.size, block.n_features))
    X = np.hstack([np.ones((block.size, 1)), F]) if block.intercept else F
    return F, X


def generate(spec: SimSpec, rng: np.random.Generator | None = None) -> SimResult:
    """Draw latents through the block regressions, then sparse responses.

    Block ids are assigned in order, person blocks first.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    persons = [b for b in spec.blocks if b.side == "person"]
    items = [b for b in spec.blocks if b.side == "item"]
    if not persons or not items:
        raise ValidationError("need at least one person block and one item block")
    if len({b.K for b in persons}) != 1:
        raise ValidationError("person blocks must share K")
    n_persons = sum(b.size for b in persons)
    n_items = sum(b.size for b in items)
    t = spec.responses_per_person
    if not 1 <= t <= n_items:
        raise ValidationError(f"cannot give each person {t} distinct items out of {n_items}")

    blocks, designs, latents, feats, truth = [], {}, {}, {}, {}
    offsets = {"person": 0, "item": 0}
    theta = np.zeros((n_persons, persons[0].K))
    psi_nat = {}
    item_block_of = np.zeros(n_items, dtype=np.intp)
    item_local = np.zeros(n_items, dtype=np.intp)
    for bid, sb in enumerate(persons + items):
        F, X = _design(sb, rng)
        L = np.linalg.cholesky(sb.R)
        eps = rng.standard_normal((sb.size, sb.K)) @ (sb.S[:, None] * L).T
        U = X @ sb.B + eps
        start = offsets[sb.side]
        ids = np.arange(start, start + sb.size)
        offsets[sb.side] += sb.size
        blocks.append(
            BlockSpec(bid, sb.side, sb.K, X.shape[1], ids, family=sb.family, person_dim=sb.person_dim)
        )
        designs[bid] = BlockDesign(X)
        latents[bid] = U
        feats[bid] = F
        for r in range(sb.B.shape[0]):
            for c in range(sb.K):
                truth[f"block{bid}.B[{r},{c}]"] = float(sb.B[r, c])
        for k in range(sb.K):
            truth[f"block{bid}.S[{k}]"] = float(sb.S[k])
        for i, j in corr_pairs(sb.K):
            truth[f"block{bid}.R[{i},{j}]"] = float(sb.R[i, j])
        if sb.side == "person":
            theta[ids] = U
            for u, i in enumerate(ids):
                for k in range(sb.K):
                    truth[f"person{i}.dim{k}"] = float(U[u, k])
        else:
            nat = sb.family.to_natural(U)
            psi_nat[bid] = nat
            item_block_of[ids] = bid
            item_local[ids] = np.arange(sb.size)
            for u, j in enumerate(ids):
                for nm, v in zip(sb.family.param_names, nat[u]):
                    truth[f"item{j}.{nm}"] = float(v)

    if spec.zipf_exponent:
        ranks = rng.permutation(n_items) + 1.0
        prob = ranks ** (-spec.zipf_exponent)
        prob /= prob.sum()
        assigned = np.stack([rng.choice(n_items, t, replace=False, p=prob) for _ in range(n_persons)])
    else:
        assigned = np.argsort(rng.random((n_persons, n_items)), axis=1)[:, :t]
    person = np.repeat(np.arange(n_persons), t)
    item = assigned.ravel()
    value = np.empty(person.size)
    for sb, b in zip(items, [b for b in blocks if b.side == "item"]):
        mask = item_block_of[item] == b.block_id
        psi = psi_nat[b.block_id][item_local[item[mask]]]
        value[mask] = sb.family.simulate(psi, theta[person[mask], sb.person_dim], rng)

    weights = np.ones(n_persons)
    if spec.weight_sd > 0:
        weights = normalize_weights(np.exp(spec.weight_sd * rng.standard_normal(n_persons)))
        for b in blocks:
            if b.side == "person":
                designs[b.block_id] = BlockDesign(designs[b.block_id].X0, weights[b.unit_ids])
    responses = ResponseData(person, item, value, n_persons, n_items, weights)
    data = CalibrationData(responses, blocks, designs)
    return SimResult(
        data=data,
        truth=truth,
        latents=latents,
        features=feats,
        person_ids=[f"p{i}" for i in range(n_persons)],
        item_ids=[f"i{j}" for j in range(n_items)],
    )
