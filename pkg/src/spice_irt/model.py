"""Domain types for persons, items, blocks and their sparse linkage."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ValidationError
from .families import ItemFamily, get_family

Side = Literal["person", "item"]


@dataclass(frozen=True)
class ResponseRecord:
    """One observed person-item interaction."""

    obs_index: int
    person_index: int
    item_index: int
    value: float
    weight: float = 1.0


@dataclass
class BlockSpec:
    """A subpopulation of persons or items sharing one latent regression.

    Parameters
    ----------
    block_id : int
        Identifier, unique across both sides.
    side : {"person", "item"}
    dim : int
        Length K of each member's latent vector.  For item blocks this is
        the family's parameter count.
    n_features : int
        Number of design columns p (including any intercept).
    unit_ids : array of int
        Dense unit indices of the members, in block order.
    family : ItemFamily, optional
        Item blocks only.
    person_dim : int
        Item blocks only: which person dimension the items measure.
    """

    block_id: int
    side: Side
    dim: int
    n_features: int
    unit_ids: NDArray[np.intp]
    family: ItemFamily | None = None
    person_dim: int = 0

    def __post_init__(self):
        self.unit_ids = np.asarray(self.unit_ids, dtype=np.intp)
        if self.side not in ("person", "item"):
            raise ValidationError(f"block {self.block_id}: side must be person or item")
        if self.dim < 1 or self.n_features < 1:
            raise ValidationError(f"block {self.block_id}: need dim >= 1 and n_features >= 1")
        if self.side == "item":
            if self.family is None:
                raise ValidationError(f"item block {self.block_id} needs a family")
            self.family = get_family(self.family)
            if self.dim != self.family.param_count:
                raise ValidationError(
                    f"item block {self.block_id}: dim {self.dim} != "
                    f"{self.family.tag} parameter count {self.family.param_count}"
                )

    @property
    def size(self) -> int:
        return len(self.unit_ids)


@dataclass
class Unit:
    """Snapshot of one person or item."""

    unit_id: int
    block_id: int
    latent: NDArray[np.float64]
    features: NDArray[np.float64]
    fixed: bool = False
    weight: float = 1.0


@dataclass
class ResponseData:
    """Column-oriented response table with dense indices."""

    person: NDArray[np.intp]
    item: NDArray[np.intp]
    value: NDArray[np.float64]
    n_persons: int
    n_items: int
    person_weight: NDArray[np.float64] = None

    def __post_init__(self):
        self.person = np.asarray(self.person, dtype=np.intp)
        self.item = np.asarray(self.item, dtype=np.intp)
        self.value = np.asarray(self.value, dtype=float)
        if self.person_weight is None:
            self.person_weight = np.ones(self.n_persons)
        self.person_weight = np.asarray(self.person_weight, dtype=float)

    @property
    def n_obs(self) -> int:
        return len(self.value)

    @classmethod
    def from_records(
        cls,
        records: Sequence[ResponseRecord],
        n_persons: int | None = None,
        n_items: int | None = None,
    ) -> "ResponseData":
        person = np.array([r.person_index for r in records], dtype=np.intp)
        item = np.array([r.item_index for r in records], dtype=np.intp)
        value = np.array([r.value for r in records], dtype=float)
        n_persons = int(person.max()) + 1 if n_persons is None else n_persons
        n_items = int(item.max()) + 1 if n_items is None else n_items
        w = np.ones(n_persons)
        for r in records:
            w[r.person_index] = r.weight
        return cls(person, item, value, n_persons, n_items, w)

    def records(self) -> list[ResponseRecord]:
        return [
            ResponseRecord(n, int(p), int(j), float(v), float(self.person_weight[p]))
            for n, (p, j, v) in enumerate(zip(self.person, self.item, self.value))
        ]


@dataclass
class LinkSegment:
    """Responses linking the units of one block to the units of one partner block.

    All arrays have one entry per response and are ordered by ``local``
    (the unit's position within its own block), then by observation index.
    """

    partner_block: int
    obs: NDArray[np.intp]
    local: NDArray[np.intp]
    partner_local: NDArray[np.intp]
    partner_unit: NDArray[np.intp]

    def slice_units(self, start: int, stop: int) -> slice:
        lo, hi = np.searchsorted(self.local, [start, stop])
        return slice(int(lo), int(hi))


@dataclass
class BlockView:
    block_id: int
    side: Side
    segments: list[LinkSegment] = field(default_factory=list)


@dataclass
class LinkageIndex:
    """Bidirectional sparse views of the person-item-response linkage.

    ``person_ptr``/``person_obs`` (and the item analogues) are CSR arrays:
    the responses of person ``i`` are ``person_obs[person_ptr[i]:person_ptr[i+1]]``.
    ``blocks`` holds, for every block, its responses grouped by partner
    block.
    """

    n_obs: int
    person_ptr: NDArray[np.intp]
    person_obs: NDArray[np.intp]
    item_ptr: NDArray[np.intp]
    item_obs: NDArray[np.intp]
    blocks: dict[int, BlockView]
    person_block: NDArray[np.intp]
    item_block: NDArray[np.intp]
    person_local: NDArray[np.intp]
    item_local: NDArray[np.intp]

    def person_responses(self, i: int) -> NDArray[np.intp]:
        return self.person_obs[self.person_ptr[i] : self.person_ptr[i + 1]]

    def item_responses(self, j: int) -> NDArray[np.intp]:
        return self.item_obs[self.item_ptr[j] : self.item_ptr[j + 1]]

    def triples(self, block_id: int, local: int) -> list[tuple[int, int, int]]:
        """(obs_index, partner_block, partner_unit) for one unit of a block."""
        out = []
        for seg in self.blocks[block_id].segments:
            sl = seg.slice_units(local, local + 1)
            out.extend(
                (int(n), seg.partner_block, int(u))
                for n, u in zip(seg.obs[sl], seg.partner_unit[sl])
            )
        return sorted(out)


def _csr(keys: NDArray[np.intp], n: int):
    order = np.argsort(keys, kind="stable").astype(np.intp)
    counts = np.bincount(keys, minlength=n)
    ptr = np.zeros(n + 1, dtype=np.intp)
    np.cumsum(counts, out=ptr[1:])
    return ptr, order


def _membership(blocks, side, n_units):
    owner = np.full(n_units, -1, dtype=np.intp)
    local = np.full(n_units, -1, dtype=np.intp)
    for b in blocks:
        if b.side != side:
            continue
        ids = b.unit_ids
        if np.any((ids < 0) | (ids >= n_units)):
            raise ValidationError(f"block {b.block_id} refers to unknown {side} units")
        if np.any(owner[ids] >= 0):
            raise ValidationError(f"{side} units belong to more than one block")
        owner[ids] = b.block_id
        local[ids] = np.arange(len(ids))
    missing = np.flatnonzero(owner < 0)
    if missing.size:
        raise ValidationError(
            f"{missing.size} {side}(s) belong to no block, e.g. index {int(missing[0])}"
        )
    return owner, local


def build_linkage(
    responses: ResponseData | Sequence[ResponseRecord],
    blocks: Sequence[BlockSpec],
) -> LinkageIndex:
    """Index responses by person, by item and by block pair.

    Raises
    ------
    ValidationError
        If there are no responses, an index is dangling, or the blocks do
        not partition each side.
    """
    if not isinstance(responses, ResponseData):
        if len(responses) == 0:
            raise ValidationError("response set is empty")
        n_p = 1 + max(
            [r.person_index for r in responses]
            + [int(u) for b in blocks if b.side == "person" for u in b.unit_ids]
        )
        n_i = 1 + max(
            [r.item_index for r in responses]
            + [int(u) for b in blocks if b.side == "item" for u in b.unit_ids]
        )
        responses = ResponseData.from_records(responses, n_p, n_i)
    data = responses
    if data.n_obs == 0:
        raise ValidationError("response set is empty")
    bad = np.flatnonzero(
        (data.person < 0)
        | (data.person >= data.n_persons)
        | (data.item < 0)
        | (data.item >= data.n_items)
    )
    if bad.size:
        raise ValidationError(
            f"dangling person/item index in rows {bad[:20].tolist()}", rows=bad.tolist()
        )
    person_block, person_local = _membership(blocks, "person", data.n_persons)
    item_block, item_local = _membership(blocks, "item", data.n_items)
    dims = {b.dim for b in blocks if b.side == "person"}
    if len(dims) > 1:
        raise ValidationError("all person blocks must share the same dimension")

    person_ptr, person_obs = _csr(data.person, data.n_persons)
    item_ptr, item_obs = _csr(data.item, data.n_items)

    views: dict[int, BlockView] = {}
    for b in blocks:
        own_block = person_block if b.side == "person" else item_block
        own_local = person_local if b.side == "person" else item_local
        own_units = data.person if b.side == "person" else data.item
        other_block = item_block if b.side == "person" else person_block
        other_local = item_local if b.side == "person" else person_local
        other_units = data.item if b.side == "person" else data.person
        view = BlockView(b.block_id, b.side)
        mine = np.flatnonzero(own_block[own_units] == b.block_id)
        partners = other_block[other_units[mine]]
        for pb in sorted(set(partners.tolist())):
            obs = mine[partners == pb]
            loc = own_local[own_units[obs]]
            order = np.lexsort((obs, loc))
            obs = obs[order]
            view.segments.append(
                LinkSegment(
                    partner_block=int(pb),
                    obs=obs.astype(np.intp),
                    local=loc[order].astype(np.intp),
                    partner_local=other_local[other_units[obs]].astype(np.intp),
                    partner_unit=other_units[obs].astype(np.intp),
                )
            )
        views[b.block_id] = view

    return LinkageIndex(
        n_obs=data.n_obs,
        person_ptr=person_ptr,
        person_obs=person_obs,
        item_ptr=item_ptr,
        item_obs=item_obs,
        blocks=views,
        person_block=person_block,
        item_block=item_block,
        person_local=person_local,
        item_local=item_local,
    )
