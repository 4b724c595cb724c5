"""Fixed-size neighbor tables and per-user preference sets.

All randomness comes from a counter-based splitmix64 hash of (seed, row, slot),
so every row is an independent stream and the tables are pure functions of the
seed and the graph.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .kg import DataError, InteractionSet, KnowledgeGraph

MASK64 = (1 << 64) - 1
_NEIGHBOR_SALT = 0x6E6569676862
_PREF_SALT = 0x707265666572
_FORMAT_VERSION = 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _mix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def _uniform(seed: int, salt: int, rows: np.ndarray, slots: int, extra: int = 0) -> np.ndarray:
    """[len(rows), slots] uniforms in [0, 1), one independent stream per row."""
    base = np.uint64(splitmix64((splitmix64(seed & MASK64) ^ salt ^ (extra * 0x9E37)) & MASK64))
    with np.errstate(over="ignore"):
        row_keys = _mix(rows.astype(np.uint64) + base)
        h = _mix(row_keys[:, None] + np.arange(slots, dtype=np.uint64)[None, :])
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def resample(prev_seed: int, stage: int) -> int:
    """Seed for a training stage, a stable mix of the base seed and stage index."""
    if stage < 1:
        raise ValueError("stage must be >= 1")
    return splitmix64((splitmix64(prev_seed & MASK64) + stage) & MASK64)


def self_loop_relation(kg: KnowledgeGraph) -> int:
    """Reserved relation id used for the self-loop of an entity without out-edges."""
    return kg.num_relations


@dataclass(frozen=True)
class NeighborTable:
    k_n: int
    relations: np.ndarray  # [num_entities, k_n]
    entities: np.ndarray  # [num_entities, k_n]
    seed: int

    @property
    def num_entities(self) -> int:
        return self.relations.shape[0]

    def row(self, entity: int) -> list[tuple[int, int]]:
        return list(zip(self.relations[entity].tolist(), self.entities[entity].tolist()))

    def to_bytes(self) -> bytes:
        head = struct.pack("<4sIIQQ", b"MVNT", _FORMAT_VERSION, self.k_n, self.num_entities, self.seed & MASK64)
        return head + self.relations.astype("<i8").tobytes() + self.entities.astype("<i8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "NeighborTable":
        magic, version, k, n, seed = struct.unpack_from("<4sIIQQ", data)
        if magic != b"MVNT" or version != _FORMAT_VERSION:
            raise DataError("not a neighbor table checkpoint")
        off = struct.calcsize("<4sIIQQ")
        arr = np.frombuffer(data, dtype="<i8", offset=off).astype(np.int64)
        return cls(k, arr[: n * k].reshape(n, k), arr[n * k:].reshape(n, k), seed)


def sample_neighbors(kg: KnowledgeGraph, k_n: int, seed: int, strict: bool = False) -> NeighborTable:
    """Draw ``k_n`` (relation, neighbor) pairs per entity, uniformly with replacement.

    Entities without outgoing triples get a self-loop on the reserved relation,
    or raise when ``strict``.
    """
    if k_n < 1:
        raise ValueError("k_n must be >= 1")
    ents = np.arange(kg.num_entities, dtype=np.int64)
    deg = np.diff(kg.offsets)
    dangling = deg == 0
    if strict and dangling.any():
        raise DataError(f"entity {int(np.flatnonzero(dangling)[0])} has no neighbors")
    u = _uniform(seed, _NEIGHBOR_SALT, ents, k_n)
    pick = np.minimum((u * np.maximum(deg, 1)[:, None]).astype(np.int64), np.maximum(deg - 1, 0)[:, None])
    pos = kg.offsets[:-1, None] + pick
    if kg.num_triples:
        pos = np.minimum(pos, kg.num_triples - 1)
        rel = kg.adj_relation[pos]
        tail = kg.adj_tail[pos]
    else:
        rel = np.zeros((kg.num_entities, k_n), np.int64)
        tail = np.zeros((kg.num_entities, k_n), np.int64)
    rel[dangling] = self_loop_relation(kg)
    tail[dangling] = ents[dangling, None]
    return NeighborTable(k_n, rel, tail, seed)


@dataclass(frozen=True)
class PreferenceSets:
    k_m: int
    heads: np.ndarray  # [num_users, hops, k_m]
    relations: np.ndarray
    tails: np.ndarray
    seed: int

    @property
    def hops(self) -> int:
        return self.heads.shape[1]

    @property
    def num_users(self) -> int:
        return self.heads.shape[0]

    def triples(self, user: int, hop: int) -> list[tuple[int, int, int]]:
        """Triples of preference hop ``hop`` (1-based) for ``user``."""
        i = hop - 1
        return list(zip(self.heads[user, i].tolist(), self.relations[user, i].tolist(), self.tails[user, i].tolist()))

    def to_bytes(self) -> bytes:
        head = struct.pack("<4sIIIQQ", b"MVPS", _FORMAT_VERSION, self.k_m, self.hops, self.num_users, self.seed & MASK64)
        body = b"".join(a.astype("<i8").tobytes() for a in (self.heads, self.relations, self.tails))
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "PreferenceSets":
        magic, version, k, hops, n, seed = struct.unpack_from("<4sIIIQQ", data)
        if magic != b"MVPS" or version != _FORMAT_VERSION:
            raise DataError("not a preference set checkpoint")
        off = struct.calcsize("<4sIIIQQ")
        arr = np.frombuffer(data, dtype="<i8", offset=off).astype(np.int64).reshape(3, n, hops, k)
        return cls(k, arr[0], arr[1], arr[2], seed)


def _candidate_positions(kg: KnowledgeGraph, heads: np.ndarray) -> np.ndarray:
    heads = np.unique(heads)
    lo, hi = kg.offsets[heads], kg.offsets[heads + 1]
    if not (hi > lo).any():
        return np.empty(0, dtype=np.int64)
    return np.concatenate([np.arange(a, b) for a, b in zip(lo, hi) if b > a])


def build_preference_sets(kg: KnowledgeGraph, train: InteractionSet, l_p: int, k_m: int, seed: int) -> PreferenceSets:
    """Sample ``k_m`` triples per user and hop, starting from the clicked items.

    At least one hop is always built because the hop-0 response reads the heads
    of hop 1. A hop whose frontier has no outgoing triples is resampled from the
    previous hop's triples; if even hop 1 is empty the clicked items get
    reserved-relation self-loops.
    """
    if l_p < 0 or k_m < 1:
        raise ValueError("need l_p >= 0 and k_m >= 1")
    hops = max(l_p, 1)
    n = train.num_users
    heads = np.zeros((n, hops, k_m), np.int64)
    rels = np.zeros_like(heads)
    tails = np.zeros_like(heads)
    loop_rel = self_loop_relation(kg)
    for user in range(n):
        items = sorted(train.items_of(user))
        if not items:
            raise DataError(f"user {user} has no training positives")
        u = _uniform(seed, _PREF_SALT, np.array([user]), hops * k_m)[0].reshape(hops, k_m)
        frontier = train.item_to_entity[items]
        prev = None
        for p in range(hops):
            cand = _candidate_positions(kg, frontier)
            if len(cand):
                pick = cand[np.minimum((u[p] * len(cand)).astype(np.int64), len(cand) - 1)]
                h, r, t = kg.triples[pick].T
            elif prev is not None:
                pick = np.minimum((u[p] * k_m).astype(np.int64), k_m - 1)
                h, r, t = (x[pick] for x in prev)
            else:
                ents = np.unique(frontier)
                pick = ents[np.minimum((u[p] * len(ents)).astype(np.int64), len(ents) - 1)]
                h, r, t = pick, np.full(k_m, loop_rel), pick
            heads[user, p], rels[user, p], tails[user, p] = h, r, t
            prev = (h, r, t)
            frontier = t
    return PreferenceSets(k_m, heads, rels, tails, seed)
