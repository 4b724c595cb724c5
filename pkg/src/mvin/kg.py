"""Knowledge graph and interaction data: loading, preprocessing, splitting, stats."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class KnowledgeGraph:
    num_entities: int
    num_relations: int
    triples: np.ndarray  # [T, 3] int64, unique, sorted by (h, r, t)
    offsets: np.ndarray = field(repr=False)  # CSR row pointers keyed by head
    adj_relation: np.ndarray = field(repr=False)
    adj_tail: np.ndarray = field(repr=False)

    @classmethod
    def from_triples(cls, triples, num_entities=None, num_relations=None) -> "KnowledgeGraph":
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if arr.size:
            arr = np.unique(arr, axis=0)
        if (arr < 0).any():
            raise DataError("negative id in triples")
        max_ent = int(max(arr[:, 0].max(), arr[:, 2].max())) + 1 if arr.size else 0
        max_rel = int(arr[:, 1].max()) + 1 if arr.size else 0
        num_entities = max_ent if num_entities is None else num_entities
        num_relations = max_rel if num_relations is None else num_relations
        if max_ent > num_entities or max_rel > num_relations:
            raise DataError(
                f"id overflow: triples need {max_ent} entities / {max_rel} relations, "
                f"got {num_entities} / {num_relations}"
            )
        counts = np.bincount(arr[:, 0], minlength=num_entities) if arr.size else np.zeros(num_entities, np.int64)
        offsets = np.zeros(num_entities + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        # np.unique sorts lexicographically, so rows are already grouped by head
        return cls(num_entities, num_relations, arr, offsets, arr[:, 1].copy(), arr[:, 2].copy())

    @property
    def num_triples(self) -> int:
        return len(self.triples)

    def degree(self, entity: int) -> int:
        return int(self.offsets[entity + 1] - self.offsets[entity])

    def neighbors(self, entity: int) -> list[tuple[int, int]]:
        lo, hi = self.offsets[entity], self.offsets[entity + 1]
        return list(zip(self.adj_relation[lo:hi].tolist(), self.adj_tail[lo:hi].tolist()))

    @property
    def adjacency(self) -> dict[int, list[tuple[int, int]]]:
        return {e: self.neighbors(e) for e in range(self.num_entities) if self.degree(e)}


@dataclass(frozen=True)
class InteractionSet:
    num_users: int
    num_items: int
    positives: Mapping[int, frozenset]
    item_to_entity: np.ndarray

    def __post_init__(self):
        if len(self.item_to_entity) != self.num_items:
            raise DataError("item_to_entity must have one entry per item")
        for u, items in self.positives.items():
            if not 0 <= u < self.num_users:
                raise DataError(f"user id {u} out of range")
            for v in items:
                if not 0 <= v < self.num_items:
                    raise DataError(f"item id {v} out of range for user {u}")

    def items_of(self, user: int) -> frozenset:
        return self.positives.get(user, frozenset())

    @property
    def num_interactions(self) -> int:
        return sum(len(v) for v in self.positives.values())

    def pairs(self) -> list[tuple[int, int]]:
        return [(u, v) for u in sorted(self.positives) for v in sorted(self.positives[u])]

    def with_positives(self, positives: Mapping[int, Iterable[int]]) -> "InteractionSet":
        pos = {u: frozenset(v) for u, v in positives.items() if len(v)}
        return InteractionSet(self.num_users, self.num_items, pos, self.item_to_entity)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    valid_fraction: float = 0.2
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_fraction, self.valid_fraction, self.test_fraction)
        if any(f <= 0 for f in fracs):
            raise ValueError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")


def _read_int_rows(path, min_cols, max_cols, kind, sep=None):
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = (line.replace(sep, " ") if sep else line).split()
            if not parts:
                continue
            if not min_cols <= len(parts) <= max_cols:
                want = min_cols if min_cols == max_cols else f"{min_cols}-{max_cols}"
                raise DataError(f"{path}:{lineno}: expected {want} fields in {kind} line, got {len(parts)}")
            try:
                rows.append([int(parts[0]), int(parts[1])] + [float(p) for p in parts[2:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: cannot parse {kind} line {line.strip()!r}") from exc
    return rows


def load_kg(path, num_entities=None, num_relations=None) -> KnowledgeGraph:
    """Read "head relation tail" lines into a deduplicated, indexed graph."""
    path = Path(path)
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 ids, got {len(parts)}")
            try:
                triples.append([int(p) for p in parts])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer id in {line.strip()!r}") from exc
    if not triples:
        raise DataError(f"{path}: empty knowledge graph file")
    try:
        return KnowledgeGraph.from_triples(triples, num_entities, num_relations)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def save_kg(kg: KnowledgeGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.triples.tolist():
            fh.write(f"{h} {r} {t}\n")


def load_ratings(path) -> list[tuple[int, int, float]]:
    """Read "user item [rating [timestamp]]" lines, whitespace or "::" separated.

    A missing rating counts as 1; timestamps are ignored.
    """
    rows = _read_int_rows(path, 2, 4, "rating", sep="::")
    return [(r[0], r[1], r[2] if len(r) >= 3 else 1.0) for r in rows]


def load_item_map(path) -> dict[int, int]:
    rows = _read_int_rows(path, 2, 2, "item map")
    out = {}
    for item, ent in rows:
        if item in out and out[item] != ent:
            raise DataError(f"{path}: item {item} maps to two entities")
        out[item] = ent
    return out


def binarize_ratings(raw, threshold) -> list[tuple[int, int]]:
    """Keep (user, item) where rating >= threshold; the rest are unobserved."""
    return [(u, v) for u, v, r in raw if r >= threshold]


def g_core_filter(pairs, g: int) -> list[tuple[int, int]]:
    """Largest subset where every user and every item has at least ``g`` interactions."""
    if g < 1:
        raise ValueError("g must be >= 1")
    current = list(dict.fromkeys(pairs))
    while True:
        users = Counter(u for u, _ in current)
        items = Counter(v for _, v in current)
        kept = [(u, v) for u, v in current if users[u] >= g and items[v] >= g]
        if len(kept) == len(current):
            return kept
        current = kept


def build_interactions(pairs, item_to_entity: Mapping[int, int], num_entities=None):
    """Reindex users and items densely (ascending raw id) and build an InteractionSet.

    Pairs whose item has no entity mapping are dropped. Returns the set together
    with the raw user and item ids indexed by the new ids.
    """
    pairs = list(dict.fromkeys(pairs))
    mapped = [(u, v) for u, v in pairs if v in item_to_entity]
    if len(mapped) < len(pairs):
        logger.info("dropped %d interactions on items without a KG entity", len(pairs) - len(mapped))
    raw_users = sorted({u for u, _ in mapped})
    raw_items = sorted({v for _, v in mapped})
    uidx = {u: i for i, u in enumerate(raw_users)}
    vidx = {v: i for i, v in enumerate(raw_items)}
    positives: dict[int, set] = {}
    for u, v in mapped:
        positives.setdefault(uidx[u], set()).add(vidx[v])
    ents = np.array([item_to_entity[v] for v in raw_items], dtype=np.int64)
    if num_entities is not None and len(ents) and ents.max() >= num_entities:
        raise DataError(f"item maps to entity {int(ents.max())} outside the KG ({num_entities} entities)")
    inter = InteractionSet(
        len(raw_users), len(raw_items), {u: frozenset(s) for u, s in positives.items()}, ents
    )
    return inter, np.array(raw_users, dtype=np.int64), np.array(raw_items, dtype=np.int64)


def _stochastic_round(x: float, rng) -> int:
    base = math.floor(x + 1e-9)
    frac = x - base
    return base + int(frac > 1e-9 and rng.random() < frac)


def split_interactions(inter: InteractionSet, spec: SplitSpec):
    """Per-user random train/valid/test partition.

    Users with fewer than 3 positives go entirely to train.
    """
    train, valid, test = {}, {}, {}
    for u in sorted(inter.positives):
        items = np.array(sorted(inter.positives[u]), dtype=np.int64)
        n = len(items)
        if n < 3:
            train[u] = items
            continue
        rng = np.random.default_rng([spec.seed, u])
        items = rng.permutation(items)
        # stochastic rounding keeps the expected split proportions exact
        n_valid = max(1, _stochastic_round(n * spec.valid_fraction, rng))
        n_test = max(1, _stochastic_round(n * spec.test_fraction, rng))
        if n_valid + n_test >= n:
            n_valid, n_test = 1, 1
        n_train = n - n_valid - n_test
        train[u] = items[:n_train]
        valid[u] = items[n_train:n_train + n_valid]
        test[u] = items[n_train + n_valid:]
    return inter.with_positives(train), inter.with_positives(valid), inter.with_positives(test)


@dataclass(frozen=True)
class StatsReport:
    users: int
    items: int
    interactions: int
    avg_clicks_per_user: float
    avg_clicks_per_item: float
    kg_entities: int
    kg_relations: int
    kg_triples: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    def write(self, text_path, json_path) -> None:
        Path(text_path).write_text(self.to_text(), encoding="utf-8")
        Path(json_path).write_text(json.dumps(self.as_dict(), indent=2) + "\n", encoding="utf-8")


def dataset_stats(kg: KnowledgeGraph, inter: InteractionSet) -> StatsReport:
    n = inter.num_interactions
    users = sum(1 for v in inter.positives.values() if v)
    items = len({v for s in inter.positives.values() for v in s})
    return StatsReport(
        users=users,
        items=items,
        interactions=n,
        avg_clicks_per_user=n / users if users else 0.0,
        avg_clicks_per_item=n / items if items else 0.0,
        kg_entities=kg.num_entities,
        kg_relations=kg.num_relations,
        kg_triples=kg.num_triples,
    )


def load_dataset(kg_path, ratings_path, item_map_path, rating_threshold=0.0, g_core=1):
    """Full ingestion: binarize, drop unmapped items, g-core filter, reindex.

    Binarization happens before g-core filtering.
    """
    kg = load_kg(kg_path)
    item_map = load_item_map(item_map_path)
    pairs = binarize_ratings(load_ratings(ratings_path), rating_threshold)
    pairs = [(u, v) for u, v in pairs if v in item_map]
    if g_core > 1:
        pairs = g_core_filter(pairs, g_core)
    inter, _, _ = build_interactions(pairs, item_map, kg.num_entities)
    return kg, inter
