"""Planted-structure fixture: items belong to latent groups that the KG exposes
through attribute entities, and each user prefers one group."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kg import InteractionSet, KnowledgeGraph, save_kg


@dataclass(frozen=True)
class SynthSpec:
    num_users: int = 200
    num_items: int = 100
    num_entities: int = 300
    num_relations: int = 2
    num_groups: int = 4
    attrs_per_group: int = 10
    attr_links: int = 5  # item -> attribute edges
    noise_links: int = 2  # item -> noise entity edges
    attr_noise: float = 0.05  # chance an attribute edge points to a random attribute
    positives_per_user: int = 15
    pref_noise: float = 0.05  # chance a click falls outside the user's group

    def validate(self) -> None:
        if self.num_users < 2 or self.num_items < 4 or self.num_relations < 1:
            raise ValueError("degenerate spec: need >= 2 users, >= 4 items, >= 1 relation")
        if self.num_groups < 2 or self.num_items < 2 * self.num_groups:
            raise ValueError("degenerate spec: need >= 2 groups with >= 2 items each")
        layout = self.num_items + self.num_groups * (1 + self.attrs_per_group)
        if self.num_entities <= layout and (self.noise_links or self.num_entities < layout):
            raise ValueError(f"degenerate spec: {self.num_entities} entities cannot hold the layout ({layout} + noise)")
        if not 1 <= self.attr_links <= self.attrs_per_group:
            raise ValueError("attr_links must be in [1, attrs_per_group]")
        if not 1 <= self.positives_per_user <= self.num_items // self.num_groups:
            raise ValueError("positives_per_user must fit inside one group")


@dataclass(frozen=True)
class SynthDataset:
    kg: KnowledgeGraph
    interactions: InteractionSet
    item_group: np.ndarray
    user_group: np.ndarray
    attr_group: np.ndarray  # group of each attribute entity, indexed from attr_offset
    attr_offset: int


def synth_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0) -> SynthDataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    I, G, A = spec.num_items, spec.num_groups, spec.num_groups * spec.attrs_per_group
    group_off, attr_off, noise_off = I, I + G, I + G + A
    noise = np.arange(noise_off, spec.num_entities)
    r_attr, r_link = 0, min(1, spec.num_relations - 1)

    item_group = rng.permutation(np.arange(I) % G)
    attr_group = np.arange(A) % G
    items_in = [np.flatnonzero(item_group == g) for g in range(G)]
    attrs_in = [attr_off + np.flatnonzero(attr_group == g) for g in range(G)]

    triples = []
    for i in range(I):
        own = attrs_in[item_group[i]]
        picks = set()
        while len(picks) < spec.attr_links:
            pool = own if rng.random() >= spec.attr_noise else attr_off + np.arange(A)
            picks.add(int(rng.choice(pool)))
        triples += [(i, r_attr, a) for a in sorted(picks)]
        if len(noise):
            triples += [(i, r_link, int(n)) for n in rng.choice(noise, size=spec.noise_links)]
    for a in range(A):
        g = attr_group[a]
        triples.append((attr_off + a, r_link, group_off + g))
        triples.append((attr_off + a, r_attr, int(rng.choice(items_in[g]))))
    for g in range(G):
        triples += [(group_off + g, r_attr, int(a)) for a in attrs_in[g]]
    for n in noise:
        for _ in range(2):
            triples.append((int(n), int(rng.integers(spec.num_relations)), int(rng.choice(noise))))
    kg = KnowledgeGraph.from_triples(triples, spec.num_entities, spec.num_relations)

    user_group = rng.permutation(np.arange(spec.num_users) % G)
    positives = {}
    for u in range(spec.num_users):
        own = items_in[user_group[u]]
        clicks = set()
        while len(clicks) < spec.positives_per_user:
            pool = own if rng.random() >= spec.pref_noise else np.arange(I)
            clicks.add(int(rng.choice(pool)))
        positives[u] = frozenset(clicks)
    inter = InteractionSet(spec.num_users, I, positives, np.arange(I, dtype=np.int64))
    return SynthDataset(kg, inter, item_group, user_group, attr_group, attr_off)


def write_dataset(ds: SynthDataset, out_dir) -> dict:
    """Write kg.txt, ratings.txt and item_map.txt; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"kg": out / "kg.txt", "ratings": out / "ratings.txt", "item_map": out / "item_map.txt"}
    save_kg(ds.kg, paths["kg"])
    with open(paths["ratings"], "w", encoding="utf-8") as fh:
        for u, v in ds.interactions.pairs():
            fh.write(f"{u} {v} 1\n")
    with open(paths["item_map"], "w", encoding="utf-8") as fh:
        for item, ent in enumerate(ds.interactions.item_to_entity.tolist()):
            fh.write(f"{item} {ent}\n")
    return paths
