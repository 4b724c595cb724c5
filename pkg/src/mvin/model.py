"""MVIN forward pass: KG-enhanced user vector, user-oriented projection and
relation attention, and the wide x deep mixing layer.

The graph-building helpers work on a minibatch of (user, item) pairs at once.
Single-example entry points wrap them with a batch of one.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .autodiff import ComputeGraph, Node
from .sampler import NeighborTable, PreferenceSets

ABLATION_NAMES = ("uo_e", "uo_r", "uo_k", "ml_w", "ml_d", "sw")
EMBEDDING_NAMES = ("entity_emb", "relation_vec", "relation_mat", "user_emb")


@dataclass(frozen=True)
class AblationFlags:
    uo_e: bool = True
    uo_r: bool = True
    uo_k: bool = True
    ml_w: bool = True
    ml_d: bool = True
    sw: bool = True

    def without(self, *names: str) -> "AblationFlags":
        for n in names:
            if n not in ABLATION_NAMES:
                raise ValueError(f"unknown ablation flag {n!r}; expected one of {ABLATION_NAMES}")
        return replace(self, **{n: False for n in names})


@dataclass(frozen=True)
class Hyperparams:
    s: int = 16
    l_p: int = 2
    l_w: int = 1
    l_d: int = 2
    k_m: int = 64
    k_n: int = 8
    projection_nonlinear: bool = True
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        for name in ("s", "l_w", "l_d", "k_m", "k_n"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.l_p < 0:
            raise ValueError("l_p must be >= 0")

    @property
    def depth(self) -> int:
        """Number of sampled hops in the item's receptive field."""
        return self.l_w * self.l_d if self.ablation.ml_d else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        d = dict(d)
        d["ablation"] = AblationFlags(**d.get("ablation", {}))
        return cls(**d)


@dataclass
class UserRepresentation:
    u: np.ndarray
    hop_responses: list
    attention_records: list  # (hop, (h, r, t), weight)


def param_shapes(hp: Hyperparams, num_entities: int, num_relations: int, num_users: int) -> dict:
    """Shapes of the trainable tensors for the active ablation.

    ``num_relations`` counts relation slots including the reserved self-loop id.
    """
    s, ab = hp.s, hp.ablation
    shapes = {"entity_emb": (num_entities, s)}
    attention = ab.uo_r and ab.ml_d
    if attention:
        shapes["relation_vec"] = (num_relations, s)
    if ab.uo_k and hp.l_p >= 1:
        shapes["relation_mat"] = (num_relations, s, s)
    if not ab.uo_k:
        shapes["user_emb"] = (num_users, s)
    if attention:
        shapes["W_r"] = (3 * s,)
        shapes["b_r"] = ()
    if ab.uo_e:
        shapes["W_e"] = (s, s)
        shapes["b_e"] = (s,)
    if ab.uo_k:
        shapes["W_a"] = (2 * s,)
        shapes["W_o"] = (s, (hp.l_p + 1) * s)
        shapes["b_o"] = (s,)
    if ab.ml_d:
        shapes["W_v"] = (s, s)
        shapes["b_v"] = (s,)
        if ab.ml_w:
            for w in range(hp.l_w):
                shapes[f"M_w{w}"] = (s, hp.l_d * s)
    return shapes


def count_parameters(shapes: dict) -> int:
    return sum(math.prod(shape) for shape in shapes.values())


def init_params(shapes: dict, seed: int) -> dict:
    """Embeddings U(-0.05, 0.05); weights Glorot-uniform; biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if name in EMBEDDING_NAMES:
            params[name] = rng.uniform(-0.05, 0.05, size=shape)
        elif name.startswith("b_"):
            params[name] = np.zeros(shape)
        else:
            fan_out, fan_in = (1, shape[0]) if len(shape) == 1 else shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# -- pure numpy single-vector ops ---------------------------------------------

def project_entity(e, u, params, hp: Hyperparams) -> np.ndarray:
    """User-oriented entity projection; identity when the component is ablated."""
    if not hp.ablation.uo_e:
        return np.asarray(e)
    z = params["W_e"] @ (np.asarray(e) + np.asarray(u)) + params["b_e"]
    return np.maximum(z, 0.0) if hp.projection_nonlinear else z


def relation_attention(u, r, v, params, hp: Hyperparams) -> float:
    """Unnormalised score of one neighbor relation; constant 0 when ablated."""
    if not hp.ablation.uo_r:
        return 0.0
    return float(params["W_r"] @ np.concatenate([u, r, v]) + params["b_r"])


# -- graph building -------------------------------------------------------------

@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    item_entities: np.ndarray
    pref_heads: np.ndarray  # [B, hops, k_m]
    pref_relations: np.ndarray
    pref_tails: np.ndarray
    field_entities: list  # level j: [B, k_n**j]
    field_relations: list  # level j >= 1: [B, k_n**j]; level 0 is None


class MVIN:
    def __init__(self, hp: Hyperparams, num_entities: int, num_relations: int, num_users: int, item_to_entity):
        self.hp = hp
        self.num_entities = num_entities
        self.num_relations = num_relations  # incl. reserved self-loop slot
        self.num_users = num_users
        self.item_to_entity = np.asarray(item_to_entity, dtype=np.int64)
        if len(self.item_to_entity) and not (0 <= self.item_to_entity.min() and self.item_to_entity.max() < num_entities):
            raise ValueError(f"item_to_entity points outside the {num_entities} entities")

    def param_shapes(self) -> dict:
        return param_shapes(self.hp, self.num_entities, self.num_relations, self.num_users)

    def init_params(self, seed: int) -> dict:
        return init_params(self.param_shapes(), seed)

    def check_params(self, params: dict) -> None:
        expected = self.param_shapes()
        if set(params) != set(expected):
            raise ValueError(f"parameter set mismatch: expected {sorted(expected)}, got {sorted(params)}")
        for name, shape in expected.items():
            if params[name].shape != tuple(shape):
                raise ValueError(f"tensor {name} has shape {params[name].shape}, expected {tuple(shape)}")

    # ---------------------------------------------------------------------

    def make_batch(self, users, items, prefs: Optional[PreferenceSets], nbrs: Optional[NeighborTable]) -> Batch:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ph = pr = pt = None
        if self.hp.ablation.uo_k:
            if prefs is None:
                raise ValueError("preference sets required for the KG-enhanced user vector")
            needed = max(self.hp.l_p, 1)
            if prefs.hops < needed or prefs.k_m != self.hp.k_m:
                raise ValueError(f"preference sets have {prefs.hops} hops x {prefs.k_m}, need {needed} x {self.hp.k_m}")
            ph, pr, pt = prefs.heads[users], prefs.relations[users], prefs.tails[users]
        levels, rels = self.receptive_field(items, nbrs)
        return Batch(users, items, self.item_to_entity[items], ph, pr, pt, levels, rels)

    def receptive_field(self, items, nbrs: Optional[NeighborTable]):
        """Sampled entity ids and relations per tree level, level 0 being the item."""
        items = np.asarray(items, dtype=np.int64)
        levels, rels = [self.item_to_entity[items][:, None]], [None]
        if self.hp.depth:
            if nbrs is None or nbrs.k_n != self.hp.k_n:
                raise ValueError("neighbor table with matching k_n required for the mixing layer")
            for _ in range(self.hp.depth):
                prev = levels[-1]
                levels.append(nbrs.entities[prev].reshape(len(items), -1))
                rels.append(nbrs.relations[prev].reshape(len(items), -1))
        return levels, rels

    def user_vector(self, g: ComputeGraph, P: dict, batch: Batch, v: Node, record=None, out=None) -> Node:
        """[B, s] user vectors; ``record``/``out`` collect attention weights and hop responses."""
        hp = self.hp
        if not hp.ablation.uo_k:
            return g.gather(P["user_emb"], batch.users)
        E = P["entity_emb"]
        k = hp.k_m
        v_rep = g.expand(v, 1, k)
        heads1 = g.gather(E, batch.pref_heads[:, 0])
        a = g.softmax(g.dot(g.concat([heads1, v_rep]), P["W_a"]))
        responses = [g.weighted_sum(a, heads1)]
        if record is not None:
            record.append(("preference", 0, batch.pref_heads[:, 0], batch.pref_relations[:, 0], batch.pref_tails[:, 0], a.value))
        for p in range(hp.l_p):
            h = heads1 if p == 0 else g.gather(E, batch.pref_heads[:, p])
            t = g.gather(E, batch.pref_tails[:, p])
            R = g.gather(P["relation_mat"], batch.pref_relations[:, p])
            weights = g.softmax(g.dot(g.matvec(R, h), v_rep))
            responses.append(g.weighted_sum(weights, t))
            if record is not None:
                record.append(("preference", p + 1, batch.pref_heads[:, p], batch.pref_relations[:, p], batch.pref_tails[:, p], weights.value))
        if out is not None:
            out.extend(responses)
        o = responses[0] if len(responses) == 1 else g.concat(responses)
        return g.add(g.matvec(P["W_o"], o), P["b_o"])

    def project(self, g: ComputeGraph, P: dict, e: Node, u: Node) -> Node:
        """Project [B, N, s] entity vectors onto the user's view."""
        if not self.hp.ablation.uo_e:
            return e
        z = g.add(g.matvec(P["W_e"], g.add(e, g.expand(u, 1, e.shape[1]))), P["b_e"])
        return g.relu(z) if self.hp.projection_nonlinear else z

    def neighbor_weights(self, g: ComputeGraph, P: dict, u: Node, heads: Node, relations: np.ndarray) -> Node:
        """Normalised attention of each head over its k_n sampled neighbors: [B, M, k_n]."""
        b, m = relations.shape[0], relations.shape[1]
        kn = relations.shape[2]
        if not self.hp.ablation.uo_r:
            return g.const(np.full((b, m, kn), 1.0 / kn))
        r = g.gather(P["relation_vec"], relations)
        uu = g.expand(g.expand(u, 1, m), 2, kn)
        hh = g.expand(heads, 2, kn)
        scores = g.add(g.dot(g.concat([uu, r, hh]), P["W_r"]), P["b_r"])
        return g.softmax(scores)

    def item_vector(self, g: ComputeGraph, P: dict, batch: Batch, u: Node, record=None) -> Node:
        hp = self.hp
        E = P["entity_emb"]
        b, kn, s = len(batch.users), hp.k_n, hp.s
        reps = [self.project(g, P, g.gather(E, lv), u) for lv in batch.field_entities]
        if not hp.ablation.ml_d:
            return g.reshape(reps[0], (b, s))
        step = 0
        for w in range(hp.l_w):
            block = []
            for _ in range(hp.l_d):
                step += 1
                nxt = []
                for j in range(len(reps) - 1):
                    heads = reps[j]
                    m = heads.shape[1]
                    rel = batch.field_relations[j + 1].reshape(b, m, kn)
                    weights = self.neighbor_weights(g, P, u, heads, rel)
                    children = g.reshape(reps[j + 1], (b, m, kn, s))
                    n = g.weighted_sum(weights, children)
                    agg = g.add(g.matvec(P["W_v"], g.add(heads, n)), P["b_v"])
                    nxt.append(g.relu(agg))
                    if record is not None:
                        record.append((
                            "neighbor", step, batch.field_entities[j], rel,
                            batch.field_entities[j + 1].reshape(b, m, kn), weights.value,
                        ))
                reps = nxt
                block.append(reps)
            if hp.ablation.ml_w:
                reps = [
                    g.matvec(P[f"M_w{w}"], g.concat([block[d][j] for d in range(hp.l_d)]))
                    for j in range(len(reps))
                ]
        return g.reshape(reps[0], (b, s))

    def build(self, g: ComputeGraph, P: dict, batch: Batch, record=None):
        """Click probabilities for the batch, plus the user and item vectors."""
        v = g.gather(P["entity_emb"], batch.item_entities)
        u = self.user_vector(g, P, batch, v, record)
        v2 = self.item_vector(g, P, batch, u, record)
        return g.sigmoid(g.dot(u, v2)), u, v2

    # -- inference ---------------------------------------------------------

    @staticmethod
    def _const_params(g: ComputeGraph, params: dict) -> dict:
        return {k: g.const(v) for k, v in params.items()}

    def predict(self, params, users, items, prefs, nbrs, batch_size: int = 1024) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        out = np.empty(len(users))
        for lo in range(0, len(users), batch_size):
            sl = slice(lo, lo + batch_size)
            g = ComputeGraph()
            probs, _, _ = self.build(g, self._const_params(g, params), self.make_batch(users[sl], items[sl], prefs, nbrs))
            out[sl] = probs.value
        return out

    def predict_one(self, params, user, item, prefs, nbrs) -> float:
        return float(self.predict(params, [user], [item], prefs, nbrs)[0])

    def kg_user_repr(self, params, user, item, prefs) -> UserRepresentation:
        g = ComputeGraph()
        P = self._const_params(g, params)
        batch = Batch(
            np.array([user]), np.array([item]), self.item_to_entity[[item]],
            *self._pref_rows(user, prefs), [], [],
        )
        v = g.gather(P["entity_emb"], batch.item_entities)
        record, responses = [], []
        u = self.user_vector(g, P, batch, v, record, responses)
        rows = []
        for _, hop, h, r, t, wts in record:
            for trip, wt in zip(zip(h[0].tolist(), r[0].tolist(), t[0].tolist()), wts[0].tolist()):
                rows.append((hop, trip, wt))
        return UserRepresentation(u.value[0].copy(), [o.value[0].copy() for o in responses], rows)

    def _pref_rows(self, user, prefs):
        if not self.hp.ablation.uo_k:
            return None, None, None
        if prefs is None:
            raise ValueError("preference sets required for the KG-enhanced user vector")
        sl = slice(user, user + 1)
        return prefs.heads[sl], prefs.relations[sl], prefs.tails[sl]

    def mixing_layer(self, params, item, u, nbrs) -> np.ndarray:
        """Final item vector for one item given an already computed user vector."""
        g = ComputeGraph()
        P = self._const_params(g, params)
        levels, rels = self.receptive_field([item], nbrs)
        batch = Batch(np.array([0]), np.array([item]), self.item_to_entity[[item]], None, None, None, levels, rels)
        v2 = self.item_vector(g, P, batch, g.const(np.asarray(u, dtype=np.float64)[None, :]))
        return v2.value[0].copy()

    def export_attention(self, params, user, item, prefs, nbrs) -> "AttentionReport":
        g = ComputeGraph()
        record = []
        self.build(g, self._const_params(g, params), self.make_batch([user], [item], prefs, nbrs), record)
        rows = []
        for scope, hop, h, r, t, wts in record:
            if scope == "preference":
                for a, b, c, wt in zip(h[0], r[0], t[0], wts[0]):
                    rows.append((scope, hop, int(a), int(b), int(c), float(wt)))
            else:
                heads = h[0]
                for m, head in enumerate(heads):
                    for b, c, wt in zip(r[0, m], t[0, m], wts[0, m]):
                        rows.append((scope, hop, int(head), int(b), int(c), float(wt)))
        return AttentionReport(user, item, self.hp.k_n, rows)


@dataclass
class AttentionReport:
    """Normalised attention weights for one (user, item) pair.

    Preference rows form one group per hop (k_m rows; hop 0 holds the clicked-item
    weights). Neighbor rows come in consecutive runs of k_n, one run per head
    entity per aggregation step.
    """

    user: int
    item: int
    k_n: int
    rows: list  # (scope, hop, head_id, relation_id, tail_id, weight)

    HEADER = ("scope", "hop", "head_id", "relation_id", "tail_id", "weight")

    def groups(self) -> list:
        pref: dict = {}
        nbr = []
        for row in self.rows:
            if row[0] == "preference":
                pref.setdefault(row[1], []).append(row[5])
            else:
                nbr.append(row[5])
        return list(pref.values()) + [nbr[i:i + self.k_n] for i in range(0, len(nbr), self.k_n)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for row in self.rows:
            w.writerow(row[:5] + (repr(row[5]),))
        return buf.getvalue()
