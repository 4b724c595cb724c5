"""Training: negative sampling, cross-entropy + L2 objective, regular and
stage-wise loops with early stopping on validation AUC, checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import metrics
from .autodiff import ComputeGraph, NonFiniteError, backward
from .kg import InteractionSet, KnowledgeGraph
from .model import EMBEDDING_NAMES, MVIN, Hyperparams
from .sampler import build_preference_sets, resample, sample_neighbors, self_loop_relation

logger = logging.getLogger(__name__)

_INIT_SALT = 0x696E6974
_EVAL_SALT = 0x6576616C
_TEST_SALT = 0x74657374
STAGE_IMPROVEMENT = 1e-4
DIVERGENCE_LOSS = 1e6


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    optimizer: str = "adam"
    lr: float = 1e-2
    l2: float = 1e-7
    neg_per_pos: int = 1
    patience: int = 5
    max_stages: int = 7
    seed: int = 0
    reinit_each_stage: bool = True

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        # lr == 0 is allowed to freeze parameters
        if self.lr < 0 or self.l2 < 0:
            raise ValueError("lr and l2 must be non-negative")
        if self.neg_per_pos < 1 or self.patience < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs, batch_size, neg_per_pos and patience must be >= 1")
        if self.max_stages < 1:
            raise ValueError("max_stages must be >= 1")


@dataclass
class Dataset:
    kg: KnowledgeGraph
    train: InteractionSet
    valid: InteractionSet
    test: InteractionSet

    @property
    def num_relation_slots(self) -> int:
        return self.kg.num_relations + 1

    def interacted(self, user: int) -> set:
        return set(self.train.items_of(user)) | set(self.valid.items_of(user)) | set(self.test.items_of(user))

    def model(self, hp: Hyperparams) -> MVIN:
        return MVIN(hp, self.kg.num_entities, self.num_relation_slots, self.train.num_users, self.train.item_to_entity)


@dataclass
class Checkpoint:
    params: dict
    stage: int
    epoch: int
    valid_auc: float
    seeds: dict
    hp: Optional[Hyperparams] = None
    history: list = field(default_factory=list)

    MAGIC = b"MVINCKPT"
    VERSION = 1

    def to_bytes(self) -> bytes:
        names = sorted(self.params)
        header = {
            "stage": self.stage,
            "epoch": self.epoch,
            "valid_auc": self.valid_auc,
            "seeds": self.seeds,
            "hp": self.hp.to_dict() if self.hp else None,
            "tensors": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        parts = [self.MAGIC, struct.pack("<II", self.VERSION, len(blob)), blob]
        parts += [np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n in names]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != cls.MAGIC:
            raise ValueError("not an MVIN checkpoint")
        version, n = struct.unpack_from("<II", data, 8)
        if version != cls.VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(data[16:16 + n].decode("utf-8"))
        off = 16 + n
        params = {}
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            params[t["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
            off += 8 * count
        hp = Hyperparams.from_dict(header["hp"]) if header["hp"] else None
        return cls(params, header["stage"], header["epoch"], header["valid_auc"], header["seeds"], hp)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# -- optimizers --------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            params[k] -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)


# -- sampling helpers ------------------------------------------------------

def sample_negatives(user: int, train: InteractionSet, n: int, rng) -> list:
    """``n`` items drawn uniformly (with replacement) from the user's non-positives."""
    if n == 0:
        return []
    pos = np.fromiter(train.items_of(user), dtype=np.int64)
    eligible = np.setdiff1d(np.arange(train.num_items), pos)
    if len(eligible) == 0:
        raise TrainingError(f"user {user} is positive on every item; cannot sample negatives")
    return eligible[rng.integers(0, len(eligible), size=n)].tolist()


def eval_seed(base: int, split: str) -> int:
    """Seed of the fixed negative pairing used to score the ``valid`` or ``test`` split."""
    if split not in ("valid", "test"):
        raise ValueError(f"unknown split {split!r}")
    return base ^ (_EVAL_SALT if split == "valid" else _TEST_SALT)


def stage_seeds(base: int, stage: int) -> dict:
    return {
        "base": base,
        "stage": stage,
        "sampler": resample(base, stage),
        "init": resample(base ^ _INIT_SALT, stage),
    }


def epoch_examples(train: InteractionSet, neg_per_pos: int, rng):
    """Every train positive plus ``neg_per_pos`` sampled negatives each, shuffled."""
    users, items, labels = [], [], []
    for u in sorted(train.positives):
        pos = sorted(train.positives[u])
        negs = sample_negatives(u, train, neg_per_pos * len(pos), rng)
        users += [u] * (len(pos) + len(negs))
        items += pos + negs
        labels += [1] * len(pos) + [0] * len(negs)
    order = rng.permutation(len(users))
    return (np.asarray(users, np.int64)[order], np.asarray(items, np.int64)[order],
            np.asarray(labels, np.int64)[order])


# -- objective -------------------------------------------------------------

def loss(model: MVIN, params: dict, users, items, labels, prefs, nbrs, l2: float, with_grad: bool = True):
    """Mean binary cross-entropy plus ``l2`` times the squared norm of every parameter.

    Returns (loss value, gradients or None).
    """
    g = ComputeGraph()
    P = {k: g.param(k, v) for k, v in params.items()}
    try:
        probs, _, _ = model.build(g, P, model.make_batch(users, items, prefs, nbrs))
        total = g.bce(probs, labels)
        if l2 > 0:
            reg = g.sum([g.l2_norm_sq(P[k]) for k in sorted(P)])
            total = g.sum([total, g.scale(reg, l2)])
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite loss; {_diagnose(model, params, users, items, prefs, nbrs)}") from exc
    if not np.isfinite(total.value):
        raise TrainingError(f"non-finite loss; {_diagnose(model, params, users, items, prefs, nbrs)}")
    grads = backward(g, total) if with_grad else None
    return float(total.value), grads


def _diagnose(model, params, users, items, prefs, nbrs) -> str:
    for u, v in zip(np.asarray(users).tolist(), np.asarray(items).tolist()):
        try:
            model.predict_one(params, u, v, prefs, nbrs)
        except NonFiniteError as exc:
            return f"first offending example user={u} item={v}: {exc}"
    return "no single example reproduces it"


# -- training loops ------------------------------------------------------

def _tables(data: Dataset, hp: Hyperparams, seed: int):
    nbrs = sample_neighbors(data.kg, hp.k_n, seed) if hp.depth else None
    prefs = build_preference_sets(data.kg, data.train, hp.l_p, hp.k_m, seed) if hp.ablation.uo_k else None
    return nbrs, prefs


def evaluate_ctr(model: MVIN, params, split: InteractionSet, data: Dataset, prefs, nbrs, seed: int):
    """AUC and ACC on ``split`` positives paired with one sampled negative each."""
    users, items, labels = metrics.ctr_eval_set(split.positives, data.interacted, split.num_items, seed)
    scores = model.predict(params, users, items, prefs, nbrs)
    return metrics.auc(labels, scores), metrics.acc(labels, scores), (users, items, labels, scores)


def _run_stage(model, data, cfg, hp, params, stage, log, seeds, on_epoch=None):
    nbrs, prefs = _tables(data, hp, seeds["sampler"])
    opt = make_optimizer(cfg)
    vu, vi, vl = metrics.ctr_eval_set(data.valid.positives, data.interacted, data.valid.num_items, eval_seed(cfg.seed, "valid"))
    best = None
    bad = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, stage, epoch])
        users, items, labels = epoch_examples(data.train, cfg.neg_per_pos, rng)
        losses = []
        for lo in range(0, len(users), cfg.batch_size):
            sl = slice(lo, lo + cfg.batch_size)
            value, grads = loss(model, params, users[sl], items[sl], labels[sl], prefs, nbrs, cfg.l2)
            if value > DIVERGENCE_LOSS:
                raise TrainingError(f"training diverged at stage {stage} epoch {epoch}: loss {value:.3g}")
            opt.step(params, grads)
            losses.append(value * len(users[sl]))
        train_loss = sum(losses) / len(users)
        scores = model.predict(params, vu, vi, prefs, nbrs)
        valid_auc, valid_acc = metrics.auc(vl, scores), metrics.acc(vl, scores)
        row = {"epoch": epoch, "stage": stage, "train_loss": train_loss, "valid_auc": valid_auc, "valid_acc": valid_acc}
        history.append(row)
        if log is not None:
            log(row)
        if best is None or valid_auc > best.valid_auc:
            best = Checkpoint({k: v.copy() for k, v in params.items()}, stage, epoch, valid_auc, dict(seeds), hp)
            bad = 0
        else:
            bad += 1
        # a truthy hook result ends the stage early
        if on_epoch is not None and on_epoch(row, params, prefs, nbrs):
            break
        if bad >= cfg.patience:
            break
    best.history = history
    return best


def train_regular(data: Dataset, cfg: TrainConfig, hp: Hyperparams, log: Optional[Callable] = None,
                  stage: int = 1, params: Optional[dict] = None, on_epoch: Optional[Callable] = None) -> Checkpoint:
    """Epochs of minibatch steps with early stopping; returns the best-validation checkpoint.

    ``on_epoch(row, params, prefs, nbrs)`` runs after every epoch; returning
    True stops training.
    """
    model = data.model(hp)
    seeds = stage_seeds(cfg.seed, stage)
    if params is None:
        params = model.init_params(seeds["init"])
    model.check_params(params)
    return _run_stage(model, data, cfg, hp, params, stage, log, seeds, on_epoch)


def embeddings_to_bytes(params: dict) -> bytes:
    emb = {k: params[k] for k in EMBEDDING_NAMES if k in params}
    return Checkpoint(emb, 0, 0, 0.0, {}).to_bytes()


def embeddings_from_bytes(data: bytes) -> dict:
    return Checkpoint.from_bytes(data).params


def train_stagewise(data: Dataset, cfg: TrainConfig, hp: Hyperparams, log: Optional[Callable] = None,
                    on_stage_start: Optional[Callable] = None) -> Checkpoint:
    """Repeated stages that reload the best embeddings and resample the KG tables.

    Non-embedding weights are re-initialised every stage unless
    ``cfg.reinit_each_stage`` is off, in which case they carry over from the
    previous stage's best checkpoint. Stops when a stage improves validation AUC
    by no more than 1e-4, or after ``cfg.max_stages``.
    """
    if not hp.ablation.sw:
        raise ValueError("stage-wise training is ablated (sw flag off)")
    model = data.model(hp)
    saved = embeddings_to_bytes(model.init_params(stage_seeds(cfg.seed, 1)["init"]))
    best, carry = None, None
    for stage in range(1, cfg.max_stages + 1):
        seeds = stage_seeds(cfg.seed, stage)
        if cfg.reinit_each_stage or carry is None:
            params = model.init_params(seeds["init"])
        else:
            params = {k: v.copy() for k, v in carry.items()}
        params.update(embeddings_from_bytes(saved))
        if on_stage_start is not None:
            on_stage_start(stage, params)
        ckpt = _run_stage(model, data, cfg, hp, params, stage, log, seeds)
        logger.info("stage %d best valid AUC %.4f (epoch %d)", stage, ckpt.valid_auc, ckpt.epoch)
        if best is not None and ckpt.valid_auc <= best.valid_auc + STAGE_IMPROVEMENT:
            break
        best = ckpt
        carry = ckpt.params
        saved = embeddings_to_bytes(ckpt.params)
    return best


def tables_for(data: Dataset, hp: Hyperparams, ckpt: Checkpoint):
    """Rebuild the neighbor table and preference sets a checkpoint was trained with."""
    return _tables(data, hp, ckpt.seeds["sampler"])


__all__ = [
    "Adam", "Checkpoint", "Dataset", "SGD", "TrainConfig", "TrainingError", "eval_seed", "evaluate_ctr",
    "loss", "sample_negatives", "self_loop_relation", "stage_seeds", "tables_for",
    "train_regular", "train_stagewise",
]
