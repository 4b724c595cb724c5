"""CTR metrics (AUC, ACC), Precision@N, and evaluation-set construction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ScoredSet:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    scores: np.ndarray

    @classmethod
    def from_entries(cls, entries) -> "ScoredSet":
        entries = list(entries)
        if not entries:
            return cls(*(np.empty(0) for _ in range(4)))
        u, v, y, s = zip(*entries)
        return cls(np.asarray(u), np.asarray(v), np.asarray(y, dtype=np.int64), np.asarray(s, dtype=np.float64))

    def __len__(self):
        return len(self.labels)


def _check_scores(scores):
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")


def auc(labels, scores) -> float:
    """Rank-based (Mann-Whitney) AUC; tied scores count one half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    _check_scores(scores)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u_stat = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def acc(labels, scores, threshold: float = 0.5) -> float:
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if len(labels) == 0:
        raise ValueError("ACC needs a nonempty set")
    return float(((scores >= threshold).astype(np.int64) == labels).mean())


def precision_at_n(score_fn: Callable, user: int, n: int, candidates: Iterable[int], test_positives) -> float:
    """Fraction of the top-``n`` candidates that are test positives.

    ``score_fn(user, items)`` returns one score per item. Ties rank the smaller
    item id first.
    """
    cand = np.array(sorted(set(candidates)), dtype=np.int64)
    if len(cand) < n:
        raise ValueError(f"need at least {n} candidates, got {len(cand)}")
    scores = np.asarray(score_fn(user, cand), dtype=np.float64)
    top = top_n(cand, scores, n)
    hits = len(set(top.tolist()) & set(test_positives))
    return hits / n


def top_n(items: np.ndarray, scores: np.ndarray, n: int) -> np.ndarray:
    order = np.lexsort((items, -scores))
    return items[order[:n]]


def ctr_eval_set(split: Mapping[int, Iterable[int]], interacted: Callable[[int], set], num_items: int, seed: int):
    """Pair every positive with one uniformly drawn non-interacted item.

    Returns (users, items, labels) arrays; negatives follow their positive.
    """
    rng = np.random.default_rng(seed)
    users, items, labels = [], [], []
    all_items = np.arange(num_items)
    for u in sorted(split):
        pos = sorted(split[u])
        if not pos:
            continue
        seen = interacted(u)
        eligible = np.setdiff1d(all_items, np.fromiter(seen, dtype=np.int64, count=len(seen)))
        if len(eligible) == 0:
            continue
        negs = eligible[rng.integers(0, len(eligible), size=len(pos))]
        for v, nv in zip(pos, negs.tolist()):
            users += [u, u]
            items += [v, nv]
            labels += [1, 0]
    return np.array(users, np.int64), np.array(items, np.int64), np.array(labels, np.int64)


def mean_precision_at_n(score_fn, users, candidates_of, test_of, ns) -> dict:
    """Average Precision@N over users that have test positives and enough candidates."""
    totals = {n: [] for n in ns}
    for u in users:
        test = test_of(u)
        if not test:
            continue
        cand = np.array(sorted(candidates_of(u)), dtype=np.int64)
        if not len(cand):
            continue
        scores = np.asarray(score_fn(u, cand), dtype=np.float64)
        for n in ns:
            if len(cand) >= n:
                top = top_n(cand, scores, n)
                totals[n].append(len(set(top.tolist()) & test) / n)
    return {n: (float(np.mean(v)) if v else float("nan")) for n, v in totals.items()}
