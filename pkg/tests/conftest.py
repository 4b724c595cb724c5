from types import SimpleNamespace

import numpy as np
import pytest

from mvin.kg import InteractionSet, KnowledgeGraph
from mvin.model import MVIN, Hyperparams
from mvin.sampler import build_preference_sets, sample_neighbors

# 10 entities, 2 relations; items 0-3 map to entities 0-3
TINY_TRIPLES = [
    (0, 0, 4), (0, 1, 5), (1, 0, 4), (1, 1, 6), (2, 0, 7), (2, 1, 5), (3, 0, 8), (3, 1, 9),
    (4, 1, 0), (4, 0, 2), (5, 0, 1), (5, 1, 8), (6, 1, 3), (7, 0, 9), (8, 1, 4), (9, 0, 6),
]
TINY_POSITIVES = {0: frozenset({0, 1}), 1: frozenset({2}), 2: frozenset({1, 3})}


def tiny_kg():
    return KnowledgeGraph.from_triples(TINY_TRIPLES, 10, 2)


def tiny_interactions():
    return InteractionSet(3, 4, dict(TINY_POSITIVES), np.arange(4))


def randomize(params, rng, scale=0.5):
    """Replace every tensor with N(0, scale^2) draws so no value sits at its init."""
    return {k: rng.normal(0.0, scale, size=v.shape) for k, v in params.items()}


def build_tiny(hp: Hyperparams, seed: int = 0, scale: float = 0.5):
    kg = tiny_kg()
    inter = tiny_interactions()
    nbrs = sample_neighbors(kg, hp.k_n, seed)
    prefs = build_preference_sets(kg, inter, hp.l_p, hp.k_m, seed)
    model = MVIN(hp, kg.num_entities, kg.num_relations + 1, inter.num_users, inter.item_to_entity)
    params = randomize(model.init_params(seed), np.random.default_rng(seed), scale)
    return SimpleNamespace(kg=kg, inter=inter, nbrs=nbrs, prefs=prefs, model=model, params=params, hp=hp)


@pytest.fixture
def tiny():
    return build_tiny(Hyperparams(s=4, l_p=1, l_w=2, l_d=2, k_m=3, k_n=2))


def central_difference(f, params, name, index, step=1e-5):
    plus = {k: v.copy() for k, v in params.items()}
    minus = {k: v.copy() for k, v in params.items()}
    plus[name][index] += step
    minus[name][index] -= step
    return (f(plus) - f(minus)) / (2 * step)


# -- acceptance summary: one line per criterion ------------------------------

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _ACCEPTANCE[report.nodeid] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, detail) in sorted(_ACCEPTANCE.items()):
        name = nodeid.split("::")[-1].removeprefix("test_")
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[outcome]
        terminalreporter.write_line(f"{verdict:4}  {name}  {detail}".rstrip())
