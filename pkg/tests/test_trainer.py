import math

import numpy as np
import pytest
from scipy.stats import chisquare

from mvin.kg import InteractionSet, SplitSpec, split_interactions
from mvin.model import EMBEDDING_NAMES, AblationFlags, Hyperparams
from mvin.synth import SynthSpec, synth_dataset
from mvin.trainer import (
    SGD,
    Adam,
    Checkpoint,
    Dataset,
    TrainConfig,
    TrainingError,
    embeddings_from_bytes,
    embeddings_to_bytes,
    epoch_examples,
    loss,
    sample_negatives,
    stage_seeds,
    tables_for,
    train_regular,
    train_stagewise,
)

from conftest import central_difference

SMALL = SynthSpec(num_users=30, num_items=16, num_entities=40, num_groups=2, attrs_per_group=4,
                  attr_links=2, positives_per_user=6)
HP = Hyperparams(s=4, l_p=1, l_w=1, l_d=2, k_m=4, k_n=2)


@pytest.fixture(scope="module")
def data():
    ds = synth_dataset(SMALL, seed=0)
    return Dataset(ds.kg, *split_interactions(ds.interactions, SplitSpec(seed=0)))


def _batch(data, n=12):
    rng = np.random.default_rng(1)
    return epoch_examples(data.train, 1, rng)[0][:n], epoch_examples(data.train, 1, rng)[1][:n], \
        epoch_examples(data.train, 1, rng)[2][:n]


def test_loss_is_ln2_when_all_scores_are_zero(data):
    model = data.model(HP)
    params = {k: np.zeros_like(v) for k, v in model.init_params(0).items()}
    nbrs, prefs = tables_for(data, HP, Checkpoint({}, 1, 0, 0.0, stage_seeds(0, 1)))
    users, items, labels = [0, 1, 2, 3], [0, 1, 2, 3], [1, 0, 1, 0]
    value, _ = loss(model, params, users, items, labels, prefs, nbrs, l2=0.0)
    assert abs(value - math.log(2)) < 1e-15


def test_loss_includes_l2_term(data):
    model = data.model(HP)
    params = model.init_params(3)
    nbrs, prefs = tables_for(data, HP, Checkpoint({}, 1, 0, 0.0, stage_seeds(0, 1)))
    users, items, labels = [0, 5], [2, 7], [1, 0]
    base, _ = loss(model, params, users, items, labels, prefs, nbrs, l2=0.0)
    probs = model.predict(params, users, items, prefs, nbrs)
    bce = -(math.log(probs[0]) + math.log(1 - probs[1])) / 2
    assert abs(base - bce) < 1e-14
    norm = sum(float((v ** 2).sum()) for v in params.values())
    with_reg, _ = loss(model, params, users, items, labels, prefs, nbrs, l2=0.01)
    assert abs(with_reg - (bce + 0.01 * norm)) < 1e-12


def test_loss_gradient_matches_finite_differences(data):
    hp = Hyperparams(s=3, l_p=1, l_w=2, l_d=1, k_m=3, k_n=2)
    model = data.model(hp)
    rng = np.random.default_rng(0)
    params = {k: rng.normal(0, 0.5, v.shape) for k, v in model.init_params(0).items()}
    nbrs, prefs = tables_for(data, hp, Checkpoint({}, 1, 0, 0.0, stage_seeds(0, 1)))
    users, items, labels = [0, 1, 4, 9], [3, 0, 5, 2], [1, 0, 0, 1]
    _, grads = loss(model, params, users, items, labels, prefs, nbrs, l2=0.05)

    def f(p):
        return loss(model, p, users, items, labels, prefs, nbrs, l2=0.05, with_grad=False)[0]

    # rows touched by the batch plus a few untouched ones (pure L2 gradient)
    for name, value in params.items():
        idx_list = list(np.ndindex(value.shape))
        for idx in [idx_list[i] for i in rng.choice(len(idx_list), size=min(8, len(idx_list)), replace=False)]:
            num = central_difference(f, params, name, idx)
            assert abs(grads[name][idx] - num) <= max(1e-6, 1e-4 * abs(num)), (name, idx)


def test_frozen_parameters_stop_after_patience(data):
    cfg = TrainConfig(epochs=10, lr=0.0, patience=1, seed=0)
    rows = []
    ckpt = train_regular(data, cfg, HP, log=rows.append)
    assert [r["epoch"] for r in rows] == [1, 2]
    assert rows[0]["valid_auc"] == rows[1]["valid_auc"]
    assert ckpt.epoch == 1


def test_training_is_deterministic(data):
    cfg = TrainConfig(epochs=3, patience=3, seed=4)
    a = train_regular(data, cfg, HP)
    b = train_regular(data, cfg, HP)
    assert a.to_bytes() == b.to_bytes()
    assert [r["train_loss"] for r in a.history] == [r["train_loss"] for r in b.history]


def test_training_reduces_loss(data):
    rows = []
    train_regular(data, TrainConfig(epochs=6, patience=6, lr=2e-2, seed=1), HP, log=rows.append)
    assert rows[-1]["train_loss"] < rows[0]["train_loss"]


def test_sgd_and_adam_steps():
    p = {"w": np.array([1.0, -2.0])}
    SGD(0.1).step(p, {"w": np.array([1.0, 1.0])})
    np.testing.assert_allclose(p["w"], [0.9, -2.1])
    # the first Adam step moves each coordinate by about lr in the gradient's sign
    p = {"w": np.array([1.0, -2.0])}
    Adam(0.01).step(p, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["w"], [0.99, -1.99], atol=1e-8)


def test_config_validation():
    with pytest.raises(ValueError, match="optimizer"):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(max_stages=0)


def test_negatives_exclude_positives_and_are_uniform():
    inter = InteractionSet(1, 12, {0: frozenset({0, 5, 7})}, np.arange(12))
    draws = sample_negatives(0, inter, 100_000, np.random.default_rng(0))
    counts = np.bincount(draws, minlength=12)
    assert counts[[0, 5, 7]].sum() == 0
    assert chisquare(np.delete(counts, [0, 5, 7])).pvalue > 0.001


def test_negative_sampling_is_deterministic():
    inter = InteractionSet(1, 12, {0: frozenset({1})}, np.arange(12))
    a = sample_negatives(0, inter, 50, np.random.default_rng(9))
    assert a == sample_negatives(0, inter, 50, np.random.default_rng(9))


def test_user_with_every_item_cannot_get_negatives():
    inter = InteractionSet(1, 2, {0: frozenset({0, 1})}, np.arange(2))
    with pytest.raises(TrainingError, match="every item"):
        sample_negatives(0, inter, 1, np.random.default_rng(0))


def test_epoch_examples_balance(data):
    users, items, labels = epoch_examples(data.train, 2, np.random.default_rng(0))
    n_pos = data.train.num_interactions
    assert labels.sum() == n_pos and len(labels) == 3 * n_pos
    for u, v, y in zip(users, items, labels):
        assert (v in data.train.items_of(u)) == bool(y)


def test_checkpoint_round_trip(tmp_path, data):
    ckpt = train_regular(data, TrainConfig(epochs=2, seed=2), HP)
    ckpt.save(tmp_path / "c.bin")
    again = Checkpoint.load(tmp_path / "c.bin")
    assert again.to_bytes() == ckpt.to_bytes()
    for k, v in ckpt.params.items():
        assert again.params[k].tobytes() == v.tobytes()
    assert (again.stage, again.epoch, again.valid_auc, again.seeds, again.hp) == \
        (ckpt.stage, ckpt.epoch, ckpt.valid_auc, ckpt.seeds, ckpt.hp)
    with pytest.raises(ValueError, match="not an MVIN checkpoint"):
        Checkpoint.from_bytes(b"garbage!" + b"\0" * 16)


def test_embedding_round_trip_is_bit_exact(data):
    params = data.model(HP).init_params(5)
    back = embeddings_from_bytes(embeddings_to_bytes(params))
    assert set(back) == {k for k in EMBEDDING_NAMES if k in params}
    for k, v in back.items():
        assert v.tobytes() == params[k].tobytes()


def test_single_stage_equals_regular_training(data):
    cfg = TrainConfig(epochs=4, patience=2, max_stages=1, seed=3)
    a = train_stagewise(data, cfg, HP)
    b = train_regular(data, cfg, HP)
    assert a.to_bytes() == b.to_bytes()


def test_each_stage_starts_from_previous_best_embeddings(data):
    cfg = TrainConfig(epochs=3, patience=2, max_stages=3, seed=6)
    starts = {}
    train_stagewise(data, cfg, HP, on_stage_start=lambda s, p: starts.setdefault(s, {k: v.copy() for k, v in p.items()}))
    for stage in range(2, max(starts) + 1):
        prev = train_stagewise(data, TrainConfig(epochs=3, patience=2, max_stages=stage - 1, seed=6), HP)
        assert prev.stage == stage - 1
        for name in EMBEDDING_NAMES:
            if name in prev.params:
                assert starts[stage][name].tobytes() == prev.params[name].tobytes()
        # non-embedding weights are fresh for the new stage
        fresh = data.model(HP).init_params(stage_seeds(6, stage)["init"])
        assert starts[stage]["W_v"].tobytes() == fresh["W_v"].tobytes()


def test_stages_use_fresh_samples(data):
    seeds = [stage_seeds(0, k)["sampler"] for k in range(1, 5)]
    assert len(set(seeds)) == 4
    t1 = tables_for(data, HP, Checkpoint({}, 1, 0, 0.0, stage_seeds(0, 1)))
    t2 = tables_for(data, HP, Checkpoint({}, 2, 0, 0.0, stage_seeds(0, 2)))
    assert t1[0].to_bytes() != t2[0].to_bytes()


def test_stagewise_refuses_when_ablated(data):
    hp = Hyperparams(s=4, l_p=1, l_w=1, l_d=2, k_m=4, k_n=2, ablation=AblationFlags().without("sw"))
    with pytest.raises(ValueError, match="sw"):
        train_stagewise(data, TrainConfig(epochs=1), hp)


def test_non_finite_loss_names_the_example(data):
    model = data.model(HP)
    params = model.init_params(0)
    params["entity_emb"] = params["entity_emb"].copy()
    params["entity_emb"][:] = 1e200
    nbrs, prefs = tables_for(data, HP, Checkpoint({}, 1, 0, 0.0, stage_seeds(0, 1)))
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="user=0"):
        loss(model, params, [0], [0], [1], prefs, nbrs, l2=0.0)
