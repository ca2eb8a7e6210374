import numpy as np
import pytest

from t4p.memory import TokenMemory
from t4p.scenario import ActorClass

V, P, B = int(ActorClass.VEHICLE), int(ActorClass.PEDESTRIAN), int(ActorClass.BICYCLE)


@pytest.fixture
def alpha():
    return np.random.default_rng(0).standard_normal((5, 128))


def test_init_copies_training_tokens(alpha):
    mem = TokenMemory.init_from_training(alpha)
    assert np.array_equal(mem.scene_class_tokens, alpha)
    assert mem.bank == {} and mem.scene_id == 0
    alpha[0] += 1.0
    assert not np.array_equal(mem.scene_class_tokens, alpha)


def test_init_rejects_bad_shape():
    with pytest.raises(ValueError):
        TokenMemory.init_from_training(np.zeros((4, 8)))


def test_register_clones_class_token(alpha):
    mem = TokenMemory.init_from_training(alpha)
    tok = mem.lookup_or_register(7, V, step=0)
    assert np.array_equal(tok, alpha[V])
    tok += 1.0  # the clone is independent of the class row
    assert np.array_equal(mem.scene_class_tokens[V], alpha[V])


def test_updated_token_is_returned(alpha):
    mem = TokenMemory.init_from_training(alpha)
    mem.lookup_or_register(7, V, 0)
    g = np.ones(128)
    mem.apply_token_gradients({7: g}, lr=0.5)
    tok = mem.lookup_or_register(7, V, 1)
    assert np.allclose(tok, alpha[V] - 0.5)
    assert mem.bank[7].last_seen == 1


def test_same_class_newborns_evolve_independently(alpha):
    mem = TokenMemory.init_from_training(alpha)
    a = mem.lookup_or_register(1, P, 0).copy()
    b = mem.lookup_or_register(2, P, 0).copy()
    assert np.array_equal(a, b)
    mem.apply_token_gradients({1: np.full(128, 2.0)}, lr=0.1)
    assert np.array_equal(mem.bank[2].token, b)
    assert not np.array_equal(mem.bank[1].token, a)


def test_apply_gradients_contract(alpha):
    mem = TokenMemory.init_from_training(alpha)
    for aid in (1, 2, 3):
        mem.lookup_or_register(aid, V, 0)
    before = {k: e.token.copy() for k, e in mem.bank.items()}
    g = np.random.default_rng(1).standard_normal(128)
    mem.apply_token_gradients({2: g}, lr=0.0)
    assert all(np.array_equal(mem.bank[k].token, before[k]) for k in before)
    mem.apply_token_gradients({2: g}, lr=0.5)
    assert np.allclose(mem.bank[2].token, before[2] - 0.5 * g, atol=1e-15)
    assert np.array_equal(mem.bank[1].token, before[1]) and np.array_equal(mem.bank[3].token, before[3])
    with pytest.raises(KeyError):
        mem.apply_token_gradients({99: g}, lr=0.5)


def test_tracker_failure_reinitializes(alpha):
    mem = TokenMemory.init_from_training(alpha)
    mem.lookup_or_register(1, V, 0)
    mem.apply_token_gradients({1: np.ones(128)}, lr=0.5)
    evolved = mem.bank[1].token.copy()
    mem.on_tracker_id_change(1, 50)
    fresh = mem.lookup_or_register(50, V, 5)
    assert np.array_equal(fresh, alpha[V])
    # the old entry stays banked but frozen
    mem.apply_token_gradients({1: np.ones(128)}, lr=0.5)
    assert np.array_equal(mem.bank[1].token, evolved)
    with pytest.raises(ValueError):
        mem.on_tracker_id_change(50, 1)


def test_reassociation_retrieves_evolved_token(alpha):
    mem = TokenMemory.init_from_training(alpha)
    mem.lookup_or_register(3, B, 0)
    mem.apply_token_gradients({3: np.ones(128)}, lr=0.25)
    evolved = mem.bank[3].token.copy()
    # occluded for a while, then the tracker restores the same id
    assert np.array_equal(mem.lookup_or_register(3, B, 40), evolved)


def test_transition_single_vehicle(alpha):
    mem = TokenMemory.init_from_training(alpha)
    mem.lookup_or_register(1, V, 0)
    mem.apply_token_gradients({1: np.full(128, 3.0)}, lr=1.0)
    v = mem.bank[1].token.copy()
    mem.scene_transition()
    assert np.array_equal(mem.scene_class_tokens[V], v)
    assert mem.bank == {} and mem.scene_id == 1


def test_transition_mean_of_three_pedestrians(alpha):
    rng = np.random.default_rng(4)
    mem = TokenMemory.init_from_training(alpha)
    ps = []
    for aid in (1, 2, 3):
        mem.lookup_or_register(aid, P, 0)
        mem.apply_token_gradients({aid: rng.standard_normal(128)}, lr=1.0)
        ps.append(mem.bank[aid].token.copy())
    mem.scene_transition()
    expected = [(ps[0][i] + ps[1][i] + ps[2][i]) / 3 for i in range(128)]
    assert np.allclose(mem.scene_class_tokens[P], expected, rtol=0, atol=1e-12)


def test_transition_keeps_absent_classes(alpha):
    mem = TokenMemory.init_from_training(alpha)
    mem.lookup_or_register(1, V, 0)
    mem.apply_token_gradients({1: np.ones(128)}, lr=1.0)
    mem.scene_transition()
    assert np.array_equal(mem.scene_class_tokens[B], alpha[B])
    assert not np.array_equal(mem.scene_class_tokens[V], alpha[V])


def test_empty_transition_is_idempotent(alpha):
    mem = TokenMemory.init_from_training(alpha)
    mem.scene_transition()
    mem.scene_transition()
    assert np.array_equal(mem.scene_class_tokens, alpha) and mem.scene_id == 2


def test_banked_class_never_changes(alpha):
    mem = TokenMemory.init_from_training(alpha)
    mem.lookup_or_register(1, V, 0)
    mem.lookup_or_register(1, P, 1)  # same id seen with another label keeps its class
    assert mem.bank[1].cls == V


def test_snapshot_is_deep(alpha):
    mem = TokenMemory.init_from_training(alpha)
    mem.lookup_or_register(1, V, 0)
    snap = mem.snapshot()
    mem.apply_token_gradients({1: np.ones(128)}, lr=1.0)
    assert np.array_equal(snap.bank[1].token, alpha[V])
