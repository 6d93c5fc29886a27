import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atd3.nets import AttentionActor, Critic, MlpActor, normalize, soft_update
from atd3.numerics import ShapeError, Tape, grad_check


def random_states(rng, batch=4):
    v = rng.uniform(0, 30, size=(batch, 10))
    dv = rng.uniform(-4, 4, size=(batch, 10))
    gap = rng.uniform(2, 60, size=(batch, 10))
    return np.stack([v, dv, gap], axis=2)


def test_actor_shapes():
    actor = AttentionActor.init(np.random.default_rng(0))
    shapes = {k: v.shape for k, v in actor.params.items()}
    assert shapes == {"U_E": (3, 100), "W_E": (100, 100), "W1_a": (200, 100), "W2_a": (100, 1), "W_c": (100, 1)}


def test_zero_score_vector_gives_uniform_attention():
    rng = np.random.default_rng(1)
    actor = AttentionActor.init(rng)
    actor.params["W2_a"][:] = 0.0
    _, beta = actor(random_states(rng))
    np.testing.assert_allclose(beta, 0.1, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_action_range_and_attention_simplex(seed):
    rng = np.random.default_rng(seed)
    actor = AttentionActor.init(rng, hidden=16)
    for k in actor.params:
        actor.params[k] *= rng.uniform(0.5, 20)
    action, beta = actor(random_states(rng, 8))
    assert np.all(np.abs(action) <= 1.0)
    assert np.all(np.abs(beta.sum(axis=1) - 1.0) <= 1e-9)
    assert np.all((beta >= 0) & (beta <= 1))


def test_wrong_window_rejected():
    actor = AttentionActor.init(np.random.default_rng(0), hidden=4)
    with pytest.raises(ShapeError):
        actor(np.zeros((2, 9, 3)))


def test_tape_matches_numpy_path():
    rng = np.random.default_rng(2)
    actor = AttentionActor.init(rng)
    states = random_states(rng, 6)
    tape = Tape()
    a_node, b_node = actor.forward_tape(tape, states)
    a_np, b_np = actor(states)
    np.testing.assert_allclose(a_node.value[:, 0], a_np, rtol=0, atol=1e-13)
    np.testing.assert_allclose(b_node.value, b_np, rtol=0, atol=1e-13)


def test_actor_gradients_small_hidden():
    rng = np.random.default_rng(3)
    actor = AttentionActor.init(rng, hidden=6)
    states = random_states(rng, 3)
    tape = Tape()
    action, beta = actor.forward_tape(tape, states)
    out = tape.mse(action, tape.const(rng.uniform(-1, 1, (3, 1))))
    err, _ = grad_check(tape, out)
    assert err < 1e-4
    tape2 = Tape()
    _, beta2 = actor.forward_tape(tape2, states)
    out2 = tape2.mse(beta2, tape2.const(rng.dirichlet(np.ones(10), size=3)))
    err2, _ = grad_check(tape2, out2)
    assert err2 < 1e-4


def test_actor_gradients_full_size_sampled():
    rng = np.random.default_rng(4)
    actor = AttentionActor.init(rng)
    tape = Tape()
    action, _ = actor.forward_tape(tape, random_states(rng, 2))
    out = tape.mean(action)
    err, _ = grad_check(tape, out, max_entries=25, rng=np.random.default_rng(0))
    assert err < 1e-4


def test_critic_zero_weights_give_zero_q():
    critic = Critic.init(np.random.default_rng(0))
    for v in critic.params.values():
        v[...] = 0.0
    q = critic(random_states(np.random.default_rng(1), 5), np.linspace(-1, 1, 5))
    assert np.array_equal(q, np.zeros(5))


def test_critic_deterministic_and_tape_agrees():
    rng = np.random.default_rng(5)
    critic = Critic.init(rng)
    s, a = random_states(rng, 4), rng.uniform(-1, 1, 4)
    assert np.array_equal(critic(s, a), critic(s, a))
    tape = Tape()
    q = critic.forward_tape(tape, s, tape.const(a[:, None]))
    np.testing.assert_allclose(q.value[:, 0], critic(s, a), atol=1e-13)


def test_critic_action_gradient():
    rng = np.random.default_rng(6)
    critic = Critic.init(rng)
    tape = Tape()
    a = tape.param(rng.uniform(-1, 1, (4, 1)))
    q = critic.forward_tape(tape, random_states(rng, 4), a, p=critic.tape_params(tape, trainable=False))
    err, _ = grad_check(tape, tape.mean(q), params=[a])
    assert err < 1e-4


def test_critic_parameter_gradients():
    rng = np.random.default_rng(7)
    critic = Critic.init(rng, hidden=8)
    tape = Tape()
    q = critic.forward_tape(tape, random_states(rng, 3), tape.const(rng.uniform(-1, 1, (3, 1))))
    err, _ = grad_check(tape, tape.mse(q, tape.const(np.ones((3, 1)))))
    assert err < 1e-4


def test_critic_rejects_bad_action_shape():
    critic = Critic.init(np.random.default_rng(0), hidden=4)
    tape = Tape()
    with pytest.raises(ShapeError):
        critic.forward_tape(tape, np.zeros((3, 10, 3)), tape.const(np.zeros((2, 1))))


def test_critics_never_share_storage():
    rng = np.random.default_rng(0)
    c1, c2 = Critic.init(rng), Critic.init(rng)
    assert not any(np.shares_memory(c1.params[k], c2.params[k]) for k in c1.params)
    clone = c1.copy()
    assert not any(np.shares_memory(c1.params[k], clone.params[k]) for k in c1.params)


def test_reversed_window_changes_action():
    rng = np.random.default_rng(8)
    actor = AttentionActor.init(rng)
    states = random_states(rng, 20)
    a_fwd, _ = actor(states)
    a_rev, _ = actor(states[:, ::-1, :])
    assert np.all(a_fwd != a_rev)


def test_soft_update_examples():
    rng = np.random.default_rng(9)
    main, target = Critic.init(rng, hidden=4), Critic.init(rng, hidden=4)
    t = target.copy()
    soft_update(t, main, 1.0)
    assert all(np.array_equal(t.params[k], main.params[k]) for k in t.params)
    t = target.copy()
    soft_update(t, main, 0.0)
    assert all(np.array_equal(t.params[k], target.params[k]) for k in t.params)
    for v in main.params.values():
        v[...] = 1.0
    for v in t.params.values():
        v[...] = 0.0
    soft_update(t, main, 1e-3)
    assert all(np.all(v == 0.001) for v in t.params.values())
    with pytest.raises(ValueError):
        soft_update(t, main, 1.5)


def test_soft_update_converges_geometrically():
    rng = np.random.default_rng(10)
    main, target = MlpActor.init(rng, 10, hidden=4), MlpActor.init(rng, 10, hidden=4)
    dist = lambda: np.sqrt(sum(np.sum((target.params[k] - main.params[k]) ** 2) for k in main.params))  # noqa: E731
    d0 = dist()
    for _ in range(5):
        soft_update(target, main, 0.1)
        d1 = dist()
        assert d1 == pytest.approx(0.9 * d0, rel=1e-9)
        d0 = d1


def test_mlp_actor_uses_newest_observations_only():
    rng = np.random.default_rng(11)
    actor = MlpActor.init(rng, window=1)
    states = random_states(rng, 3)
    a_full, beta = actor(states)
    assert beta is None
    a_last, _ = actor(states[:, -1:, :])
    assert np.array_equal(a_full, a_last)
    tampered = states.copy()
    tampered[:, :-1, :] = 0.0
    assert np.array_equal(actor(tampered)[0], a_full)


def test_normalize_constants():
    np.testing.assert_allclose(normalize([[15.0, 0.0, 25.0]]), [[0.0, 0.0, 0.0]])
