import numpy as np
import pytest

from twograph import build_backprop, build_dac, build_gan
from twograph.environments import DensitySource, SupervisedSource
from twograph.errors import ShapeError
from twograph.players import (
    PlayerState,
    StopRule,
    arglocopt,
    current_clones,
    init_states,
    mlp_init,
    positive_uniform_init,
    run_round,
    sample_noise,
    sgd_step,
)
from twograph.tensor import Rng


def test_sgd_step_descends():
    s = PlayerState(np.array([1.0, 2.0]), lr=0.5)
    s2 = sgd_step(s, np.array([2.0, -2.0]))
    assert np.array_equal(s2.params, [0.0, 3.0])
    assert np.array_equal(s.params, [1.0, 2.0]), "steps return new states"


def test_momentum_accumulates():
    s = PlayerState(np.zeros(1), lr=1.0, momentum=0.5, optimizer="sgd-momentum")
    s = sgd_step(s, np.ones(1))
    s = sgd_step(s, np.ones(1))
    assert s.velocity[0] == pytest.approx(1.5)
    assert s.params[0] == pytest.approx(-2.5)


def test_player_state_validation():
    with pytest.raises(ValueError):
        PlayerState(np.zeros(2), lr=-1.0)
    with pytest.raises(ValueError):
        PlayerState(np.zeros(2), momentum=1.0, optimizer="sgd-momentum")
    with pytest.raises(ValueError):
        PlayerState(np.zeros(2), optimizer="adam")
    with pytest.raises(ShapeError):
        sgd_step(PlayerState(np.zeros(2)), np.zeros(3))


def test_stop_rule_validation():
    with pytest.raises(ValueError):
        StopRule(max_rounds=0)
    with pytest.raises(ValueError):
        StopRule(tol=0.0)


def test_initializers():
    rng = Rng(0)
    w = positive_uniform_init((4, 3), 3, rng)
    assert np.all(w >= 0) and w.shape == (4, 3)
    p = mlp_init((2, 3, 1), rng)
    assert p.shape == (13,)
    # biases start at zero
    assert np.all(p[6:9] == 0) and p[-1] == 0


def test_init_states_overrides():
    p = build_backprop([2, 1])
    states = init_states(p, Rng(0), lr=0.1, overrides={"theta2": {"lr": 0.0, "params": np.ones((1, 2))}})
    assert states["theta1"].lr == 0.1
    assert states["theta2"].lr == 0.0
    assert np.array_equal(states["theta2"].params, np.ones((1, 2)))


def test_init_states_are_seeded():
    p = build_backprop([2, 3, 1])
    a = init_states(p, Rng(5))
    b = init_states(p, Rng(5))
    for k in a:
        assert np.array_equal(a[k].params, b[k].params)


def test_sample_noise_shapes_follow_batch():
    p = build_gan([1, 4, 1], [1, 4, 1], 1, batch_size=7)
    noise = sample_noise(p, Rng(0), p.batch_size)
    assert noise["eps"].shape == (7, 1)


def test_run_round_updates_all_players_simultaneously():
    p = build_backprop([2, 3, 1])
    env = SupervisedSource(np.array([[1.0, -1.0]]))
    states = init_states(p, Rng(0), lr=0.1)
    new, metrics = run_round(p, states, env, Rng(1))
    assert set(metrics["delta_norm"]) == {"theta1", "theta2", "theta3"}
    for k in states:
        assert not np.array_equal(states[k].params, new[k].params)


def test_maximizing_player_ascends():
    p = build_gan([1, 4, 1], [1, 4, 1], 1, batch_size=64)
    env = DensitySource.mixture([1.0], [[2.0]], [0.5])
    states = init_states(p, Rng(0), lr=0.05, overrides={"theta": {"lr": 0.0}})
    objectives = []
    rng = Rng(1)
    for _ in range(200):
        states, m = run_round(p, states, env, rng)
        objectives.append(m["objective"])
    # the Curator alone moves, and it maximizes
    assert np.mean(objectives[-20:]) > np.mean(objectives[:20])


def test_clones_track_source_player():
    p = build_dac([2, 2], [4, 8, 1], [4, 2])
    states = init_states(p, Rng(0))
    clones = current_clones(p, states)
    assert np.array_equal(clones["V_clone"], states["V"].params)
    clones["V_clone"][0] += 1.0
    assert not np.array_equal(clones["V_clone"], states["V"].params), "clones are copies"


def test_arglocopt_stops_early_on_small_responses():
    p = build_backprop([1], input_dim=2, activation="identity", batch_size=50)
    env = SupervisedSource(np.array([[0.5, -1.0]]), noise_std=0.0, pool_size=50)
    states = init_states(p, Rng(0), lr=0.2)
    states, history = arglocopt(p, states, env, Rng(1), StopRule(5000, 1e-8))
    assert history.stopped_early
    assert len(history) < 5000
    assert np.allclose(states["theta1"].params, [[0.5, -1.0]], atol=1e-6)


def test_arglocopt_is_deterministic():
    p = build_backprop([2, 1])
    env = SupervisedSource(np.array([[1.0, 2.0]]))
    runs = []
    for _ in range(2):
        states = init_states(p, Rng(3), lr=0.05)
        _, h = arglocopt(p, states, env, Rng(4), StopRule(50))
        runs.append(h.objectives())
    assert np.array_equal(runs[0], runs[1])
