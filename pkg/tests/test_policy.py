import json

import numpy as np
import pytest

from glas.observation import Observation
from glas.policy import (
    END_TO_END,
    TWO_STAGE,
    BatchInput,
    WeightsFormatError,
    backward_controller_batch,
    forward_controller,
    forward_controller_batch,
    forward_pi,
    init_weights,
    layer_sizes,
    load_weights,
    save_weights,
)
from glas.safety import SafetyParams, default_params
from glas.world import DOUBLE, SINGLE


def random_observation(rng, dynamics=SINGLE, n_nb=None, n_ob=None, params=None):
    params = params or default_params(dynamics)
    d = 2 if dynamics == SINGLE else 4
    n_nb = rng.integers(0, 7) if n_nb is None else n_nb
    n_ob = rng.integers(0, 7) if n_ob is None else n_ob

    def ring(n):
        r = rng.uniform(params.r_safe + 0.01, params.r_sense, n)
        a = rng.uniform(0, 2 * np.pi, n)
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)

    nb = ring(n_nb)
    if d == 4:
        nb = np.hstack([nb, rng.normal(size=(n_nb, 2))])
    ob = ring(n_ob)
    goal = rng.normal(size=d)
    ds = np.concatenate([np.linalg.norm(nb[:, :2], axis=1), np.linalg.norm(ob, axis=1)])
    raw = (ds.min() - params.r_safe) / (params.r_sense - params.r_safe) if ds.size else np.inf
    return Observation(goal, nb, ob, raw)


def test_layer_sizes():
    s = layer_sizes(SINGLE)
    assert s["psi"] == [34, 64, 2] and s["phi_robot"] == [2, 64, 16]
    assert layer_sizes(DOUBLE)["phi_robot"][0] == 4


@pytest.mark.parametrize("dynamics", [SINGLE, DOUBLE])
def test_pi_norm_is_capped(dynamics):
    rng = np.random.default_rng(0)
    w = init_weights(3, dynamics)
    for _ in range(200):
        obs = random_observation(rng, dynamics)
        assert np.linalg.norm(forward_pi(obs, w, 0.7)) <= 0.7 + 1e-12


def test_empty_sets_give_finite_action():
    w = init_weights(0)
    obs = Observation([0.5, -0.2], np.zeros((0, 2)), np.zeros((0, 2)))
    u, tape = forward_controller(obs, [0.0, 0.0], w, SafetyParams())
    assert np.all(np.isfinite(u))
    assert tape.alpha == pytest.approx(0.99)


@pytest.mark.parametrize("dynamics", [SINGLE, DOUBLE])
def test_permutation_invariance_bit_identical(dynamics):
    rng = np.random.default_rng(1)
    w = init_weights(5, dynamics)
    params = default_params(dynamics)
    for _ in range(100):
        obs = random_observation(rng, dynamics)
        state = np.zeros(2 if dynamics == SINGLE else 4)
        u0, _ = forward_controller(obs, state, w, params)
        p_nb, p_ob = rng.permutation(len(obs.neighbors)), rng.permutation(len(obs.obstacles))
        shuffled = Observation(obs.rel_goal, obs.neighbors[p_nb], obs.obstacles[p_ob], obs.raw_min_h)
        u1, _ = forward_controller(shuffled, state, w, params)
        assert np.array_equal(u0, u1)


def test_batch_mask_matches_unpadded():
    rng = np.random.default_rng(2)
    w = init_weights(1)
    params = SafetyParams()
    obs = random_observation(rng, n_nb=2, n_ob=1)
    pad_nb = np.vstack([obs.neighbors, [[9.0, 9.0]]])
    pad_ob = np.vstack([obs.obstacles, [[9.0, 9.0], [8.0, 8.0]]])
    x = BatchInput(obs.rel_goal[None], pad_nb[None], pad_ob[None], np.array([[1, 1, 0]], bool),
                   np.array([[1, 0, 0]], bool))
    u_pad, _ = forward_controller_batch(w, x, params)
    u, _ = forward_controller(obs, [0, 0], w, params)
    assert np.allclose(u_pad[0], u, atol=1e-12)


def _loss(w, x, target, params, mode):
    if mode == END_TO_END:
        u, _ = forward_controller_batch(w, x, params)
    else:
        from glas.policy import forward_pi_batch
        u, _ = forward_pi_batch(w, x, params.pi_max)
    return float(np.mean((u - target) ** 2))


@pytest.mark.parametrize("dynamics", [SINGLE, DOUBLE])
@pytest.mark.parametrize("mode", [END_TO_END, TWO_STAGE])
def test_weight_gradient_matches_finite_differences(dynamics, mode):
    from glas.training import Batch, batch_loss_and_grad

    rng = np.random.default_rng(4)
    params = default_params(dynamics, k_c=0.1)
    w = init_weights(7, dynamics, hidden=6, latent=3)
    obs = [random_observation(rng, dynamics, n_nb=2, n_ob=1, params=params) for _ in range(5)]
    x = BatchInput(np.stack([o.rel_goal for o in obs]), np.stack([o.neighbors for o in obs]),
                   np.stack([o.obstacles for o in obs]))
    target = rng.normal(size=(5, 2))
    _, grads = batch_loss_and_grad(w, Batch(0, (2, 1), x, target), mode, params)
    g = grads.to_vector()
    theta = w.to_vector()
    h = 1e-6
    fd = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        fd[k] = (_loss(w.from_vector(theta + e), x, target, params, mode)
                 - _loss(w.from_vector(theta - e), x, target, params, mode)) / (2 * h)
    assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def test_tape_backward_matches_batch_backward():
    rng = np.random.default_rng(3)
    w = init_weights(2)
    params = SafetyParams()
    obs = random_observation(rng, n_nb=3, n_ob=2)
    u, tape = forward_controller(obs, [0, 0], w, params)
    g1 = tape.backward([1.0, -0.5]).to_vector()
    from glas.policy import _single_batch
    u2, cache = forward_controller_batch(w, _single_batch(obs), params, raw_min_h=np.array([obs.raw_min_h]))
    g2 = backward_controller_batch(w, cache, np.array([[1.0, -0.5]])).to_vector()
    assert np.array_equal(u, u2[0]) and np.allclose(g1, g2)


def test_unknown_mode():
    with pytest.raises(ValueError):
        forward_controller(Observation([1, 0], np.zeros((0, 2)), np.zeros((0, 2))), [0, 0], init_weights(0),
                           SafetyParams(), mode="other")


def test_weights_round_trip_is_exact(tmp_path):
    w = init_weights(9, DOUBLE, hidden=8, latent=4)
    path = tmp_path / "w.json"
    save_weights(w, path)
    back = load_weights(path, DOUBLE)
    assert np.array_equal(back.to_vector(), w.to_vector())
    doc = json.loads(path.read_text())
    assert [b["name"] for b in doc["blocks"]] == ["phi_obstacle", "rho_obstacle", "phi_robot", "rho_robot", "psi"]


def test_weights_dynamics_mismatch(tmp_path):
    path = tmp_path / "w.json"
    save_weights(init_weights(0, SINGLE), path)
    with pytest.raises(WeightsFormatError, match="shape mismatch"):
        load_weights(path, DOUBLE)


@pytest.mark.parametrize("edit", ["format", "version", "shape", "garbage"])
def test_malformed_weights(tmp_path, edit):
    path = tmp_path / "w.json"
    save_weights(init_weights(0), path)
    doc = json.loads(path.read_text())
    if edit == "format":
        doc["format"] = "other"
    elif edit == "version":
        doc["version"] = 99
    elif edit == "shape":
        doc["blocks"][0]["shapes"][0] = [3, 64]
        doc["blocks"][0]["values"][0] = [0.0] * 192
    text = "not json" if edit == "garbage" else json.dumps(doc)
    path.write_text(text)
    with pytest.raises(WeightsFormatError):
        load_weights(path)
