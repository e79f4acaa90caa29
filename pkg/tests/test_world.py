import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glas.world import (
    DOUBLE,
    R_SAFE,
    DELTA_R,
    EnvInstance,
    InstanceInfeasible,
    closest_point_on_obstacle,
    collision_free,
    load_env,
    make_random_env,
    min_clearances,
    save_env,
)


def test_empty_instance():
    env = make_random_env(1, 0.0, side=8, seed=0)
    assert len(env.obstacles) == 0
    assert env.n_robots == 1
    for p in (env.starts[0], env.goals[0]):
        assert np.all((p >= 0) & (p <= 8))


def test_obstacle_count_and_determinism():
    a = make_random_env(8, 0.1, side=8, seed=7)
    b = make_random_env(8, 0.1, side=8, seed=7)
    assert len(a.obstacles) == 6
    assert a == b
    assert a.to_json() == b.to_json()
    assert make_random_env(8, 0.1, side=8, seed=8) != a


def test_obstacles_are_distinct_cells():
    env = make_random_env(4, 0.5, side=8, seed=3)
    assert len(env.obstacles) == 32
    assert len({tuple(c) for c in env.obstacles.tolist()}) == 32
    assert env.obstacles.min() >= 0 and env.obstacles.max() < 8


@pytest.mark.parametrize("seed", range(20))
def test_generated_spacing(seed):
    env = make_random_env(8, 0.2, seed=seed)
    for pts in (env.starts, env.goals):
        rr, ro = min_clearances(pts, env.obstacles)
        assert min(rr, ro) >= R_SAFE + DELTA_R
        assert collision_free(pts, env, R_SAFE)


def test_double_integrator_states_have_zero_velocity():
    env = make_random_env(3, 0.1, seed=1, dynamics=DOUBLE)
    assert env.starts.shape == (3, 4)
    assert np.all(env.starts[:, 2:] == 0) and np.all(env.goals[:, 2:] == 0)


def test_infeasible_instance_raises():
    with pytest.raises(InstanceInfeasible, match="instance infeasible"):
        make_random_env(200, 0.5, side=2, seed=0)


@pytest.mark.parametrize("kw", [dict(obstacle_fraction=0.6), dict(n_robots=0), dict(side=2.5)])
def test_bad_arguments(kw):
    args = dict(n_robots=2, obstacle_fraction=0.1, side=8)
    args.update(kw)
    with pytest.raises(ValueError):
        make_random_env(**args)


@pytest.mark.parametrize(
    "p, expected",
    [((3.5, 1.0), (1.0, 1.0)), ((0.5, 2.0), (0.5, 1.0)), ((0.5, 0.5), (0.5, 0.5))],
)
def test_closest_point_examples(p, expected):
    assert np.allclose(closest_point_on_obstacle(p, (0, 0)), expected)


def test_closest_point_is_nearest_dense_oracle():
    rng = np.random.default_rng(0)
    u = np.linspace(0.0, 1.0, 81)
    grid = np.stack(np.meshgrid(u, u), axis=-1).reshape(-1, 2)
    for _ in range(1000):
        p = rng.uniform(-3, 4, size=2)
        cell = rng.integers(-2, 3, size=2)
        q = closest_point_on_obstacle(p, cell)
        best = np.linalg.norm(grid + cell - p, axis=1).min()
        assert np.linalg.norm(q - p) <= best + 1e-12


def test_collision_free_examples():
    env = EnvInstance((0, 0, 8, 8), np.zeros((0, 2)), [[1, 1], [2, 2]], [[3, 3], [4, 4]])
    assert collision_free([[1, 1], [1 + 2 * R_SAFE, 1]], env, R_SAFE)
    assert not collision_free([[1, 1], [1 + R_SAFE, 1]], env, R_SAFE)
    env1 = EnvInstance((0, 0, 8, 8), [[0, 0]], [[2, 2]], [[3, 3]])
    assert not collision_free([[1.0 + R_SAFE / 2, 0.5]], env1, R_SAFE)
    assert collision_free([[1.0 + 2 * R_SAFE, 0.5]], env1, R_SAFE)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=2, max_size=5))
@settings(max_examples=60, deadline=None)
def test_min_clearance_matches_brute_force(points):
    p = np.array(points)
    obs = np.array([[0, 0], [2, 1]])
    rr, ro = min_clearances(p, obs)
    brute_rr = min(np.linalg.norm(p[i] - p[j]) for i in range(len(p)) for j in range(len(p)) if i != j)
    brute_ro = min(np.linalg.norm(closest_point_on_obstacle(q, c) - q) for q in p for c in obs)
    assert rr == pytest.approx(brute_rr)
    assert ro == pytest.approx(brute_ro)


def test_env_file_round_trip(tmp_path):
    env = make_random_env(5, 0.2, seed=11, dynamics=DOUBLE)
    path = tmp_path / "env.json"
    save_env(env, path)
    assert load_env(path) == env
    doc = json.loads(path.read_text())
    assert set(doc) == {"bounds", "obstacles", "starts", "goals", "dynamics"}


def test_env_file_accepts_position_only_double_rows(tmp_path):
    path = tmp_path / "env.json"
    path.write_text(json.dumps({"bounds": [0, 0, 4, 4], "obstacles": [], "starts": [[1, 1]], "goals": [[2, 2]],
                                "dynamics": "double"}))
    env = load_env(path)
    assert env.starts.tolist() == [[1, 1, 0, 0]]


@pytest.mark.parametrize("text", ["{", json.dumps({"bounds": [0, 0, 1, 1]}), json.dumps({"bounds": [0, 0, 1, 1],
                                  "starts": [[0.5, 0.5]], "goals": [], "obstacles": []})])
def test_malformed_env_file(tmp_path, text):
    path = tmp_path / "bad.json"
    path.write_text(text)
    with pytest.raises(ValueError):
        load_env(path)
