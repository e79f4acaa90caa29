"""Local observation model and the preprocessing applied before the network.

Layout of an encoded observation (version 1)::

    [rel_goal | neighbour blocks, closest first | obstacle blocks, closest first]

rel_goal and neighbour blocks are 2-vectors (position) for the single integrator
and 4-vectors (position, velocity) for the double integrator; obstacle blocks
are always 2-vectors pointing from the robot to the closest point of the cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import DOUBLE, SINGLE, EnvInstance, obstacle_vectors, robot_vectors, state_dim

ENCODING_VERSION = 1


@dataclass(frozen=True)
class ObsCaps:
    max_neighbors: int = 6
    max_obstacles: int = 6

    def __post_init__(self):
        if self.max_neighbors < 0 or self.max_obstacles < 0:
            raise ValueError("observation caps must be non-negative")


@dataclass(frozen=True, eq=False)
class Observation:
    rel_goal: np.ndarray
    neighbors: np.ndarray
    obstacles: np.ndarray
    raw_min_h: float = math.inf

    def __post_init__(self):
        g = np.asarray(self.rel_goal, dtype=np.float64).reshape(-1)
        if g.size not in (2, 4):
            raise ValueError("rel_goal must have 2 or 4 entries")
        object.__setattr__(self, "rel_goal", g)
        object.__setattr__(self, "neighbors", np.asarray(self.neighbors, dtype=np.float64).reshape(-1, g.size))
        object.__setattr__(self, "obstacles", np.asarray(self.obstacles, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "raw_min_h", float(self.raw_min_h))

    @property
    def dynamics(self) -> str:
        return SINGLE if self.rel_goal.size == 2 else DOUBLE

    @property
    def shape_key(self) -> tuple[int, int]:
        return len(self.neighbors), len(self.obstacles)

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            np.array_equal(self.rel_goal, other.rel_goal)
            and np.array_equal(self.neighbors, other.neighbors)
            and np.array_equal(self.obstacles, other.obstacles)
            and self.raw_min_h == other.raw_min_h
        )


@dataclass
class BatchObservation:
    """Padded observations of every robot at one instant.

    Rows of ``neighbors``/``obstacles`` are closest first; padding rows are zero
    and masked out.
    """

    rel_goal: np.ndarray        # (n, 2|4)
    neighbors: np.ndarray       # (n, kV, 2|4)
    neighbor_mask: np.ndarray   # (n, kV) bool
    neighbor_index: np.ndarray  # (n, kV) robot index, -1 for padding
    obstacles: np.ndarray       # (n, kO, 2)
    obstacle_mask: np.ndarray   # (n, kO) bool
    obstacle_index: np.ndarray  # (n, kO) row into the sorted obstacle list, -1 for padding
    raw_min_h: np.ndarray       # (n,)

    def row(self, i: int) -> Observation:
        return Observation(
            self.rel_goal[i],
            self.neighbors[i][self.neighbor_mask[i]],
            self.obstacles[i][self.obstacle_mask[i]],
            self.raw_min_h[i],
        )


def h_values(dist, r_safe: float, r_sense: float):
    return (dist - r_safe) / (r_sense - r_safe)


def scale_goal(e: np.ndarray, r_sense: float) -> np.ndarray:
    """Shrink the position block of ``e`` to at most ``r_sense``; velocity block untouched."""
    e = np.array(e, dtype=np.float64)
    pos = e[..., :2]
    n = np.linalg.norm(pos, axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        alpha = np.where(n > r_sense, r_sense / np.where(n > 0, n, 1.0), 1.0)
    e[..., :2] = pos * alpha
    return e


def _sorted_obstacles(obstacles: np.ndarray) -> np.ndarray:
    obstacles = np.asarray(obstacles, dtype=np.int64).reshape(-1, 2)
    if len(obstacles) == 0:
        return obstacles
    order = np.lexsort((obstacles[:, 1], obstacles[:, 0]))
    return obstacles[order]


def observe_all(states, env: EnvInstance, params, caps: ObsCaps = ObsCaps()) -> BatchObservation:
    """Observations of all robots in one vectorised pass.

    Ties in distance are broken by robot index, and for obstacles by the
    lexicographic order of the cell corner.
    """
    states = np.asarray(states, dtype=np.float64)
    n = len(states)
    d = state_dim(env.dynamics)
    pos = states[:, :2]
    obstacles = _sorted_obstacles(env.obstacles)

    rel_goal = scale_goal(env.goals - states, params.r_sense) if n else np.zeros((0, d))

    rv = robot_vectors(pos)
    rdist = np.linalg.norm(rv, axis=-1)
    rdist[np.arange(n), np.arange(n)] = np.inf
    rdist[rdist > params.r_sense] = np.inf
    ov = obstacle_vectors(pos, obstacles) if len(obstacles) else np.zeros((n, 0, 2))
    odist = np.linalg.norm(ov, axis=-1)
    odist[odist > params.r_sense] = np.inf

    dmin = np.full(n, np.inf)
    if n > 1:
        dmin = np.minimum(dmin, rdist.min(axis=1))
    if len(obstacles):
        dmin = np.minimum(dmin, odist.min(axis=1))
    raw_min_h = np.where(np.isfinite(dmin), h_values(dmin, params.r_safe, params.r_sense), np.inf)

    kv = min(caps.max_neighbors, n)
    rorder = np.argsort(rdist, axis=1, kind="stable")[:, :kv]
    rsel = np.take_along_axis(rdist, rorder, axis=1)
    nmask = np.isfinite(rsel)
    rel_states = states[None, :, :] - states[:, None, :]
    nbrs = np.take_along_axis(rel_states, rorder[:, :, None], axis=1)
    nbrs = np.where(nmask[:, :, None], nbrs, 0.0)
    nidx = np.where(nmask, rorder, -1)

    ko = min(caps.max_obstacles, len(obstacles))
    oorder = np.argsort(odist, axis=1, kind="stable")[:, :ko]
    osel = np.take_along_axis(odist, oorder, axis=1)
    omask = np.isfinite(osel)
    obs = np.take_along_axis(ov, oorder[:, :, None], axis=1)
    obs = np.where(omask[:, :, None], obs, 0.0)
    oidx = np.where(omask, oorder, -1)

    return BatchObservation(rel_goal, nbrs, nmask, nidx, obs, omask, oidx, raw_min_h)


def neighbor_sets(i: int, states, env: EnvInstance, r_sense: float):
    """Robot indices and obstacle cells within ``r_sense`` of robot ``i``, closest first."""
    states = np.asarray(states, dtype=np.float64)
    if not 0 <= i < len(states):
        raise IndexError(f"robot index {i} out of range")
    p = states[i, :2]
    rd = np.linalg.norm(states[:, :2] - p, axis=1)
    rd[i] = np.inf
    robots = np.flatnonzero(rd <= r_sense)
    robots = robots[np.argsort(rd[robots], kind="stable")]
    cells = _sorted_obstacles(env.obstacles)
    if len(cells) == 0:
        return robots, cells
    od = np.linalg.norm(obstacle_vectors(p[None], cells)[0], axis=-1)
    keep = np.flatnonzero(od <= r_sense)
    keep = keep[np.argsort(od[keep], kind="stable")]
    return robots, cells[keep]


def observe(i: int, states, env: EnvInstance, params, caps: ObsCaps = ObsCaps()) -> Observation:
    states = np.asarray(states, dtype=np.float64)
    if not 0 <= i < len(states):
        raise IndexError(f"robot index {i} out of range")
    return observe_all(states, env, params, caps).row(i)


def encode(obs: Observation) -> tuple[np.ndarray, tuple[int, int]]:
    vec = np.concatenate([obs.rel_goal, obs.neighbors.reshape(-1), obs.obstacles.reshape(-1)])
    return vec, obs.shape_key


def decode(vec, shape: tuple[int, int], dynamics: str, params=None) -> Observation:
    """Inverse of :func:`encode`.

    ``raw_min_h`` is not part of the layout; it is recovered as the minimum h
    over the listed entries when ``params`` is given (exact whenever the caps
    are at least one, since truncation keeps the closest entries).
    """
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    d = state_dim(dynamics)
    n_v, n_o = shape
    if vec.size != d + n_v * d + 2 * n_o:
        raise ValueError(f"encoded length {vec.size} does not match shape {shape}")
    rel_goal = vec[:d]
    nbrs = vec[d:d + n_v * d].reshape(n_v, d)
    obs = vec[d + n_v * d:].reshape(n_o, 2)
    raw = math.inf
    if params is not None:
        raw = min_listed_h(nbrs, obs, params)
    return Observation(rel_goal, nbrs, obs, raw)


def min_listed_h(neighbors, obstacles, params) -> float:
    dists = []
    if len(neighbors):
        dists.append(np.linalg.norm(np.asarray(neighbors)[:, :2], axis=1))
    if len(obstacles):
        dists.append(np.linalg.norm(np.asarray(obstacles), axis=1))
    if not dists:
        return math.inf
    d = np.concatenate(dists)
    d = d[d <= params.r_sense]
    if d.size == 0:
        return math.inf
    return float(h_values(d.min(), params.r_safe, params.r_sense))
