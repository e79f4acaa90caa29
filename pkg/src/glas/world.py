"""Workspace model: bounds, unit-square grid obstacles, robot starts and goals."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SINGLE = "single"
DOUBLE = "double"
DYNAMICS = (SINGLE, DOUBLE)

# defaults shared with SafetyParams
R_SAFE = 0.15
R_SENSE = 3.0
DELTA_R = 0.05


class InstanceInfeasible(RuntimeError):
    """Random instance generation ran out of retries."""


def state_dim(dynamics: str) -> int:
    if dynamics == SINGLE:
        return 2
    if dynamics == DOUBLE:
        return 4
    raise ValueError(f"unknown dynamics kind {dynamics!r}")


@dataclass(frozen=True, eq=False)
class EnvInstance:
    """A planar multi-robot instance.

    ``obstacles`` holds integer lower-left corners of 1 m unit squares, shape (m, 2).
    ``starts``/``goals`` are (n, 2) positions for the single integrator and
    (n, 4) position+velocity rows for the double integrator.
    """

    bounds: tuple[float, float, float, float]
    obstacles: np.ndarray
    starts: np.ndarray
    goals: np.ndarray
    dynamics: str = SINGLE

    def __post_init__(self):
        obstacles = np.asarray(self.obstacles, dtype=np.int64).reshape(-1, 2)
        d = state_dim(self.dynamics)
        starts = np.asarray(self.starts, dtype=np.float64).reshape(-1, d)
        goals = np.asarray(self.goals, dtype=np.float64).reshape(-1, d)
        if len(starts) != len(goals):
            raise ValueError("starts and goals differ in length")
        if not (np.all(np.isfinite(starts)) and np.all(np.isfinite(goals))):
            raise ValueError("non-finite start or goal")
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        object.__setattr__(self, "obstacles", obstacles)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "goals", goals)

    @property
    def n_robots(self) -> int:
        return len(self.starts)

    def __eq__(self, other):
        if not isinstance(other, EnvInstance):
            return NotImplemented
        return self.to_json() == other.to_json()

    def to_dict(self) -> dict:
        return {
            "bounds": list(self.bounds),
            "obstacles": self.obstacles.tolist(),
            "starts": self.starts.tolist(),
            "goals": self.goals.tolist(),
            "dynamics": self.dynamics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EnvInstance":
        try:
            dynamics = d.get("dynamics", SINGLE)
            k = state_dim(dynamics)
            starts = [list(s) for s in d["starts"]]
            goals = [list(g) for g in d["goals"]]
            # position-only rows are accepted for double integrator files
            if k == 4:
                starts = [s + [0.0, 0.0] if len(s) == 2 else s for s in starts]
                goals = [g + [0.0, 0.0] if len(g) == 2 else g for g in goals]
            return cls(
                bounds=tuple(d["bounds"]),
                obstacles=np.array(d.get("obstacles", []), dtype=np.int64).reshape(-1, 2),
                starts=np.array(starts, dtype=np.float64).reshape(-1, k),
                goals=np.array(goals, dtype=np.float64).reshape(-1, k),
                dynamics=dynamics,
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed environment: {exc}") from exc


def save_env(env: EnvInstance, path) -> None:
    Path(path).write_text(env.to_json(), encoding="utf-8")


def load_env(path) -> EnvInstance:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    return EnvInstance.from_dict(d)


# --------------------------------------------------------------------------
# geometry


def closest_point_on_obstacle(p, cell) -> np.ndarray:
    """Point of the unit square with lower-left corner ``cell`` nearest to ``p``."""
    lo = np.asarray(cell, dtype=np.float64)
    return np.clip(np.asarray(p, dtype=np.float64), lo, lo + 1.0)


def obstacle_vectors(positions: np.ndarray, obstacles: np.ndarray) -> np.ndarray:
    """Vectors from each position to the closest point of each obstacle, shape (n, m, 2)."""
    p = np.asarray(positions, dtype=np.float64)[:, None, :]
    lo = np.asarray(obstacles, dtype=np.float64)[None, :, :]
    return np.clip(p, lo, lo + 1.0) - p


def robot_vectors(positions: np.ndarray) -> np.ndarray:
    """``out[i, j] = p_j - p_i``, shape (n, n, 2)."""
    p = np.asarray(positions, dtype=np.float64)
    return p[None, :, :] - p[:, None, :]


def min_clearances(positions: np.ndarray, obstacles: np.ndarray) -> tuple[float, float]:
    """Smallest robot-robot centre distance and smallest robot-obstacle distance."""
    p = np.asarray(positions, dtype=np.float64)[:, :2]
    rr = math.inf
    if len(p) > 1:
        d = np.linalg.norm(robot_vectors(p), axis=-1)
        d[np.diag_indices(len(p))] = np.inf
        rr = float(d.min())
    ro = math.inf
    if len(p) and len(obstacles):
        ro = float(np.linalg.norm(obstacle_vectors(p, obstacles), axis=-1).min())
    return rr, ro


def collision_free(states, env: EnvInstance, r_safe: float = R_SAFE) -> bool:
    """True iff every pairwise clearance is strictly greater than ``r_safe``."""
    states = np.asarray(states, dtype=np.float64)
    if len(states) != env.n_robots:
        raise ValueError("state count does not match the environment")
    rr, ro = min_clearances(states, env.obstacles)
    return rr > r_safe and ro > r_safe


# --------------------------------------------------------------------------
# random instances


def _sample_points(rng, n, side, obstacles, clearance, budget):
    lo, hi = clearance, side - clearance
    pts: list[np.ndarray] = []
    attempts = 0
    while len(pts) < n:
        if attempts >= budget:
            raise InstanceInfeasible(
                f"instance infeasible: placed {len(pts)}/{n} robots in {budget} attempts"
            )
        attempts += 1
        p = rng.uniform(lo, hi, size=2)
        if len(obstacles) and np.linalg.norm(obstacle_vectors(p[None], obstacles), axis=-1).min() < clearance:
            continue
        if pts and np.linalg.norm(np.asarray(pts) - p, axis=-1).min() < clearance:
            continue
        pts.append(p)
    return np.asarray(pts).reshape(-1, 2)


def make_random_env(
    n_robots: int,
    obstacle_fraction: float,
    side: int = 8,
    seed: int = 0,
    dynamics: str = SINGLE,
    clearance: float = R_SAFE + DELTA_R,
) -> EnvInstance:
    """Random grid-obstacle instance.

    ``floor(obstacle_fraction * side**2)`` cells are drawn without replacement;
    starts and goals are rejection sampled so every pair of objects is at least
    ``clearance`` apart (100 * n_robots attempts for each set).
    """
    if not 0.0 <= obstacle_fraction <= 0.5:
        raise ValueError("obstacle_fraction must lie in [0, 0.5]")
    if n_robots < 1:
        raise ValueError("n_robots must be at least 1")
    if int(side) != side or side <= 0:
        raise ValueError("side must be a positive integer")
    side = int(side)
    state_dim(dynamics)
    rng = np.random.default_rng(seed)
    n_obs = int(math.floor(obstacle_fraction * side * side + 1e-9))
    cells = np.sort(rng.choice(side * side, size=n_obs, replace=False))
    obstacles = np.stack([cells // side, cells % side], axis=1).astype(np.int64)
    budget = 100 * n_robots
    starts = _sample_points(rng, n_robots, side, obstacles, clearance, budget)
    goals = _sample_points(rng, n_robots, side, obstacles, clearance, budget)
    if dynamics == DOUBLE:
        z = np.zeros((n_robots, 2))
        starts = np.hstack([starts, z])
        goals = np.hstack([goals, z])
    return EnvInstance((0.0, 0.0, float(side), float(side)), obstacles, starts, goals, dynamics)
