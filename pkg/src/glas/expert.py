"""Centralised demonstration planner and dataset extraction.

The planner is prioritised space-time A* (priority = robot index) on a 0.25 m
lattice, 8-connected plus wait, one move per 0.25 s step. Each robot's lattice
path is shortcut against obstacles and the already planned robots, retimed to
constant speed where that stays conflict free, and finally the whole plan is
slowed down by one fixed factor so that no action exceeds ``u_max``. For the
double integrator the waypoints are interpolated by a clamped cubic spline
(zero velocity at both ends) and the acceleration becomes the action.

All piecewise-linear plans keep their breakpoints on a fine time grid
(``SUBSTEPS`` per lattice step), so robot-robot clearance checks are exact.
"""
from __future__ import annotations

import heapq
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .observation import Observation, ObsCaps, observe_all
from .world import DOUBLE, SINGLE, EnvInstance, InstanceInfeasible, make_random_env, min_clearances, state_dim

log = logging.getLogger(__name__)

GRID = 0.25
STEP = 0.25
SUBSTEPS = 5
DT_SAMPLE = 0.5

DATASET_MAGIC = b"GLASDS01"
_DYN_CODE = {SINGLE: 1, DOUBLE: 2}
_CODE_DYN = {v: k for k, v in _DYN_CODE.items()}


class PlanningError(RuntimeError):
    """Instance unsolved; callers resample the environment."""


class _RobotFailed(PlanningError):
    def __init__(self, robot: int):
        super().__init__(f"robot {robot} unsolved")
        self.robot = robot


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    grid: float = GRID
    step: float = STEP
    robot_clearance: float = 0.35
    obstacle_clearance: float = 0.25
    max_steps: int = 240
    node_budget: int = 5000
    priority_retries: int = 8
    oversample: int = 10


# --------------------------------------------------------------------------
# trajectories


@dataclass
class RobotPath:
    """Position as a function of time; held constant outside the knot range."""

    t: np.ndarray              # knot times
    p: np.ndarray              # knot positions (K, 2)
    spline: CubicSpline | None = None

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    def position(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        if self.spline is not None:
            return self.spline(np.clip(ts, self.t[0], self.t[-1]))
        return np.stack([np.interp(ts, self.t, self.p[:, k]) for k in range(2)], axis=-1)

    def velocity(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        inside = ((ts >= self.t[0]) & (ts < self.t[-1]))[..., None]
        if self.spline is not None:
            v = self.spline(np.clip(ts, self.t[0], self.t[-1]), 1)
            return np.where(inside, v, 0.0)
        seg = np.clip(np.searchsorted(self.t, ts, side="right") - 1, 0, len(self.t) - 2)
        dt = self.t[seg + 1] - self.t[seg]
        v = (self.p[seg + 1] - self.p[seg]) / np.where(dt > 0, dt, 1.0)[..., None]
        return np.where(inside, v, 0.0)

    def acceleration(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        if self.spline is None:
            return np.zeros(ts.shape + (2,))
        inside = ((ts >= self.t[0]) & (ts < self.t[-1]))[..., None]
        return np.where(inside, self.spline(np.clip(ts, self.t[0], self.t[-1]), 2), 0.0)

    def scaled(self, factor: float) -> "RobotPath":
        """Same path traversed ``factor`` times slower."""
        t = self.t * factor
        spline = None
        if self.spline is not None:
            spline = CubicSpline(t, self.p, bc_type="clamped")
        return RobotPath(t, self.p.copy(), spline)


@dataclass
class TrajectorySet:
    paths: list[RobotPath]
    dynamics: str
    dt_sample: float = DT_SAMPLE
    time_scale: float = 1.0

    @property
    def n_robots(self) -> int:
        return len(self.paths)

    @property
    def duration(self) -> float:
        """Plan horizon, rounded up to whole sample intervals so the last sample is at the goals."""
        raw = max((p.duration for p in self.paths), default=0.0)
        return math.ceil(raw / self.dt_sample - 1e-9) * self.dt_sample

    def sample_times(self, dt: float | None = None) -> np.ndarray:
        dt = self.dt_sample if dt is None else dt
        n = int(math.floor(self.duration / dt + 1e-9))
        return np.arange(n + 1) * dt

    def states(self, ts) -> np.ndarray:
        """Joint states at ``ts``, shape (T, n, 2|4)."""
        ts = np.asarray(ts, dtype=np.float64)
        pos = np.stack([p.position(ts) for p in self.paths], axis=1) if self.paths else np.zeros((len(ts), 0, 2))
        if self.dynamics == SINGLE:
            return pos
        vel = np.stack([p.velocity(ts) for p in self.paths], axis=1) if self.paths else np.zeros((len(ts), 0, 2))
        return np.concatenate([pos, vel], axis=-1)

    def actions(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        if not self.paths:
            return np.zeros((len(ts), 0, 2))
        if self.dynamics == SINGLE:
            return np.stack([p.velocity(ts) for p in self.paths], axis=1)
        return np.stack([p.acceleration(ts) for p in self.paths], axis=1)

    def samples(self, dt: float | None = None):
        """``(t, states, actions)`` on a uniform grid (``dt_sample`` by default)."""
        ts = self.sample_times(dt)
        return ts, self.states(ts), self.actions(ts)


# --------------------------------------------------------------------------
# geometry helpers


def _point_box_dist(p, lo):
    q = np.clip(p, lo, lo + 1.0)
    return np.linalg.norm(q - p, axis=-1)


def segment_box_distances(a, b, lo) -> np.ndarray:
    """Exact distances between segments ``a[e] b[e]`` and unit boxes ``lo[m]``; shape (E, M).

    Zero when a segment crosses a box; otherwise the minimum is attained at a
    segment endpoint or a box corner.
    """
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[:, None, :]
    lo = np.asarray(lo, dtype=np.float64)[None]
    d = b - a
    # Liang-Barsky clip against each box
    t0 = np.zeros(np.broadcast_shapes(a.shape, lo.shape)[:-1])
    t1 = np.ones_like(t0)
    hit = np.ones(t0.shape, bool)
    for k in range(2):
        dk = d[..., k]
        flat = dk == 0.0
        safe = np.where(flat, 1.0, dk)
        ta = (lo[..., k] - a[..., k]) / safe
        tb = (lo[..., k] + 1.0 - a[..., k]) / safe
        inside = (a[..., k] >= lo[..., k]) & (a[..., k] <= lo[..., k] + 1.0)
        hit &= np.where(flat, inside, True)
        t0 = np.where(flat, t0, np.maximum(t0, np.minimum(ta, tb)))
        t1 = np.where(flat, t1, np.minimum(t1, np.maximum(ta, tb)))
    hit &= t0 <= t1
    best = np.minimum(_point_box_dist(a, lo), _point_box_dist(b, lo))
    dd = np.sum(d * d, axis=-1)
    for off in ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)):
        c = lo + off
        s = np.where(dd > 0, np.sum((c - a) * d, axis=-1) / np.where(dd > 0, dd, 1.0), 0.0)
        s = np.clip(s, 0.0, 1.0)
        best = np.minimum(best, np.linalg.norm(a + s[..., None] * d - c, axis=-1))
    return np.where(hit, 0.0, best)


def segment_obstacle_distance(a, b, obstacles: np.ndarray) -> float:
    """Exact distance between segment ab and the union of unit-square cells."""
    if len(obstacles) == 0:
        return math.inf
    return float(segment_box_distances(np.asarray(a)[None], np.asarray(b)[None], obstacles).min())


def linear_min_distance(r0, r1):
    """Min over s in [0, 1] of |r0 + s (r1 - r0)|, broadcast over leading axes."""
    d = r1 - r0
    dd = np.sum(d * d, axis=-1)
    s = np.where(dd > 0, -np.sum(r0 * d, axis=-1) / np.where(dd > 0, dd, 1.0), 0.0)
    s = np.clip(s, 0.0, 1.0)
    return np.linalg.norm(r0 + s[..., None] * d, axis=-1)


# --------------------------------------------------------------------------
# prioritised planning


class _Lattice:
    def __init__(self, env: EnvInstance, cfg: PlannerConfig):
        xmin, ymin, xmax, ymax = env.bounds
        self.cfg = cfg
        self.nx = int(round((xmax - xmin) / cfg.grid)) + 1
        self.ny = int(round((ymax - ymin) / cfg.grid)) + 1
        gx, gy = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        self.coords = np.stack([xmin + gx.ravel() * cfg.grid, ymin + gy.ravel() * cfg.grid], axis=1)
        self.obstacles = np.asarray(env.obstacles, dtype=np.int64).reshape(-1, 2)
        if len(self.obstacles):
            d = np.linalg.norm(
                np.clip(self.coords[:, None], self.obstacles[None], self.obstacles[None] + 1.0) - self.coords[:, None],
                axis=-1,
            ).min(axis=1)
        else:
            d = np.full(len(self.coords), np.inf)
        self.free = d >= cfg.obstacle_clearance - 1e-9
        self.adj = self._adjacency()

    def _adjacency(self) -> list[list[int]]:
        """Neighbour lists of free vertices whose connecting edge keeps the obstacle margin."""
        ix, iy = np.divmod(np.arange(len(self.coords)), self.ny)
        src, dst = [], []
        for dx, dy in ((1, 0), (0, 1), (1, 1), (1, -1)):
            jx, jy = ix + dx, iy + dy
            ok = (jx < self.nx) & (jy >= 0) & (jy < self.ny)
            v = np.flatnonzero(ok)
            w = jx[ok] * self.ny + jy[ok]
            keep = self.free[v] & self.free[w]
            src.append(v[keep])
            dst.append(w[keep])
        src, dst = np.concatenate(src), np.concatenate(dst)
        if len(self.obstacles) and len(src):
            dist = segment_box_distances(self.coords[src], self.coords[dst], self.obstacles).min(axis=1)
            good = dist >= self.cfg.obstacle_clearance - 1e-9
            src, dst = src[good], dst[good]
        adj: list[list[int]] = [[] for _ in range(len(self.coords))]
        for v, w in zip(src.tolist(), dst.tolist()):
            adj[v].append(w)
            adj[w].append(v)
        for lst in adj:
            lst.sort()
        return adj

    def neighbors(self, v):
        return self.adj[v]

    def point_clearance(self, p) -> float:
        if len(self.obstacles) == 0:
            return math.inf
        return float(_point_box_dist(np.asarray(p, dtype=np.float64)[None], self.obstacles).min())

    def segment_ok(self, a, b) -> bool:
        """Clear of obstacles; the margin relaxes to the endpoints' own clearance near starts and goals."""
        if len(self.obstacles) == 0:
            return True
        need = min(self.cfg.obstacle_clearance, self.point_clearance(a), self.point_clearance(b))
        return segment_obstacle_distance(a, b, self.obstacles) >= need - 1e-9

    def links(self, p, radius: float = 0.5) -> list[int]:
        """Free vertices within ``radius`` of ``p`` reachable by a clear straight move, closest first."""
        d = np.linalg.norm(self.coords - p, axis=1)
        d[~self.free] = np.inf
        near = np.flatnonzero(d <= radius)
        near = near[np.argsort(d[near], kind="stable")]
        out = [int(v) for v in near if self.segment_ok(p, self.coords[v])]
        if not out:
            raise PlanningError("instance unsolved: no lattice vertex reachable from a start or goal")
        return out

    def steps_to(self, targets) -> np.ndarray:
        """Lattice step counts to the nearest of ``targets`` (breadth-first, obstacles only)."""
        dist = np.full(len(self.coords), np.inf)
        frontier = list(targets)
        for v in frontier:
            dist[v] = 0
        k = 0
        while frontier:
            k += 1
            nxt = []
            for v in frontier:
                for w in self.neighbors(v):
                    if dist[w] == np.inf:
                        dist[w] = k
                        nxt.append(w)
            frontier = nxt
        return dist


class _Reservations:
    """Fine-grid positions of already planned robots."""

    def __init__(self, horizon_fine: int):
        self.h = horizon_fine
        self.tracks: list[np.ndarray] = []
        self.robots: list[int] = []
        self.stack = np.zeros((0, horizon_fine + 1, 2))

    def add(self, robot: int, fine: np.ndarray):
        self.tracks.append(fine)
        self.robots.append(robot)
        self.stack = np.asarray(self.tracks)

    def window(self, k0: int, k1: int) -> np.ndarray:
        """Positions at fine indices k0..k1 inclusive (held after the horizon)."""
        idx = np.minimum(np.arange(k0, k1 + 1), self.h)
        return self.stack[:, idx, :]

    def clear(self, k0: int, cand: np.ndarray, clearance: float) -> bool:
        """``cand``: (S, L, 2) candidate fine positions starting at index k0; True if all clear."""
        if len(self.tracks) == 0:
            return True
        prior = self.window(k0, k0 + cand.shape[-2] - 1)
        rel = prior[None] - cand[:, None]
        dmin = linear_min_distance(rel[..., :-1, :], rel[..., 1:, :])
        return bool(np.all(dmin >= np.asarray(clearance)[..., None]))

    def clear_many(self, k0: int, cand: np.ndarray, clearance: float) -> np.ndarray:
        if len(self.tracks) == 0:
            return np.ones(len(cand), bool)
        prior = self.window(k0, k0 + cand.shape[-2] - 1)
        rel = prior[None] - cand[:, None]
        dmin = linear_min_distance(rel[..., :-1, :], rel[..., 1:, :])
        ok = dmin >= np.asarray(clearance)[..., None]
        return ok.reshape(len(cand), -1).all(axis=1)

    def last_conflict_step(self, point: np.ndarray, clearance: float) -> int:
        """Last fine index at which some prior robot comes within ``clearance`` of ``point``."""
        if len(self.tracks) == 0:
            return -1
        rel = self.stack - point
        dmin = linear_min_distance(rel[:, :-1], rel[:, 1:])
        bad = np.flatnonzero((dmin < np.asarray(clearance)[..., None]).any(axis=0))
        return int(bad[-1]) + 1 if len(bad) else -1


def _fine_track(times_steps, pos, horizon_fine):
    """Sample a piecewise-linear path (knot times in lattice steps) on the fine grid."""
    kf = np.arange(horizon_fine + 1) / SUBSTEPS
    return np.stack([np.interp(kf, times_steps, pos[:, k]) for k in range(2)], axis=1)


def _astar(lat: _Lattice, res: _Reservations, start, goal, cfg: PlannerConfig, clr):
    START, GOAL = -1, -2
    start_links = lat.links(start)
    goal_links = set(lat.links(goal))
    to_goal = lat.steps_to(goal_links)
    coords = lat.coords

    def pos(node):
        return start if node == START else goal if node == GOAL else coords[node]

    def heur(node):
        if node == GOAL:
            return 0
        if node == START:
            return min(to_goal[v] for v in start_links) + 2
        return to_goal[node] + 1

    if not np.isfinite(heur(START)):
        raise PlanningError("instance unsolved: goal not reachable on the lattice")
    park_after = res.last_conflict_step(goal, clr)
    sub = np.linspace(0.0, 1.0, SUBSTEPS + 1)[:, None]
    counter = 0
    open_heap = [(heur(START), 0, 0, START, 0)]
    parents: dict[tuple[int, int], tuple[int, int] | None] = {(START, 0): None}
    closed = set()
    expansions = 0
    while open_heap:
        f, _, _, node, t = heapq.heappop(open_heap)
        if (node, t) in closed:
            continue
        closed.add((node, t))
        if node == GOAL and t * SUBSTEPS >= park_after:
            path = []
            key = (node, t)
            while key is not None:
                path.append(key)
                key = parents[key]
            return path[::-1], pos
        expansions += 1
        if expansions > cfg.node_budget or t >= cfg.max_steps:
            if expansions > cfg.node_budget:
                break
            continue
        if node == START:
            succ = [START] + start_links
        elif node == GOAL:
            succ = [GOAL]
        else:
            succ = [node] + list(lat.neighbors(node))
            if node in goal_links:
                succ.append(GOAL)
        succ = [s for s in succ if (s, t + 1) not in closed]
        if not succ:
            continue
        p0 = pos(node)
        ends = np.array([pos(s) for s in succ])
        cand = p0 + sub[None] * (ends - p0)[:, None, :]
        ok = res.clear_many(t * SUBSTEPS, cand, clr)
        for s, good in zip(succ, ok):
            if not good:
                continue
            key = (s, t + 1)
            if key in parents and key in closed:
                continue
            counter += 1
            h = heur(s)
            if not np.isfinite(h):
                continue
            # prefer deeper nodes, then geometric progress toward the goal
            q = pos(s)
            eu = math.hypot(q[0] - goal[0], q[1] - goal[1])
            heapq.heappush(open_heap, (t + 1 + h, eu, counter, s, t + 1))
            if key not in parents:
                parents[key] = (node, t)
    raise PlanningError("instance unsolved: space-time search exhausted its node budget")


def _shortcut(times, pts, lat: _Lattice, res: _Reservations, clearance):
    """Greedy farthest-reachable shortcutting of a timed waypoint list (times in steps)."""
    keep = [0]
    i = 0
    n = len(pts)
    while i < n - 1:
        nxt = i + 1
        for j in range(n - 1, i + 1, -1):
            if not lat.segment_ok(pts[i], pts[j]):
                continue
            k0, k1 = int(times[i] * SUBSTEPS), int(times[j] * SUBSTEPS)
            s = np.linspace(0.0, 1.0, k1 - k0 + 1)[:, None]
            cand = (pts[i] + s * (pts[j] - pts[i]))[None]
            if res.clear(k0, cand, clearance):
                nxt = j
                break
        keep.append(nxt)
        i = nxt
    return np.asarray(times)[keep], np.asarray(pts)[keep]


def _retime(times, pts, speed_steps):
    """Constant-speed retiming; durations rounded up to whole fine substeps."""
    new_t = [0.0]
    new_p = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        L = float(np.linalg.norm(b - a))
        if L == 0.0:
            continue
        n_sub = max(1, math.ceil(L / speed_steps * SUBSTEPS - 1e-9))
        new_t.append(new_t[-1] + n_sub / SUBSTEPS)
        new_p.append(b)
    return np.asarray(new_t), np.asarray(new_p)


def _track_clear(res: _Reservations, fine: np.ndarray, clearance) -> bool:
    return res.clear(0, fine[None], clearance)


def _pair_clearance(env, i, others, clearance):
    """Required distance to each planned robot, relaxed to their start and goal spacing."""
    if not others:
        return np.zeros(0)
    o = np.asarray(others)
    ds = np.linalg.norm(env.starts[o, :2] - env.starts[i, :2], axis=1)
    dg = np.linalg.norm(env.goals[o, :2] - env.goals[i, :2], axis=1)
    return np.minimum(clearance, np.minimum(ds, dg) - 1e-9)


def _plan_in_order(env, lat, cfg, order, v_plan):
    hf = (cfg.max_steps + 2) * SUBSTEPS
    res = _Reservations(hf)
    plan_paths = [None] * env.n_robots
    for i in order:
        start, goal = env.starts[i, :2], env.goals[i, :2]
        clr = _pair_clearance(env, i, res.robots, cfg.robot_clearance)
        try:
            nodes, pos = _astar(lat, res, start, goal, cfg, clr)
        except PlanningError as e:
            raise _RobotFailed(i) from e
        times = np.array([t for _, t in nodes], dtype=np.float64)
        pts = np.array([pos(v) for v, _ in nodes])
        times, pts = _shortcut(times, pts, lat, res, clr)
        best_t, best_p = times, pts
        rt, rp = _retime(times, pts, v_plan)
        if rt[-1] <= times[-1]:
            fine = _fine_track(rt, rp, hf)
            parked = res.last_conflict_step(goal, clr) <= rt[-1] * SUBSTEPS
            if parked and _track_clear(res, fine, clr):
                best_t, best_p = rt, rp
        if len(best_t) == 1:
            best_t = np.array([0.0, 1.0 / SUBSTEPS])
            best_p = np.vstack([best_p, best_p])
        res.add(i, _fine_track(best_t, best_p, hf))
        plan_paths[i] = (best_t, best_p)
    return plan_paths


def plan_global(
    env: EnvInstance,
    dt_sample: float = DT_SAMPLE,
    u_max: float = 1.0,
    cfg: PlannerConfig = PlannerConfig(),
    r_safe: float = 0.15,
    delta_r: float = 0.05,
) -> TrajectorySet:
    """Collision-free joint plan for ``env``.

    Raises :class:`PlanningError` when the instance is unsolved (callers
    resample) and ``ValueError`` when the instance violates the start spacing
    ``r_safe + delta_r``.
    """
    n = env.n_robots
    for pts in (env.starts[:, :2], env.goals[:, :2]):
        rr, ro = min_clearances(pts, env.obstacles)
        if min(rr, ro) < r_safe + delta_r - 1e-12:
            raise ValueError("precondition violated: objects closer than r_safe + delta_r at start or goal")
    lat = _Lattice(env, cfg)
    v_plan = cfg.grid * math.sqrt(2.0)  # lattice speed bound, metres per step
    # robots that fail are promoted to the front of the priority order
    order = list(range(n))
    for _ in range(cfg.priority_retries + 1):
        try:
            plan_paths = _plan_in_order(env, lat, cfg, order, v_plan)
            break
        except _RobotFailed as e:
            order.remove(e.robot)
            order.insert(0, e.robot)
    else:
        raise PlanningError("instance unsolved: space-time search exhausted its node budget")

    # plan time is in lattice steps; convert to seconds and slow down uniformly.
    # Start and goal links can be longer than a lattice diagonal.
    v_top = max([v_plan] + [_top_speed(t, p) for t, p in plan_paths])
    scale = cfg.step * max(1.0, (v_top / cfg.step) / u_max)
    paths = [RobotPath(t * scale, p.copy()) for t, p in plan_paths]
    traj = TrajectorySet(paths, env.dynamics, dt_sample, scale / cfg.step)
    if env.dynamics == SINGLE:
        _verify(traj, env, cfg, r_safe)
        return traj
    # splines overshoot around sharp corners; densify the waypoints until the plan verifies
    err = None
    for level in range(4):
        dense = TrajectorySet([_densify(p, level) for p in paths], DOUBLE, dt_sample, traj.time_scale)
        smooth = _smooth_double(dense, env, u_max, cfg, r_safe)
        try:
            _verify(smooth, env, cfg, r_safe)
            return smooth
        except PlanningError as e:
            err = e
    raise err


def _top_speed(t, p) -> float:
    dt = np.diff(t)
    moving = dt > 0
    if not moving.any():
        return 0.0
    return float((np.linalg.norm(np.diff(p, axis=0), axis=1)[moving] / dt[moving]).max())


def _densify(path: RobotPath, level: int) -> RobotPath:
    """Split every segment into 2**level equal pieces."""
    if level == 0:
        return path
    m = 2 ** level
    s = np.arange(m) / m
    t = np.concatenate([a + s * (b - a) for a, b in zip(path.t[:-1], path.t[1:])] + [path.t[-1:]])
    return RobotPath(t, np.stack([np.interp(t, path.t, path.p[:, k]) for k in range(2)], axis=1))


def _smooth_double(traj: TrajectorySet, env, u_max, cfg, r_safe) -> TrajectorySet:
    """Clamped cubic splines through the waypoints, slowed down until |a| <= u_max."""
    paths = []
    for p in traj.paths:
        t, pts = p.t, p.p
        keep = np.concatenate([[True], np.diff(t) > 0])
        paths.append(RobotPath(t[keep], pts[keep], CubicSpline(t[keep], pts[keep], bc_type="clamped")))
    out = TrajectorySet(paths, DOUBLE, traj.dt_sample, traj.time_scale)
    # splines are C2 with piecewise-linear acceleration, so |a| peaks at a knot
    amax = max((float(np.linalg.norm(p.spline(p.t, 2), axis=-1).max()) for p in paths), default=0.0)
    if amax > u_max:
        f = math.sqrt(amax / u_max) * (1.0 + 1e-6)
        out = TrajectorySet([q.scaled(f) for q in paths], DOUBLE, traj.dt_sample, traj.time_scale * f)
    return out


def _verify(traj: TrajectorySet, env: EnvInstance, cfg: PlannerConfig, r_safe: float):
    """Every sample and a 10x oversampled grid must keep clearance above ``r_safe``."""
    if traj.n_robots == 0:
        return
    dt = traj.dt_sample / cfg.oversample
    ts = traj.sample_times(dt)
    ts = np.append(ts, traj.duration)
    pos = traj.states(ts)[..., :2]
    for k in range(len(ts)):
        rr, ro = min_clearances(pos[k], env.obstacles)
        if min(rr, ro) <= r_safe:
            raise PlanningError(f"instance unsolved: plan clearance {min(rr, ro):.3f} m at t={ts[k]:.2f} s")


def solved_instances(n_robots: int, obstacle_fraction: float, count: int, seed0: int = 0, side: int = 8,
                     dynamics: str = SINGLE, u_max: float = 1.0, dt_sample: float = DT_SAMPLE,
                     cfg: PlannerConfig = PlannerConfig(), max_tries: int | None = None):
    """First ``count`` solvable instances from seeds ``seed0, seed0 + 1, ...``.

    Infeasible or unsolved seeds are skipped, which is the deterministic form
    of resampling. Returns ``[(seed, env, trajectories), ...]``.
    """
    out = []
    seed = seed0
    limit = max_tries if max_tries is not None else 20 * count + 100
    while len(out) < count:
        if seed - seed0 >= limit:
            raise PlanningError(f"only {len(out)} of {count} instances solved within {limit} seeds")
        try:
            env = make_random_env(n_robots, obstacle_fraction, side=side, seed=seed, dynamics=dynamics)
            out.append((seed, env, plan_global(env, dt_sample=dt_sample, u_max=u_max, cfg=cfg)))
        except (InstanceInfeasible, PlanningError) as e:
            log.info("seed %d skipped: %s", seed, e)
        seed += 1
    return out


# --------------------------------------------------------------------------
# demonstrations and datasets


@dataclass
class DemoRecord:
    obs: Observation
    action: np.ndarray

    def __eq__(self, other):
        return isinstance(other, DemoRecord) and self.obs == other.obs and np.array_equal(self.action, other.action)


def extract_demos(traj: TrajectorySet, env: EnvInstance, params, caps: ObsCaps = ObsCaps(), dt_sample: float | None = None):
    """One (observation, expert action) record per robot per sample time, time-major."""
    ts, states, actions = traj.samples(dt_sample)
    records = []
    for k in range(len(ts)):
        bobs = observe_all(states[k], env, params, caps)
        for i in range(traj.n_robots):
            records.append(DemoRecord(bobs.row(i), actions[k, i].copy()))
    return records


@dataclass
class Dataset:
    """Records grouped by ``(n_neighbors, n_obstacles)``; arrays are float64."""

    dynamics: str
    groups: dict[tuple[int, int], dict[str, np.ndarray]] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(g["action"]) for g in self.groups.values())

    @classmethod
    def from_records(cls, records, dynamics: str) -> "Dataset":
        d = state_dim(dynamics)
        buckets: dict[tuple[int, int], list[DemoRecord]] = {}
        for r in records:
            buckets.setdefault(r.obs.shape_key, []).append(r)
        groups = {}
        for key in sorted(buckets):
            rs = buckets[key]
            nv, no = key
            groups[key] = {
                "rel_goal": np.array([r.obs.rel_goal for r in rs]).reshape(len(rs), d),
                "neighbors": np.array([r.obs.neighbors for r in rs]).reshape(len(rs), nv, d),
                "obstacles": np.array([r.obs.obstacles for r in rs]).reshape(len(rs), no, 2),
                "action": np.array([r.action for r in rs]).reshape(len(rs), 2),
            }
        return cls(dynamics, groups)

    def records(self, params=None):
        from .observation import min_listed_h

        for key, g in self.groups.items():
            for k in range(len(g["action"])):
                raw = min_listed_h(g["neighbors"][k], g["obstacles"][k], params) if params is not None else math.inf
                yield DemoRecord(Observation(g["rel_goal"][k], g["neighbors"][k], g["obstacles"][k], raw), g["action"][k])

    def split(self, fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Random (train, validation) split inside every shape group."""
        rng = np.random.default_rng(seed)
        train, val = {}, {}
        for key, g in self.groups.items():
            n = len(g["action"])
            perm = rng.permutation(n)
            n_val = int(round(fraction * n))
            vi, ti = np.sort(perm[:n_val]), np.sort(perm[n_val:])
            if len(ti):
                train[key] = {k: a[ti] for k, a in g.items()}
            if len(vi):
                val[key] = {k: a[vi] for k, a in g.items()}
        return Dataset(self.dynamics, train), Dataset(self.dynamics, val)

    def filter(self, keep) -> "Dataset":
        return Dataset(self.dynamics, {k: g for k, g in self.groups.items() if keep(k)})

    def merge(self, other: "Dataset") -> "Dataset":
        if other.dynamics != self.dynamics:
            raise ValueError("cannot merge datasets of different dynamics")
        groups = {k: dict(v) for k, v in self.groups.items()}
        for k, g in other.groups.items():
            if k in groups:
                groups[k] = {n: np.concatenate([groups[k][n], g[n]]) for n in g}
            else:
                groups[k] = dict(g)
        return Dataset(self.dynamics, dict(sorted(groups.items())))


def _iter_records(data):
    if isinstance(data, Dataset):
        for key, g in data.groups.items():
            for k in range(len(g["action"])):
                yield key, g["rel_goal"][k], g["neighbors"][k], g["obstacles"][k], g["action"][k]
    else:
        for r in data:
            yield r.obs.shape_key, r.obs.rel_goal, r.obs.neighbors, r.obs.obstacles, r.action


def write_dataset(records, path, dynamics: str | None = None) -> int:
    """Write records (a list of :class:`DemoRecord` or a :class:`Dataset`); returns the count."""
    if isinstance(records, Dataset):
        dynamics = records.dynamics if dynamics is None else dynamics
    else:
        records = list(records)
        if dynamics is None:
            dynamics = records[0].obs.dynamics if records else SINGLE
    d = state_dim(dynamics)
    body = io.BytesIO()
    count = 0
    for (nv, no), g, nb, ob, a in _iter_records(records):
        if nv > 255 or no > 255:
            raise DatasetFormatError("count overflow: more than 255 neighbours or obstacles in one record")
        if len(g) != d:
            raise DatasetFormatError("record dynamics differ from the dataset header")
        body.write(struct.pack("<BB", nv, no))
        body.write(np.concatenate([g, np.ravel(nb), np.ravel(ob), a]).astype("<f4").tobytes())
        count += 1
    if count > 0xFFFFFFFF:
        raise DatasetFormatError("count overflow: more than 2**32 - 1 records")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<BI", _DYN_CODE[dynamics], count))
        f.write(body.getvalue())
    return count


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 13 or buf[:8] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic, not a dataset file")
    code, count = struct.unpack_from("<BI", buf, 8)
    if code not in _CODE_DYN:
        raise DatasetFormatError(f"{path}: unknown dynamics code {code}")
    dynamics = _CODE_DYN[code]
    d = state_dim(dynamics)
    off = 13
    buckets: dict[tuple[int, int], list[np.ndarray]] = {}
    for _ in range(count):
        if off + 2 > len(buf):
            raise DatasetFormatError(f"{path}: truncated dataset")
        nv, no = buf[off], buf[off + 1]
        off += 2
        n = d + nv * d + 2 * no + 2
        if off + 4 * n > len(buf):
            raise DatasetFormatError(f"{path}: truncated dataset")
        vals = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
        off += 4 * n
        buckets.setdefault((nv, no), []).append(vals)
    if off != len(buf):
        raise DatasetFormatError(f"{path}: {len(buf) - off} trailing bytes after {count} records")
    groups = {}
    for (nv, no) in sorted(buckets):
        arr = np.asarray(buckets[(nv, no)], dtype=np.float64)
        m = len(arr)
        groups[(nv, no)] = {
            "rel_goal": arr[:, :d],
            "neighbors": arr[:, d:d + nv * d].reshape(m, nv, d),
            "obstacles": arr[:, d + nv * d:d + nv * d + 2 * no].reshape(m, no, 2),
            "action": arr[:, -2:],
        }
    return Dataset(dynamics, groups)
