"""Closed-loop decentralised rollouts and the success / effort metrics."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .observation import BatchObservation, ObsCaps, Observation, observe_all
from .policy import BatchInput, PolicyWeights, forward_pi_batch
from .safety import SafetyParams, barrier_terms, clamp_norm, safe_control_di, safe_control_si, safety_blend
from .world import DOUBLE, SINGLE, EnvInstance, state_dim

log = logging.getLogger(__name__)

TRAJ_CSV_VERSION = "# glas-trajectory v1"
METRICS_CSV_VERSION = "# glas-metrics v1"

GOAL_TOL = 0.05
VEL_TOL = 0.05
DT = 0.01
MAX_DT = 0.05

COLLISION = "collision"
TIMEOUT = "timeout"
NONFINITE = "nonfinite"


class NonFiniteState(RuntimeError):
    pass


# --------------------------------------------------------------------------
# policies: callables (batch observation, states, env, params) -> pi, shape (n, 2)


def linear_goal_term(e, params: SafetyParams) -> np.ndarray:
    """``K e`` with ``K = k_p I`` (single) or ``[k_p I, k_v I]`` (double)."""
    e = np.asarray(e, dtype=np.float64)
    out = params.k_p * e[..., :2]
    if e.shape[-1] == 4:
        out = out + params.k_v * e[..., 2:4]
    return out


class BarrierPolicy:
    """Linear feedback to the goal in place of the network, capped at ``pi_max``."""

    name = "barrier"

    def __call__(self, bobs: BatchObservation, states, env: EnvInstance, params: SafetyParams):
        lin = linear_goal_term(env.goals - states, params)
        return clamp_norm(lin, params.pi_max)[0]


class NetworkPolicy:
    def __init__(self, weights: PolicyWeights, name: str = "network"):
        self.weights = weights
        self.name = name

    def __call__(self, bobs: BatchObservation, states, env: EnvInstance, params: SafetyParams):
        x = BatchInput(bobs.rel_goal, bobs.neighbors, bobs.obstacles, bobs.neighbor_mask, bobs.obstacle_mask)
        pi, _ = forward_pi_batch(self.weights, x, params.pi_max)
        return pi


def barrier_baseline(obs: Observation, state, params: SafetyParams, goal=None) -> np.ndarray:
    """Blended action of the barrier baseline for one robot.

    ``K e`` uses the unscaled goal error: pass ``goal`` explicitly, otherwise it
    is read from ``obs.rel_goal`` (identical whenever the goal lies within
    ``r_sense``).
    """
    state = np.asarray(state, dtype=np.float64)
    e = obs.rel_goal if goal is None else np.asarray(goal, dtype=np.float64) - state
    pi = clamp_norm(linear_goal_term(e, params), params.pi_max)[0]
    if params.dynamics == SINGLE:
        ev = safe_control_si(obs, pi, params)
    else:
        ev = safe_control_di(obs, state[2:4], pi, params)
    u = ev.alpha * pi + (1.0 - ev.alpha) * ev.b
    if params.clamp_u:
        u = clamp_norm(u, params.u_max)[0]
    return u


def controller_step(policy, states, env: EnvInstance, params: SafetyParams, caps: ObsCaps):
    """Observe, evaluate the policy and blend for every robot at once."""
    bobs = observe_all(states, env, params, caps)
    pi = np.asarray(policy(bobs, states, env, params), dtype=np.float64).reshape(-1, 2)
    vel = states[:, 2:4] if params.dynamics == DOUBLE else None
    terms = barrier_terms(bobs.neighbors[..., :2], bobs.neighbor_mask, bobs.obstacles, bobs.obstacle_mask, params, vel)
    res = safety_blend(pi, terms, bobs.raw_min_h, params, vel)
    u = res["u"]
    clamped = np.zeros(len(u), bool)
    if params.clamp_u:
        u, clamped = clamp_norm(u, params.u_max)
    return u, res["alpha"], bobs.raw_min_h, clamped


# --------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutResult:
    t: np.ndarray            # (T,)
    states: np.ndarray       # (T, n, 2|4)
    actions: np.ndarray      # (T, n, 2)
    alpha: np.ndarray        # (T, n)
    min_h: np.ndarray        # (T, n)
    goals: np.ndarray
    dynamics: str
    collided: np.ndarray     # (n,) bool
    nonfinite: bool = False
    clamped_steps: int = 0
    success: np.ndarray = field(default=None)
    reasons: list = field(default_factory=list)
    r_s: int = 0
    r_p: float = 0.0
    goal_tol: float = GOAL_TOL
    vel_tol: float = VEL_TOL

    @property
    def n_robots(self) -> int:
        return self.states.shape[1]

    def min_clearance(self, params: SafetyParams) -> float:
        """Smallest logged clearance over time, robots and obstacles (metres)."""
        if self.min_h.size == 0:
            return math.inf
        return float(np.min(self.min_h)) * (params.r_sense - params.r_safe) + params.r_safe


def _reached(states, goals, dynamics, goal_tol, vel_tol):
    ok = np.linalg.norm(states[..., :2] - goals[..., :2], axis=-1) < goal_tol
    if dynamics == DOUBLE:
        ok &= np.linalg.norm(states[..., 2:4], axis=-1) < vel_tol
    return ok


def rollout(
    env: EnvInstance,
    policy,
    params: SafetyParams,
    dt: float = DT,
    t_f: float = 30.0,
    caps: ObsCaps = ObsCaps(),
    goal_tol: float = GOAL_TOL,
    vel_tol: float = VEL_TOL,
    early_exit: bool = True,
) -> RolloutResult:
    """Synchronous explicit-Euler rollout of ``policy`` blended with the barrier."""
    if not 0 < dt <= MAX_DT:
        raise ValueError(f"dt must lie in (0, {MAX_DT}] s")
    if not math.isfinite(t_f) or t_f < 0:
        raise ValueError("t_f must be finite and non-negative")
    if params.dynamics != env.dynamics:
        raise ValueError("safety params and environment disagree on the dynamics kind")
    n = env.n_robots
    d = state_dim(env.dynamics)
    n_steps = int(round(t_f / dt))
    states = env.starts.copy()
    ts, xs, us, als, mhs = [], [], [], [], []
    collided = np.zeros(n, bool)
    reached = np.zeros(n, bool)
    nonfinite = False
    clamped_steps = 0
    for k in range(n_steps + 1):
        if n:
            u, alpha, min_h, clamped = controller_step(policy, states, env, params, caps)
        else:
            u, alpha, min_h, clamped = np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros(0, bool)
        clamped_steps += int(clamped.any())
        ts.append(k * dt)
        xs.append(states.copy())
        us.append(u)
        als.append(alpha)
        mhs.append(min_h)
        collided |= min_h <= 0.0
        reached |= _reached(states, env.goals, env.dynamics, goal_tol, vel_tol)
        if k == n_steps or (early_exit and np.all(reached | collided)):
            break
        if d == 2:
            states = states + dt * u
        else:
            pos = states[:, :2] + dt * states[:, 2:4]
            vel = states[:, 2:4] + dt * u
            states = np.hstack([pos, vel])
        if not np.all(np.isfinite(states)):
            nonfinite = True
            log.error("non-finite state at t=%.3f; rollout aborted", (k + 1) * dt)
            break
    if clamped_steps:
        log.warning("u_max clamping was active in %d steps; the safety guarantee does not hold", clamped_steps)
    res = RolloutResult(
        t=np.asarray(ts),
        states=np.asarray(xs).reshape(len(ts), n, d),
        actions=np.asarray(us).reshape(len(ts), n, 2),
        alpha=np.asarray(als).reshape(len(ts), n),
        min_h=np.asarray(mhs).reshape(len(ts), n),
        goals=env.goals.copy(),
        dynamics=env.dynamics,
        collided=collided,
        nonfinite=nonfinite,
        clamped_steps=clamped_steps,
        goal_tol=goal_tol,
        vel_tol=vel_tol,
    )
    res.success = success_of(res, goal_tol, vel_tol)
    res.reasons = [
        None if s else (NONFINITE if nonfinite else COLLISION if c else TIMEOUT)
        for s, c in zip(res.success, collided)
    ]
    res.r_s = int(res.success.sum())
    res.r_p = effort_of(res)
    return res


def success_of(result: RolloutResult, goal_tol: float = GOAL_TOL, vel_tol: float = VEL_TOL) -> np.ndarray:
    """Per-robot success: reached the goal at some logged time and never collided."""
    if result.n_robots == 0:
        return np.zeros(0, bool)
    reached = _reached(result.states, result.goals[None], result.dynamics, goal_tol, vel_tol).any(axis=0)
    collided = (result.min_h <= 0.0).any(axis=0) | result.collided
    ok = reached & ~collided
    if result.nonfinite:
        ok[:] = False
    return ok


def effort_of(result: RolloutResult) -> float:
    """Trapezoidal integral of |u| over time, summed over successful robots."""
    if result.n_robots == 0 or result.success is None or not result.success.any() or len(result.t) < 2:
        return 0.0
    mags = np.linalg.norm(result.actions[:, result.success, :], axis=-1)
    return float(np.trapezoid(mags, result.t, axis=0).sum())


def write_trajectory_csv(result: RolloutResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(TRAJ_CSV_VERSION + "\n")
        w = csv.writer(f)
        w.writerow(["robot", "t", "x", "y", "vx", "vy", "ux", "uy", "alpha", "min_h"])
        T, n, d = result.states.shape
        for i in range(n):
            for k in range(T):
                s = result.states[k, i]
                vx, vy = (s[2], s[3]) if d == 4 else (result.actions[k, i, 0], result.actions[k, i, 1])
                w.writerow([i, repr(float(result.t[k])), repr(float(s[0])), repr(float(s[1])), repr(float(vx)),
                            repr(float(vy)), repr(float(result.actions[k, i, 0])),
                            repr(float(result.actions[k, i, 1])), repr(float(result.alpha[k, i])),
                            repr(float(result.min_h[k, i]))])


# --------------------------------------------------------------------------
# suites


@dataclass
class SuiteRow:
    policy: str
    instance: int
    n_robots: int
    obstacle_frac: float
    r_s: int
    r_p: float
    wall_ms: float
    success: np.ndarray = field(repr=False, default=None)


def evaluate_suite(
    instances: list[EnvInstance],
    policies: list[tuple[str, object]],
    params: SafetyParams,
    dt: float = DT,
    t_f=30.0,
    caps: ObsCaps = ObsCaps(),
    obstacle_fracs: list[float] | None = None,
    time_source=time.perf_counter,
) -> list[SuiteRow]:
    """Roll out every policy on every instance.

    ``t_f`` is a number or a per-instance list. ``obstacle_fracs`` labels the
    rows; by default it is derived from the obstacle count and workspace area.
    """
    rows = []
    for k, env in enumerate(instances):
        tf = t_f[k] if isinstance(t_f, (list, tuple, np.ndarray)) else t_f
        if obstacle_fracs is not None:
            frac = obstacle_fracs[k]
        else:
            xmin, ymin, xmax, ymax = env.bounds
            frac = len(env.obstacles) / max((xmax - xmin) * (ymax - ymin), 1.0)
        for name, pol in policies:
            t0 = time_source()
            res = rollout(env, pol, params, dt=dt, t_f=tf, caps=caps)
            wall = (time_source() - t0) * 1e3
            rows.append(SuiteRow(name, k, env.n_robots, float(frac), res.r_s, res.r_p, wall, res.success))
    return rows


def write_metrics_csv(rows: list[SuiteRow], path, include_wall: bool = True, extra_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(METRICS_CSV_VERSION + "\n")
        if extra_comment:
            f.write(f"# {extra_comment}\n")
        w = csv.writer(f)
        w.writerow(["policy", "instance", "n_robots", "obstacle_frac", "r_s", "r_p", "wall_ms"])
        for r in rows:
            wall = f"{r.wall_ms:.3f}" if include_wall else "nan"
            w.writerow([r.policy, r.instance, r.n_robots, repr(r.obstacle_frac), r.r_s, repr(r.r_p), wall])


def aggregate(rows: list[SuiteRow]) -> list[dict]:
    """Success fraction and mean effort per (policy, n_robots, obstacle_frac) bucket."""
    buckets: dict[tuple, list[SuiteRow]] = {}
    for r in rows:
        buckets.setdefault((r.policy, r.n_robots, round(r.obstacle_frac, 6)), []).append(r)
    out = []
    for (pol, n, frac), rs in sorted(buckets.items()):
        total = sum(r.n_robots for r in rs)
        out.append({
            "policy": pol,
            "n_robots": n,
            "obstacle_frac": frac,
            "cases": len(rs),
            "success_frac": (sum(r.r_s for r in rs) / total) if total else 1.0,
            "mean_r_p": float(np.mean([r.r_p for r in rs])),
        })
    return out
