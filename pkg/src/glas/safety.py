"""Analytic barrier potential and the provably safe blend of a learned action.

Relative vectors ``pbar`` point from the robot to the closest point of the other
object. With ``d = |pbar|``::

    h      = (d - r_safe) / (r_sense - r_safe)
    psi    = -sum log h
    grad   = sum pbar / (d (d - r_safe))          # gradient of psi w.r.t. own position
    b_si   = -k_p grad                            # repulsive: <b, pbar> < 0

Everything is written over a leading batch axis with validity masks so the
same code serves single observations, whole swarms in the simulator and
training batches.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .observation import Observation
from .world import DELTA_R, DOUBLE, DYNAMICS, R_SAFE, R_SENSE, SINGLE

EPS_DIV = 1e-9
_H_FLOOR = 1e-300
# alpha's numerator is shrunk by this relative amount so the decrease bound,
# which holds with equality when the blend is active, survives float rounding
ROUND_GUARD = 1e-12


class SafetyViolation(ValueError):
    """An observed object is at or inside the safety radius."""


@dataclass(frozen=True)
class SafetyParams:
    r_sense: float = R_SENSE
    r_safe: float = R_SAFE
    delta_r: float = DELTA_R
    k_p: float = 1.0
    k_v: float = 2.0
    k_c: float = 0.0
    epsilon: float = 0.01
    pi_max: float = 1.0
    u_max: float = 1.0
    dynamics: str = SINGLE
    clamp_u: bool = False

    def __post_init__(self):
        if not 0 < self.r_safe < self.r_sense:
            raise ValueError("need 0 < r_safe < r_sense")
        if not 0 < self.delta_r < self.r_sense - self.r_safe:
            raise ValueError("need 0 < delta_r < r_sense - r_safe")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.k_p <= 0 or self.k_v <= 0 or self.k_c < 0:
            raise ValueError("need k_p > 0, k_v > 0, k_c >= 0")
        if self.pi_max <= 0 or self.u_max <= 0:
            raise ValueError("pi_max and u_max must be positive")
        if self.dynamics not in DYNAMICS:
            raise ValueError(f"unknown dynamics kind {self.dynamics!r}")

    @property
    def h_margin(self) -> float:
        """delta_r expressed in units of h."""
        return self.delta_r / (self.r_sense - self.r_safe)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SafetyParams":
        return cls(**d)


@dataclass(frozen=True)
class SafetyEval:
    b: np.ndarray
    alpha: float
    grad_psi: np.ndarray
    ddt_grad_psi: np.ndarray | None
    min_h: float
    psi: float
    delta_h: float


def default_params(dynamics: str = SINGLE, **overrides) -> SafetyParams:
    """Tuned defaults per dynamics kind.

    Explicit Euler at dt = 0.01 s turns the double-integrator damping term
    stiff near the safety radius, so that kind uses a wider margin and heavier
    velocity damping.
    """
    base = {"dynamics": dynamics}
    if dynamics == DOUBLE:
        base.update(delta_r=0.2, k_p=1.0, k_v=10.0)
    base.update(overrides)
    return SafetyParams(**base)


# --------------------------------------------------------------------------
# batched core


def pair_terms(pbar, mask, params: SafetyParams):
    """Distances, h and the guarded denominator d (d - r_safe); shapes (..., K)."""
    dist = np.linalg.norm(pbar, axis=-1)
    h = (dist - params.r_safe) / (params.r_sense - params.r_safe)
    den = np.maximum(dist * (dist - params.r_safe), EPS_DIV)
    valid = mask & (dist <= params.r_sense)
    return dist, h, den, valid


def _psi_grad(pbar, mask, params):
    dist, h, den, valid = pair_terms(pbar, mask, params)
    psi = -np.sum(np.where(valid, np.log(np.maximum(h, _H_FLOOR)), 0.0), axis=-1)
    grad = np.sum(np.where(valid[..., None], pbar / den[..., None], 0.0), axis=-2)
    min_h = np.min(np.where(valid, h, np.inf), axis=-1, initial=np.inf)
    return psi, grad, min_h, dist, den, valid


def _ddt_terms(pbar, w, dist, den, valid, params):
    """Time derivative of sum pbar/den when pbar moves with velocity ``w``."""
    d = np.maximum(dist, EPS_DIV)
    pw = np.sum(pbar * w, axis=-1)
    coef = (2.0 * dist - params.r_safe) * pw / (d * den * den)
    term = w / den[..., None] - pbar * coef[..., None]
    return np.sum(np.where(valid[..., None], term, 0.0), axis=-2)


def barrier_terms(robots, robot_mask, obstacles, obstacle_mask, params: SafetyParams, vel=None):
    """psi, grad psi, min h over listed entries and (given ``vel``) d/dt grad psi.

    ``robots``: (B, kV, 2) relative positions; ``obstacles``: (B, kO, 2).
    Neighbours are treated as static over the derivative; an obstacle's closest
    point slides along a face, so only the components of ``pbar`` that are
    non-zero change with the robot's motion.
    """
    psi_r, g_r, mh_r, dist_r, den_r, val_r = _psi_grad(robots, robot_mask, params)
    psi_o, g_o, mh_o, dist_o, den_o, val_o = _psi_grad(obstacles, obstacle_mask, params)
    out = {
        "psi": psi_r + psi_o,
        "grad": g_r + g_o,
        "min_h": np.minimum(mh_r, mh_o),
        "ddt": None,
    }
    if vel is not None:
        v = np.asarray(vel, dtype=np.float64)[..., None, :]
        w_r = np.broadcast_to(-v, robots.shape)
        w_o = np.where(obstacles != 0.0, -v, 0.0)
        out["ddt"] = _ddt_terms(robots, w_r, dist_r, den_r, val_r, params) + _ddt_terms(
            obstacles, w_o, dist_o, den_o, val_o, params
        )
    return out


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def safety_blend(pi, terms, raw_min_h, params: SafetyParams, vel=None):
    """Barrier action, adaptive gain and blended action for a batch.

    Returns a dict with ``b``, ``alpha``, ``u``, ``delta_h`` and ``dalpha_dpi``
    (the gradient of alpha w.r.t. pi, zero on the safe branch and where alpha
    is clipped; the derivative of |x| at 0 is taken as 0).
    """
    pi = np.asarray(pi, dtype=np.float64)
    g = terms["grad"]
    delta_h = np.asarray(raw_min_h, dtype=np.float64) - params.h_margin
    unsafe = delta_h < 0.0
    if params.dynamics == SINGLE:
        b = -params.k_p * g
        gg = _dot(g, g)
        s = _dot(g, pi)
        num = (params.k_p - params.k_c) * gg
        den = params.k_p * gg + np.abs(s)
        dden = np.sign(s)[..., None] * g
    else:
        if vel is None or terms["ddt"] is None:
            raise ValueError("double integrator blend needs the robot velocity")
        v = np.asarray(vel, dtype=np.float64)
        gd = terms["ddt"]
        w = v + params.k_p * g
        b = -params.k_v * w - params.k_p * gd - params.k_p * g
        a1 = params.k_v * _dot(w, w) + params.k_p ** 2 * _dot(g, g)
        a2 = params.k_p * _dot(v, g) + _dot(w, pi + params.k_p * gd)
        lyap = params.k_p * terms["psi"] + 0.5 * _dot(w, w)
        num = a1 - params.k_c * lyap
        den = a1 + np.abs(a2)
        dden = np.sign(a2)[..., None] * w
    num = num * (1.0 - ROUND_GUARD)
    pos = den > 0.0
    safe_den = np.where(pos, den, 1.0)
    raw = np.where(pos, num / safe_den, 0.0)
    inside = pos & (raw > 0.0) & (raw < 1.0)
    branch = np.clip(raw, 0.0, 1.0)
    alpha = np.where(unsafe, branch, 1.0 - params.epsilon)
    dalpha = np.where(
        (unsafe & inside)[..., None], -(num / (safe_den * safe_den))[..., None] * dden, 0.0
    )
    u = alpha[..., None] * pi + (1.0 - alpha[..., None]) * b
    return {"b": b, "alpha": alpha, "u": u, "delta_h": delta_h, "dalpha_dpi": dalpha}


def clamp_norm(u, limit):
    """Rescale rows of ``u`` to norm at most ``limit``; also returns the clamped flags."""
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    over = n > limit
    scale = np.where(over, limit / np.where(over, n, 1.0), 1.0)
    return u * scale, over[..., 0]


# --------------------------------------------------------------------------
# single-observation API


def _listed(obs: Observation, params: SafetyParams):
    """Neighbour and obstacle relative positions inside the sensing radius."""
    r = obs.neighbors[:, :2]
    o = obs.obstacles
    r = r[np.linalg.norm(r, axis=1) <= params.r_sense]
    o = o[np.linalg.norm(o, axis=1) <= params.r_sense]
    return r, o


def _check(r, o, params):
    dists = np.concatenate([np.linalg.norm(r, axis=1), np.linalg.norm(o, axis=1)])
    if dists.size and dists.min() <= params.r_safe:
        raise SafetyViolation(
            f"object at distance {dists.min():.6g} <= r_safe={params.r_safe}"
        )


def _terms(obs: Observation, params: SafetyParams, vel=None):
    r, o = _listed(obs, params)
    _check(r, o, params)
    v = None if vel is None else np.asarray(vel, dtype=np.float64)[None]
    return barrier_terms(
        r[None], np.ones((1, len(r)), bool), o[None], np.ones((1, len(o)), bool), params, v
    )


def h_value(pbar, params: SafetyParams) -> float:
    d = float(np.linalg.norm(pbar))
    return (d - params.r_safe) / (params.r_sense - params.r_safe)


def psi_local(obs: Observation, params: SafetyParams) -> float:
    return float(_terms(obs, params)["psi"][0])


def grad_psi(obs: Observation, params: SafetyParams) -> np.ndarray:
    return _terms(obs, params)["grad"][0]


def ddt_grad_psi(obs: Observation, v_i, params: SafetyParams) -> np.ndarray:
    return _terms(obs, params, v_i)["ddt"][0]


def _evaluate(obs, pi_out, params, v_i):
    if not obs.raw_min_h > 0:
        raise SafetyViolation(f"observation already unsafe (min h = {obs.raw_min_h})")
    terms = _terms(obs, params, v_i)
    res = safety_blend(np.asarray(pi_out, dtype=np.float64)[None], terms, [obs.raw_min_h], params,
                       None if v_i is None else np.asarray(v_i, dtype=np.float64)[None])
    return SafetyEval(
        b=res["b"][0],
        alpha=float(res["alpha"][0]),
        grad_psi=terms["grad"][0],
        ddt_grad_psi=None if terms["ddt"] is None else terms["ddt"][0],
        min_h=float(terms["min_h"][0]),
        psi=float(terms["psi"][0]),
        delta_h=float(res["delta_h"][0]),
    )


def safe_control_si(obs: Observation, pi_out, params: SafetyParams) -> SafetyEval:
    if params.dynamics != SINGLE:
        raise ValueError("params are not for the single integrator")
    return _evaluate(obs, pi_out, params, None)


def safe_control_di(obs: Observation, v_i, pi_out, params: SafetyParams) -> SafetyEval:
    if params.dynamics != DOUBLE:
        raise ValueError("params are not for the double integrator")
    return _evaluate(obs, pi_out, params, v_i)


def blend(pi_out, ev: SafetyEval, params: SafetyParams) -> np.ndarray:
    """``u = alpha * pi + (1 - alpha) * b``, optionally clamped to ``u_max``."""
    pi_out = np.asarray(pi_out, dtype=np.float64)
    u = ev.alpha * pi_out + (1.0 - ev.alpha) * ev.b
    if params.clamp_u:
        u, _ = clamp_norm(u, params.u_max)
    return u


def lyapunov_si_rate(grad, u) -> float:
    """d/dt psi along the single integrator flow: <grad psi, u>."""
    return float(np.dot(grad, u))


def lyapunov_di(psi: float, grad, v, params: SafetyParams) -> float:
    w = np.asarray(v) + params.k_p * np.asarray(grad)
    return params.k_p * psi + 0.5 * float(np.dot(w, w))


def lyapunov_di_rate(grad, ddt, v, u, params: SafetyParams) -> float:
    """d/dt of ``k_p psi + 0.5 |v + k_p grad|^2`` under the double integrator."""
    grad = np.asarray(grad)
    v = np.asarray(v)
    w = v + params.k_p * grad
    return params.k_p * float(np.dot(grad, v)) + float(np.dot(w, np.asarray(u) + params.k_p * np.asarray(ddt)))
