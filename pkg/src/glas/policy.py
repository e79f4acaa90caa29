"""Deep-Set policy network with a hand-written reverse pass.

Five small MLPs (Linear-ReLU-Linear)::

    phi_obstacle, rho_obstacle   obstacle set encoder
    phi_robot, rho_robot         neighbour set encoder
    psi                          [rho_obstacle; rho_robot; rel_goal] -> raw action

The raw action is rescaled to norm at most ``pi_max``. The backward pass is
specialised to this fixed topology and, in end-to-end mode, continues through
the safety blend ``u = alpha(pi) pi + (1 - alpha(pi)) b``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .observation import Observation
from .safety import SafetyParams, barrier_terms, clamp_norm, safety_blend
from .world import DOUBLE, SINGLE, state_dim

WEIGHTS_FORMAT = "glas-weights"
WEIGHTS_VERSION = 1
BLOCKS = ("phi_obstacle", "rho_obstacle", "phi_robot", "rho_robot", "psi")
END_TO_END = "end_to_end"
TWO_STAGE = "two_stage"
MODES = (END_TO_END, TWO_STAGE)


class WeightsFormatError(ValueError):
    pass


def layer_sizes(dynamics: str, hidden: int = 64, latent: int = 16) -> dict[str, list[int]]:
    d = state_dim(dynamics)
    return {
        "phi_obstacle": [2, hidden, latent],
        "rho_obstacle": [latent, hidden, latent],
        "phi_robot": [d, hidden, latent],
        "rho_robot": [latent, hidden, latent],
        "psi": [2 * latent + d, hidden, 2],
    }


@dataclass
class PolicyWeights:
    dynamics: str
    blocks: dict[str, list[tuple[np.ndarray, np.ndarray]]]

    @property
    def latent(self) -> int:
        return self.blocks["rho_robot"][-1][0].shape[1]

    def shapes(self) -> dict[str, list[tuple[tuple[int, ...], tuple[int, ...]]]]:
        return {k: [(W.shape, b.shape) for W, b in v] for k, v in self.blocks.items()}

    def copy(self) -> "PolicyWeights":
        return PolicyWeights(self.dynamics, {k: [(W.copy(), b.copy()) for W, b in v] for k, v in self.blocks.items()})

    def zeros_like(self) -> "PolicyWeights":
        return PolicyWeights(
            self.dynamics, {k: [(np.zeros_like(W), np.zeros_like(b)) for W, b in v] for k, v in self.blocks.items()}
        )

    def arrays(self) -> list[np.ndarray]:
        """Every parameter array in a fixed order (views, not copies)."""
        out = []
        for name in BLOCKS:
            for W, b in self.blocks[name]:
                out.extend((W, b))
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec: np.ndarray) -> "PolicyWeights":
        new = self.copy()
        k = 0
        for a in new.arrays():
            a[...] = vec[k:k + a.size].reshape(a.shape)
            k += a.size
        return new


def init_weights(seed: int, dynamics: str = SINGLE, hidden: int = 64, latent: int = 16) -> PolicyWeights:
    """He-uniform weights (limit sqrt(6 / fan_in)), zero biases.

    The output layer of ``psi`` starts ten times smaller. The norm cap has no
    radial gradient, so a raw output that starts far outside the ``pi_max``
    ball could never be pulled back in.
    """
    rng = np.random.default_rng(seed)
    blocks = {}
    for name, sizes in layer_sizes(dynamics, hidden, latent).items():
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = np.sqrt(6.0 / fan_in)
            if name == "psi" and k == len(sizes) - 2:
                lim *= 0.1
            layers.append((rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)))
        blocks[name] = layers
    return PolicyWeights(dynamics, blocks)


# --------------------------------------------------------------------------
# batched forward / backward


def _mlp(layers, x):
    acts = [x]
    for k, (W, b) in enumerate(layers):
        z = acts[-1] @ W + b
        if k < len(layers) - 1:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return acts


def _mlp_back(layers, acts, dout, grads):
    d = dout
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        gW, gb = grads[k]
        gW += acts[k].T @ d
        gb += d.sum(axis=0)
        if k == 0:
            return d @ W.T
        d = (d @ W.T) * (acts[k] > 0.0)
    return None


def _set_forward(phi, rho, x, mask, latent):
    B, n = x.shape[:2]
    if n == 0:
        s = np.zeros((B, latent))
        return _mlp(rho, s), None
    pacts = _mlp(phi, x.reshape(B * n, -1))
    out = pacts[-1].reshape(B, n, -1)
    if mask is not None:
        out = np.where(mask[:, :, None], out, 0.0)
    s = out.sum(axis=1)
    return _mlp(rho, s), pacts


@dataclass
class BatchInput:
    """Network-ready batch; masks may be ``None`` when every row is real."""

    rel_goal: np.ndarray
    neighbors: np.ndarray
    obstacles: np.ndarray
    neighbor_mask: np.ndarray | None = None
    obstacle_mask: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.rel_goal)


def forward_pi_batch(w: PolicyWeights, x: BatchInput, pi_max: float):
    lat = w.latent
    o_acts, o_phi = _set_forward(w.blocks["phi_obstacle"], w.blocks["rho_obstacle"], x.obstacles, x.obstacle_mask, lat)
    r_acts, r_phi = _set_forward(w.blocks["phi_robot"], w.blocks["rho_robot"], x.neighbors, x.neighbor_mask, lat)
    z = np.concatenate([o_acts[-1], r_acts[-1], x.rel_goal], axis=1)
    p_acts = _mlp(w.blocks["psi"], z)
    raw = p_acts[-1]
    norm = np.linalg.norm(raw, axis=1)
    over = norm > pi_max
    scale = np.where(over, pi_max / np.where(over, norm, 1.0), 1.0)
    pi = raw * scale[:, None]
    cache = {"x": x, "o_acts": o_acts, "o_phi": o_phi, "r_acts": r_acts, "r_phi": r_phi,
             "p_acts": p_acts, "norm": norm, "over": over, "scale": scale, "pi_max": pi_max}
    return pi, cache


def backward_pi_batch(w: PolicyWeights, cache, dpi) -> PolicyWeights:
    grads = w.zeros_like()
    g = grads.blocks
    raw = cache["p_acts"][-1]
    over = cache["over"]
    n = raw / np.where(over, cache["norm"], 1.0)[:, None]
    proj = dpi - n * np.sum(n * dpi, axis=1, keepdims=True)
    draw = np.where(over[:, None], cache["scale"][:, None] * proj, dpi)
    dz = _mlp_back(w.blocks["psi"], cache["p_acts"], draw, g["psi"])
    lat = w.latent
    x = cache["x"]
    for key, acts, phi_acts, inp, mask, sl in (
        ("obstacle", cache["o_acts"], cache["o_phi"], x.obstacles, x.obstacle_mask, slice(0, lat)),
        ("robot", cache["r_acts"], cache["r_phi"], x.neighbors, x.neighbor_mask, slice(lat, 2 * lat)),
    ):
        ds = _mlp_back(w.blocks["rho_" + key], acts, dz[:, sl], g["rho_" + key])
        if phi_acts is None:
            continue
        B, m = inp.shape[:2]
        dphi = np.broadcast_to(ds[:, None, :], (B, m, ds.shape[1]))
        if mask is not None:
            dphi = np.where(mask[:, :, None], dphi, 0.0)
        _mlp_back(w.blocks["phi_" + key], phi_acts, dphi.reshape(B * m, -1), g["phi_" + key])
    return grads


def batch_safety_inputs(x: BatchInput, raw_min_h=None):
    """Relative positions and masks consumed by the barrier terms."""
    B = x.size
    nbr = x.neighbors[:, :, :2]
    nmask = x.neighbor_mask if x.neighbor_mask is not None else np.ones(nbr.shape[:2], bool)
    omask = x.obstacle_mask if x.obstacle_mask is not None else np.ones(x.obstacles.shape[:2], bool)
    return nbr, nmask, x.obstacles, omask, B


def listed_min_h(x: BatchInput, params: SafetyParams) -> np.ndarray:
    nbr, nmask, obs, omask, B = batch_safety_inputs(x)
    d = np.concatenate([np.linalg.norm(nbr, axis=-1), np.linalg.norm(obs, axis=-1)], axis=1)
    m = np.concatenate([nmask, omask], axis=1) & (d <= params.r_sense)
    dmin = np.min(np.where(m, d, np.inf), axis=1, initial=np.inf)
    return np.where(np.isfinite(dmin), (dmin - params.r_safe) / (params.r_sense - params.r_safe), np.inf)


def forward_controller_batch(w: PolicyWeights, x: BatchInput, params: SafetyParams, vel=None, raw_min_h=None):
    """u for a batch. ``raw_min_h`` defaults to the minimum h over the listed entries."""
    pi, cache = forward_pi_batch(w, x, params.pi_max)
    if raw_min_h is None:
        raw_min_h = listed_min_h(x, params)
    if params.dynamics == DOUBLE and vel is None:
        # the velocity block of rel_goal is g_v - v = -v
        vel = -x.rel_goal[:, 2:4]
    nbr, nmask, obs, omask, _ = batch_safety_inputs(x)
    terms = barrier_terms(nbr, nmask, obs, omask, params, vel if params.dynamics == DOUBLE else None)
    res = safety_blend(pi, terms, raw_min_h, params, vel)
    u = res["u"]
    if params.clamp_u:
        u, _ = clamp_norm(u, params.u_max)
    cache.update(pi=pi, safety=res, terms=terms)
    return u, cache


def backward_controller_batch(w: PolicyWeights, cache, du) -> PolicyWeights:
    res = cache["safety"]
    alpha = res["alpha"][:, None]
    lever = np.sum(du * (cache["pi"] - res["b"]), axis=1, keepdims=True)
    dpi = alpha * du + lever * res["dalpha_dpi"]
    return backward_pi_batch(w, cache, dpi)


# --------------------------------------------------------------------------
# single observation API


def canonical_rows(rows: np.ndarray) -> np.ndarray:
    """Rows sorted by position norm, then lexicographically, so set sums are order-free."""
    if len(rows) < 2:
        return rows
    keys = [rows[:, k] for k in range(rows.shape[1] - 1, -1, -1)]
    keys.append(np.linalg.norm(rows[:, :2], axis=1))
    return rows[np.lexsort(keys)]


def _single_batch(obs: Observation) -> BatchInput:
    return BatchInput(
        obs.rel_goal[None],
        canonical_rows(obs.neighbors)[None],
        canonical_rows(obs.obstacles)[None],
    )


def forward_pi(obs: Observation, w: PolicyWeights, pi_max: float = 1.0) -> np.ndarray:
    if isinstance(pi_max, SafetyParams):
        pi_max = pi_max.pi_max
    pi, _ = forward_pi_batch(w, _single_batch(obs), pi_max)
    return pi[0]


@dataclass
class GradientTape:
    """Primal values of one controller evaluation, enough for one reverse pass."""

    weights: PolicyWeights
    cache: dict = field(repr=False)
    mode: str = END_TO_END

    @property
    def pi(self) -> np.ndarray:
        return self.cache["pi"][0]

    @property
    def alpha(self) -> float:
        return float(self.cache["safety"]["alpha"][0])

    def backward(self, d_out) -> PolicyWeights:
        """Gradient w.r.t. the weights given d loss / d output.

        The output is ``u`` in end-to-end mode and ``pi`` in two-stage mode.
        """
        d_out = np.asarray(d_out, dtype=np.float64).reshape(1, 2)
        if self.mode == TWO_STAGE:
            return backward_pi_batch(self.weights, self.cache, d_out)
        return backward_controller_batch(self.weights, self.cache, d_out)


def forward_controller(obs: Observation, state, w: PolicyWeights, params: SafetyParams, mode: str = END_TO_END):
    """Blended action ``u`` for one robot plus the tape for reverse mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    state = np.asarray(state, dtype=np.float64)
    vel = state[None, 2:4] if params.dynamics == DOUBLE else None
    raw = np.array([obs.raw_min_h])
    x = _single_batch(obs)
    u, cache = forward_controller_batch(w, x, params, vel, raw)
    return u[0], GradientTape(w, cache, mode)


# --------------------------------------------------------------------------
# persistence


def save_weights(w: PolicyWeights, path) -> None:
    blocks = []
    for name in BLOCKS:
        shapes, values = [], []
        for W, b in w.blocks[name]:
            shapes.extend([list(W.shape), list(b.shape)])
            values.extend([W.ravel().tolist(), b.ravel().tolist()])
        blocks.append({"name": name, "shapes": shapes, "values": values})
    doc = {"format": WEIGHTS_FORMAT, "version": WEIGHTS_VERSION, "dynamics": w.dynamics, "blocks": blocks}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_weights(path, dynamics: str | None = None) -> PolicyWeights:
    """Read a weights file; ``dynamics`` (if given) must match the stored shapes."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise WeightsFormatError(f"{path}: cannot parse weights file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != WEIGHTS_FORMAT:
        raise WeightsFormatError(f"{path}: not a weights file")
    if doc.get("version") != WEIGHTS_VERSION:
        raise WeightsFormatError(f"{path}: unsupported weights version {doc.get('version')}")
    file_dyn = doc.get("dynamics")
    try:
        state_dim(file_dyn)
        blocks = {}
        for blk in doc["blocks"]:
            arrs = [np.array(v, dtype=np.float64).reshape(s) for s, v in zip(blk["shapes"], blk["values"])]
            blocks[blk["name"]] = list(zip(arrs[0::2], arrs[1::2]))
    except (KeyError, TypeError, ValueError) as exc:
        raise WeightsFormatError(f"{path}: malformed weights ({exc})") from exc
    if set(blocks) != set(BLOCKS):
        raise WeightsFormatError(f"{path}: expected blocks {BLOCKS}")
    w = PolicyWeights(file_dyn, blocks)
    _check_shapes(w, path)
    if dynamics is not None and dynamics != file_dyn:
        raise WeightsFormatError(
            f"{path}: shape mismatch, weights are for {file_dyn} integrator but run uses {dynamics}"
        )
    return w


def _check_shapes(w: PolicyWeights, path) -> None:
    hidden = w.blocks["psi"][0][0].shape[1]
    latent = w.latent
    expected = layer_sizes(w.dynamics, hidden, latent)
    for name, sizes in expected.items():
        layers = w.blocks[name]
        got = [layers[0][0].shape[0]] + [W.shape[1] for W, _ in layers]
        ok = all(W.shape[1] == b.shape[0] for W, b in layers)
        ok = ok and all(layers[k][0].shape[1] == layers[k + 1][0].shape[0] for k in range(len(layers) - 1))
        if got != sizes or not ok:
            raise WeightsFormatError(f"{path}: shape mismatch in block {name}: {got} != {sizes}")
