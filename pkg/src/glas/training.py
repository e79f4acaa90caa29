"""Imitation learning of the Deep-Set policy.

Mini-batches never mix observation shapes, so every batch is a dense array
without padding. The loss is the mean squared error over batch rows and both
action components, taken on the blended action ``u`` (end-to-end) or on the
raw network output ``pi`` (two-stage).
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .expert import Dataset
from .policy import (
    END_TO_END,
    MODES,
    BatchInput,
    PolicyWeights,
    backward_controller_batch,
    backward_pi_batch,
    forward_controller_batch,
    forward_pi_batch,
)
from .safety import SafetyParams

LOSS_CSV_VERSION = "# glas-loss v1"


class TrainingDiverged(FloatingPointError):
    """Loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = END_TO_END
    batch_size: int = 4096
    epochs: int = 100
    lr0: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    seed: int = 0
    validation_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.lr0 <= 0 or self.plateau_patience < 1:
            raise ValueError("need lr0 > 0 and plateau_patience >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Batch:
    batch_id: int
    key: tuple[int, int]
    x: BatchInput
    target: np.ndarray

    @property
    def size(self) -> int:
        return len(self.target)


def _as_batch(batch_id, key, g, idx) -> Batch:
    return Batch(batch_id, key, BatchInput(g["rel_goal"][idx], g["neighbors"][idx], g["obstacles"][idx]), g["action"][idx])


def make_batches(ds: Dataset, batch_size: int, seed) -> list[Batch]:
    """One epoch of shape-pure batches.

    Rows are shuffled inside each ``(n_neighbors, n_obstacles)`` group, cut
    into chunks of ``batch_size`` (the last chunk may be shorter) and the
    chunks are shuffled across groups. ``seed`` may be an int or a Generator.
    """
    if len(ds) == 0:
        raise ValueError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunks = []
    for key in sorted(ds.groups):
        g = ds.groups[key]
        perm = rng.permutation(len(g["action"]))
        for s in range(0, len(perm), batch_size):
            chunks.append((key, perm[s:s + batch_size]))
    order = rng.permutation(len(chunks))
    return [_as_batch(b, chunks[c][0], ds.groups[chunks[c][0]], chunks[c][1]) for b, c in enumerate(order)]


def _eval_batches(ds: Dataset, batch_size: int) -> list[Batch]:
    out = []
    for key in sorted(ds.groups):
        g = ds.groups[key]
        n = len(g["action"])
        for s in range(0, n, batch_size):
            out.append(_as_batch(len(out), key, g, np.arange(s, min(n, s + batch_size))))
    return out


def predict(w: PolicyWeights, x: BatchInput, mode: str, params: SafetyParams):
    """Prediction that the loss compares with the expert action, plus the backward cache."""
    if mode == END_TO_END:
        return forward_controller_batch(w, x, params)
    return forward_pi_batch(w, x, params.pi_max)


def batch_loss_and_grad(w: PolicyWeights, batch: Batch, mode: str, params: SafetyParams):
    pred, cache = predict(w, batch.x, mode, params)
    diff = pred - batch.target
    loss = float(np.mean(diff * diff))
    dpred = 2.0 * diff / diff.size
    if mode == END_TO_END:
        grads = backward_controller_batch(w, cache, dpred)
    else:
        grads = backward_pi_batch(w, cache, dpred)
    return loss, grads


def dataset_loss(w: PolicyWeights, ds: Dataset, mode: str, params: SafetyParams, batch_size: int = 8192) -> float:
    """Mean squared error over every record and action component."""
    total, count = 0.0, 0
    for b in _eval_batches(ds, batch_size):
        pred, _ = predict(w, b.x, mode, params)
        diff = pred - b.target
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count if count else math.nan


class Adam:
    """Adaptive moment estimation over a flat parameter vector."""

    def __init__(self, n: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class PlateauSchedule:
    lr: float
    patience: int
    factor: float
    best: float = math.inf
    bad_epochs: int = 0

    def update(self, val_loss: float) -> bool:
        """Record an epoch; returns True when ``val_loss`` is a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
        return False


@dataclass
class TrainResult:
    weights: PolicyWeights
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return min((h["val_loss"] for h in self.history), default=math.nan)


def train(ds: Dataset, cfg: TrainConfig, params: SafetyParams, init: PolicyWeights, progress=None) -> TrainResult:
    """Fit ``init`` to the dataset; returns the best-validation weights and the loss history.

    The validation split is drawn per shape group with ``cfg.seed``. A split
    too small to hold out anything validates on the training records.
    ``progress`` is an optional callable receiving each history row.
    """
    if ds.dynamics != init.dynamics or ds.dynamics != params.dynamics:
        raise ValueError("dataset, weights and safety params must share one dynamics kind")
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    train_ds, val_ds = ds.split(cfg.validation_fraction, cfg.seed)
    if len(train_ds) == 0:
        train_ds, val_ds = ds, Dataset(ds.dynamics)
    if len(val_ds) == 0:
        val_ds = train_ds
    rng = np.random.default_rng(cfg.seed)
    w = init.copy()
    theta = w.to_vector()
    opt = Adam(theta.size, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = PlateauSchedule(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor)
    val0 = dataset_loss(w, val_ds, cfg.mode, params)
    best = TrainResult(w.copy(), [], 0)
    sched.best = val0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = sched.lr
        for batch in make_batches(train_ds, cfg.batch_size, rng):
            loss, grads = batch_loss_and_grad(w, batch, cfg.mode, params)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss in epoch {epoch}, batch {batch.batch_id} (shape {batch.key})"
                )
            theta = opt.step(theta, grads.to_vector(), lr)
            w = w.from_vector(theta)
        train_loss = dataset_loss(w, train_ds, cfg.mode, params)
        val_loss = dataset_loss(w, val_ds, cfg.mode, params)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDiverged(f"non-finite loss after epoch {epoch}")
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        history.append(row)
        if progress is not None:
            progress(row)
        if sched.update(val_loss):
            best = TrainResult(w.copy(), [], epoch)
    best.history = history
    return best


def write_loss_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(LOSS_CSV_VERSION + "\n")
        wr = csv.writer(f)
        wr.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            wr.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])])

