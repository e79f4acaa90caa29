import numpy as np
import pytest

from glas.expert import Dataset, DemoRecord
from glas.observation import Observation
from glas.policy import END_TO_END, TWO_STAGE, BatchInput, backward_controller_batch, backward_pi_batch, \
    forward_controller_batch, init_weights
from glas.safety import SafetyParams
from glas.training import (
    LOSS_CSV_VERSION,
    Batch,
    PlateauSchedule,
    TrainConfig,
    TrainingDiverged,
    batch_loss_and_grad,
    dataset_loss,
    make_batches,
    train,
    write_loss_csv,
)
from glas.world import SINGLE


def _record(rng, n_nb, n_ob, action=None):
    nb = rng.uniform(0.5, 2.0, (n_nb, 2)) * rng.choice([-1, 1], (n_nb, 2))
    ob = rng.uniform(0.5, 2.0, (n_ob, 2)) * rng.choice([-1, 1], (n_ob, 2))
    a = rng.uniform(-0.5, 0.5, 2) if action is None else np.asarray(action, dtype=float)
    return DemoRecord(Observation(rng.uniform(-1, 1, 2), nb, ob), a)


def _dataset(counts, seed=0):
    rng = np.random.default_rng(seed)
    recs = [_record(rng, nv, no) for (nv, no), c in counts.items() for _ in range(c)]
    return Dataset.from_records(recs, SINGLE)


def test_batch_sizes_never_mix_shapes():
    ds = _dataset({(0, 0): 10, (1, 0): 5})
    batches = make_batches(ds, 4, seed=0)
    sizes = {}
    for b in batches:
        sizes.setdefault(b.key, []).append(b.size)
        assert b.x.neighbors.shape[1:] == (b.key[0], 2) and b.x.obstacles.shape[1:] == (b.key[1], 2)
    assert sorted(sizes[(0, 0)]) == [2, 4, 4]
    assert sorted(sizes[(1, 0)]) == [1, 4]
    assert [b.batch_id for b in batches] == list(range(5))


def test_batches_cover_every_record_once():
    ds = _dataset({(0, 0): 7, (2, 1): 9})
    rows = np.concatenate([b.target for b in make_batches(ds, 3, seed=4)])
    want = np.concatenate([g["action"] for g in ds.groups.values()])
    assert sorted(map(tuple, rows)) == sorted(map(tuple, want))


def test_same_seed_same_order():
    ds = _dataset({(0, 0): 10, (1, 0): 5, (2, 2): 6})
    a = make_batches(ds, 4, seed=3)
    b = make_batches(ds, 4, seed=3)
    assert [x.key for x in a] == [x.key for x in b]
    assert all(np.array_equal(x.target, y.target) for x, y in zip(a, b))


def test_oversized_batch_is_single_remainder():
    ds = _dataset({(1, 1): 3})
    batches = make_batches(ds, 100, seed=0)
    assert len(batches) == 1 and batches[0].size == 3


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        make_batches(Dataset(SINGLE), 4, 0)


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(plateau_factor=1.0), dict(validation_fraction=0.0),
                                dict(mode="other")])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_round_trip():
    cfg = TrainConfig(mode=TWO_STAGE, epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_single_record_memorised():
    rec = DemoRecord(Observation([0.4, -0.3], [[1.0, 0.5]], np.zeros((0, 2))), np.array([0.3, -0.2]))
    ds = Dataset.from_records([rec], SINGLE)
    cfg = TrainConfig(mode=TWO_STAGE, batch_size=1, epochs=400, lr0=3e-3, plateau_patience=20)
    res = train(ds, cfg, SafetyParams(), init_weights(0, hidden=16, latent=4))
    assert res.history[-1]["train_loss"] < 1e-6
    assert res.best_val_loss < 1e-6


def test_safe_branch_gradient_is_scaled_two_stage_gradient():
    rng = np.random.default_rng(1)
    params = SafetyParams(epsilon=0.05)
    w = init_weights(2, hidden=8, latent=4)
    x = BatchInput(rng.uniform(-1, 1, (6, 2)), rng.uniform(1.0, 2.0, (6, 2, 2)), rng.uniform(1.0, 2.0, (6, 1, 2)))
    _, cache = forward_controller_batch(w, x, params)
    assert np.all(cache["safety"]["delta_h"] >= 0)
    du = rng.normal(size=(6, 2))
    g_e2e = backward_controller_batch(w, cache, du).to_vector()
    g_two = backward_pi_batch(w, cache, du).to_vector()
    assert np.allclose(g_e2e, (1 - params.epsilon) * g_two, rtol=1e-12, atol=1e-15)


def test_mode_contract_under_margin_change():
    # one neighbour at h = 0.03: inside the margin for delta_r = 0.1, outside for 0.05
    d = 0.15 + 0.03 * 2.85
    x = BatchInput(np.array([[0.5, 0.2]]), np.array([[[d, 0.0]]]), np.zeros((1, 0, 2)))
    b = Batch(0, (1, 0), x, np.array([[0.1, 0.1]]))
    w = init_weights(3, hidden=8, latent=4)
    grads = {}
    for mode in (TWO_STAGE, END_TO_END):
        for dr in (0.05, 0.1):
            _, g = batch_loss_and_grad(w, b, mode, SafetyParams(delta_r=dr))
            grads[mode, dr] = g.to_vector()
    assert np.array_equal(grads[TWO_STAGE, 0.05], grads[TWO_STAGE, 0.1])
    assert not np.allclose(grads[END_TO_END, 0.05], grads[END_TO_END, 0.1])


def test_overfit_loss_is_non_increasing():
    ds = _dataset({(1, 1): 60, (2, 0): 40}, seed=5)
    cfg = TrainConfig(mode=TWO_STAGE, batch_size=100, epochs=40, lr0=5e-4)
    res = train(ds, cfg, SafetyParams(), init_weights(1, hidden=16, latent=4))
    losses = [h["train_loss"] for h in res.history]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic():
    ds = _dataset({(1, 1): 50, (2, 0): 30, (0, 0): 20}, seed=6)
    cfg = TrainConfig(mode=END_TO_END, batch_size=16, epochs=4)
    a = train(ds, cfg, SafetyParams(), init_weights(4, hidden=16, latent=4))
    b = train(ds, cfg, SafetyParams(), init_weights(4, hidden=16, latent=4))
    assert a.history == b.history
    assert np.array_equal(a.weights.to_vector(), b.weights.to_vector())


def test_returns_best_validation_weights():
    ds = _dataset({(1, 1): 50, (2, 0): 30}, seed=7)
    cfg = TrainConfig(mode=TWO_STAGE, batch_size=8, epochs=6, lr0=0.02)
    res = train(ds, cfg, SafetyParams(), init_weights(4, hidden=16, latent=4))
    _, val = ds.split(cfg.validation_fraction, cfg.seed)
    got = dataset_loss(res.weights, val, TWO_STAGE, SafetyParams())
    if res.best_epoch == 0:
        assert got <= res.best_val_loss
    else:
        assert got == res.best_val_loss
        assert res.history[res.best_epoch - 1]["val_loss"] == res.best_val_loss


def test_plateau_schedule():
    s = PlateauSchedule(lr=1.0, patience=2, factor=0.5)
    assert s.update(1.0)
    assert not s.update(1.0) and s.lr == 1.0
    assert not s.update(2.0) and s.lr == 0.5
    assert s.update(0.5) and s.lr == 0.5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_batch():
    rng = np.random.default_rng(0)
    recs = [_record(rng, 1, 0) for _ in range(4)] + [_record(rng, 1, 0, action=[1e300, 0.0])]
    ds = Dataset.from_records(recs, SINGLE)
    cfg = TrainConfig(mode=TWO_STAGE, batch_size=2, epochs=1, validation_fraction=0.01)
    with pytest.raises(TrainingDiverged, match=r"batch \d+"):
        train(ds, cfg, SafetyParams(), init_weights(0, hidden=8, latent=4))


def test_dynamics_mismatch():
    ds = _dataset({(0, 0): 3})
    with pytest.raises(ValueError):
        train(ds, TrainConfig(epochs=1), SafetyParams(), init_weights(0, "double"))


def test_loss_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_csv([{"epoch": 1, "train_loss": 0.5, "val_loss": 0.25, "lr": 0.001}], path)
    lines = path.read_text().splitlines()
    assert lines == [LOSS_CSV_VERSION, "epoch,train_loss,val_loss,lr", "1,0.5,0.25,0.001"]
