import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gttdi import autodiff as ad
from gttdi import training as tr
from gttdi.autodiff import Tensor
from gttdi.corruption import Pattern
from gttdi.data import from_daily, split_by_days
from gttdi.graph import EdgeSet
from gttdi.model import ModelConfig, attention_edges
from gttdi.training import Adam, TrainConfig, impute, kl_divergence_loss, masked_mse, train, training_mask

shape = (3, 2, 4)


@given(arrays(np.float64, shape, elements=st.floats(-1e6, 1e6)), arrays(np.bool_, shape),
       st.integers(0, 2**16))
def test_masked_mse_ignores_observed_positions(noise, mask, seed):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=shape)
    truth = rng.normal(size=shape)
    a = masked_mse(Tensor(pred), truth, mask).data
    b = masked_mse(Tensor(np.where(mask, pred + noise, pred)), truth, mask).data
    assert a == b


def test_masked_mse_value_and_gradient():
    pred = np.array([[1.0, 2.0, 3.0]])
    truth = np.array([[0.0, 0.0, 1.0]])
    mask = np.array([[True, False, False]])
    assert masked_mse(Tensor(pred), truth, mask).data == pytest.approx((4 + 4) / 2)
    x = Tensor(pred, requires_grad=True)
    masked_mse(x, truth, mask).backward()
    assert np.allclose(x.grad, [[0.0, 2.0, 2.0]])
    assert masked_mse(Tensor(pred), truth, np.ones((1, 3), bool)).data == 0.0


def test_kl_examples():
    y = np.array([[0.2, 0.5, 0.3]])
    assert kl_divergence_loss(Tensor(y), y).data == pytest.approx(0.0, abs=1e-15)
    v = kl_divergence_loss(Tensor(np.array([[0.5, 0.5]])), np.array([[1.0, 0.0]])).data
    assert v == pytest.approx(math.log(2), abs=1e-6)
    # scale-free: a slice and its multiple give the same distribution
    assert kl_divergence_loss(Tensor(3 * y), y).data == pytest.approx(0.0, abs=1e-15)


def test_kl_gradient(rng):
    truth = rng.uniform(0.1, 1.0, (2, 3, 5))
    x = rng.uniform(0.1, 1.0, truth.shape)
    assert ad.finite_difference_check(lambda t: kl_divergence_loss(t, truth), x, step=1e-7) < 1e-5


def test_impute_copies_observed_bit_exactly(rng):
    values = rng.uniform(0, 100, (4, 3, 5))
    mask = rng.random(values.shape) < 0.5
    pred = rng.normal(size=values.shape)
    out = impute(values, mask, pred)
    assert out[mask].tobytes() == values[mask].tobytes()
    assert np.array_equal(out[~mask], pred[~mask])
    with pytest.raises(ValueError):
        impute(values, mask, pred[:2])


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        ((x - np.array([1.0, 1.0])) ** 2).sum().backward()
        opt.step()
    assert np.allclose(x.data, [1.0, 1.0], atol=1e-3)


def test_adam_first_step_is_lr_sized():
    x = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam([x], lr=0.01)
    (x * 3.0).sum().backward()
    opt.step()
    assert x.data[0] == pytest.approx(5.0 - 0.01, rel=1e-6)


def test_training_mask_only_hides(rng):
    t = from_daily(rng.uniform(1, 5, (4, 3, 8)), rng.random((4, 3, 8)) < 0.9, 2)
    for pattern in Pattern:
        m = training_mask(t, pattern, 0.4, 1)
        assert m.shape == t.mask.shape


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(kl_weight=-1)
    with pytest.raises(ValueError):
        TrainConfig(pattern="blocks")


def tiny_split(seed=0):
    rng = np.random.default_rng(seed)
    t_axis = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    daily = 50 + 30 * np.sin(t_axis)[None, None, :] + rng.normal(scale=2, size=(10, 4, 16))
    t = from_daily(daily, None, 2)
    train_t, val_t, _, _ = split_by_days(t)
    pairs = np.array([[0, 1, 1, 2, 2, 3], [1, 0, 2, 1, 3, 2]])
    edges = attention_edges(EdgeSet(pairs, np.tile([1.0, 0.0, 1.0], (6, 1))), 4)
    cfg = ModelConfig(slice_len=8, graph_heads=2, graph_head_dim=4, graph_out=8, sem_dim=2, sem_out=8,
                      enc_heads=2, enc_ff_mult=2)
    sem_tr = rng.normal(size=(train_t.n_samples, 4, cfg.sem_width))
    sem_va = rng.normal(size=(val_t.n_samples, 4, cfg.sem_width))
    return train_t, val_t, edges, sem_tr, sem_va, cfg


def test_short_training_improves_and_logs():
    train_t, val_t, edges, sem_tr, sem_va, cfg = tiny_split()
    res = train(train_t, val_t, edges, sem_tr, sem_va, TrainConfig(epochs=15, batch_size=4, seed=1), cfg)
    assert len(res.log) == 15
    rec = res.log[0]
    assert set(rec) == {"epoch", "train_mse", "train_kl", "val_maape", "val_rmse", "wall_ms"}
    assert res.log[-1]["train_mse"] < res.log[0]["train_mse"]
    assert res.best_epoch == 1 + int(np.argmin([r["val_maape"] for r in res.log]))


def test_training_is_deterministic():
    train_t, val_t, edges, sem_tr, sem_va, cfg = tiny_split()
    c = TrainConfig(epochs=3, batch_size=4, seed=2)
    a = train(train_t, val_t, edges, sem_tr, sem_va, c, cfg)
    b = train(train_t, val_t, edges, sem_tr, sem_va, c, cfg)
    for k, v in a.imputer.params.state().items():
        assert v.tobytes() == b.imputer.params.state()[k].tobytes()


def test_early_stopping():
    train_t, val_t, edges, sem_tr, sem_va, cfg = tiny_split()
    res = train(train_t, val_t, edges, sem_tr, sem_va,
                TrainConfig(epochs=50, batch_size=4, patience=1, learning_rate=1e-9), cfg)
    assert len(res.log) < 50


def test_divergence_is_reported(monkeypatch):
    train_t, val_t, edges, sem_tr, sem_va, cfg = tiny_split()

    def broken(*a, **k):
        raise ad.NonFiniteError("non-finite value produced by primitive 'exp'")

    monkeypatch.setattr(tr, "forward", broken)
    with pytest.raises(tr.TrainingDivergedError) as err:
        train(train_t, val_t, edges, sem_tr, sem_va, TrainConfig(epochs=2, batch_size=4), cfg)
    assert err.value.epoch == 1 and err.value.batch == 0


def test_zero_epochs_returns_initial_params():
    train_t, val_t, edges, sem_tr, sem_va, cfg = tiny_split()
    res = train(train_t, val_t, edges, sem_tr, sem_va, TrainConfig(epochs=0), cfg)
    assert res.log == [] and res.best_epoch == 0
