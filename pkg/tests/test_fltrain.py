import numpy as np
import pytest

from fedpricing.core import FederatedDataset, ParticipationVector, make_population
from fedpricing.data import gen_synthetic
from fedpricing.fltrain import (
    TrainConfig,
    aggregate,
    global_loss,
    local_sgd,
    loss_and_grad,
    sample_participants,
    theoretical_lr,
    train,
)
from fedpricing.fltrain import test_accuracy as accuracy_of


def tiny_dataset(seed=0, n_clients=3):
    return gen_synthetic(
        n_clients=n_clients, dim=5, n_classes=3, alpha=1.0, beta=1.0,
        total_samples=60, seed=seed,
    )


# ---------------------------------------------------------------- model math


def test_loss_and_grad_uniform_at_zero_weights():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 4))
    y = rng.integers(0, 3, size=20)
    w = np.zeros((3, 5))
    loss, grad = loss_and_grad(w, x, y, l2=0.0)
    assert loss == pytest.approx(np.log(3.0))
    assert grad.shape == (3, 5)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(15, 4))
    y = rng.integers(0, 3, size=15)
    w = rng.normal(size=(3, 5)) * 0.3
    _, grad = loss_and_grad(w, x, y, l2=0.01)
    h = 1e-6
    for _ in range(20):
        i, j = rng.integers(0, 3), rng.integers(0, 5)
        wp, wm = w.copy(), w.copy()
        wp[i, j] += h
        wm[i, j] -= h
        lp, _ = loss_and_grad(wp, x, y, l2=0.01)
        lm, _ = loss_and_grad(wm, x, y, l2=0.01)
        assert (lp - lm) / (2 * h) == pytest.approx(grad[i, j], rel=1e-5, abs=1e-8)


def test_full_batch_local_sgd_decreases_loss():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 4))
    y = rng.integers(0, 3, size=40)
    w = np.zeros((3, 5))
    before, _ = loss_and_grad(w, x, y, l2=0.0)
    w2 = local_sgd(w, (x, y), local_steps=20, batch=None, lr=0.2, l2=0.0, rng=rng)
    after, _ = loss_and_grad(w2, x, y, l2=0.0)
    assert after < before
    assert np.array_equal(w, np.zeros((3, 5)))  # input not mutated


def test_local_sgd_zero_steps_is_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 4))
    y = rng.integers(0, 3, size=10)
    w = rng.normal(size=(3, 5))
    out = local_sgd(w, (x, y), local_steps=0, batch=4, lr=0.1, l2=0.0, rng=rng)
    assert np.array_equal(out, w)


# ---------------------------------------------------------------- sampling/aggregation


def test_sample_participants_extremes():
    rng = np.random.default_rng(4)
    assert sample_participants(ParticipationVector([1.0, 1.0]), rng) == [0, 1]
    assert sample_participants(ParticipationVector([0.0, 0.0]), rng) == []


def test_sample_participants_frequency():
    rng = np.random.default_rng(5)
    q = ParticipationVector([0.3, 0.8])
    counts = np.zeros(2)
    trials = 20_000
    for _ in range(trials):
        for n in sample_participants(q, rng):
            counts[n] += 1
    freq = counts / trials
    assert freq[0] == pytest.approx(0.3, abs=0.01)
    assert freq[1] == pytest.approx(0.8, abs=0.01)


def test_aggregate_full_participation_is_weighted_average():
    profiles = make_population([1, 3], [1, 1], [1, 1], [0, 0], [1, 1])
    w_prev = np.zeros((2, 2))
    updates = {0: np.full((2, 2), 4.0), 1: np.full((2, 2), 8.0)}
    q = ParticipationVector([1.0, 1.0])
    out = aggregate(w_prev, updates, q, profiles)
    # 0.25*4 + 0.75*8 = 7
    assert np.allclose(out, 7.0)


def test_aggregate_empty_set_is_identity():
    profiles = make_population([1], [1], [1], [0], [1])
    w_prev = np.ones((2, 2))
    out = aggregate(w_prev, {}, ParticipationVector([0.5]), profiles)
    assert np.array_equal(out, w_prev)


def test_aggregate_rejects_zero_probability_update():
    profiles = make_population([1], [1], [1], [0], [1])
    with pytest.raises(ValueError, match="client 0"):
        aggregate(np.zeros((1, 1)), {0: np.ones((1, 1))}, ParticipationVector([0.0]), profiles)


def test_aggregate_inverse_probability_scaling():
    profiles = make_population([1, 1], [1, 1], [1, 1], [0, 0], [1, 1])
    w_prev = np.zeros((1, 1))
    q = ParticipationVector([0.5, 1.0])
    out = aggregate(w_prev, {0: np.array([[2.0]])}, q, profiles)
    # a_0/q_0 = 0.5/0.5 = 1 times the delta 2.
    assert out[0, 0] == pytest.approx(2.0)


# ---------------------------------------------------------------- training loop


def test_train_is_deterministic_per_seed():
    ds = tiny_dataset()
    cfg = TrainConfig(local_steps=3, batch=8, rounds=10, seed=7,
                      participation=ParticipationVector([0.7, 0.8, 0.9]))
    m1 = train(ds, cfg)
    m2 = train(ds, cfg)
    assert [m.loss for m in m1] == [m.loss for m in m2]
    assert [m.participants for m in m1] == [m.participants for m in m2]
    m3 = train(ds, TrainConfig(local_steps=3, batch=8, rounds=10, seed=8,
                               participation=cfg.participation))
    assert [m.participants for m in m1] != [m.participants for m in m3]


def test_train_reduces_loss():
    ds = tiny_dataset()
    cfg = TrainConfig(local_steps=5, batch=8, rounds=40, seed=0, eta0=0.3,
                      participation=ParticipationVector([1.0, 1.0, 1.0]))
    metrics = train(ds, cfg)
    assert metrics[-1].loss < metrics[0].loss
    assert metrics[-1].loss < np.log(3.0)


def test_train_requires_participation():
    ds = tiny_dataset()
    with pytest.raises(ValueError, match="participation"):
        train(ds, TrainConfig(rounds=1))


def test_train_participation_length_checked():
    ds = tiny_dataset()
    with pytest.raises(ValueError, match="3 clients"):
        train(ds, TrainConfig(rounds=1, participation=ParticipationVector([1.0])))


def test_eval_stride_thins_metrics_but_keeps_last_round():
    ds = tiny_dataset()
    cfg = TrainConfig(local_steps=1, batch=4, rounds=10, eval_stride=4, seed=0,
                      participation=ParticipationVector([1.0, 1.0, 1.0]))
    metrics = train(ds, cfg)
    assert [m.round_index for m in metrics] == [3, 7, 9]


def test_sim_time_accumulates_monotonically():
    ds = tiny_dataset()
    cfg = TrainConfig(local_steps=2, batch=4, rounds=8, seed=1,
                      participation=ParticipationVector([0.5, 0.5, 0.5]))
    metrics = train(ds, cfg)
    times = [m.sim_time for m in metrics]
    assert all(b > a for a, b in zip(times, times[1:]))
    assert times[0] >= cfg.sim_t_base


def test_zero_participation_rounds_leave_model_at_init():
    ds = tiny_dataset()
    cfg = TrainConfig(local_steps=2, batch=4, rounds=5, seed=0,
                      participation=ParticipationVector([0.0, 0.0, 0.0]))
    metrics, states = train(ds, cfg, record_states=True)
    assert all(np.array_equal(s, np.zeros_like(s)) for s in states)
    assert all(m.participants == () for m in metrics)


def test_theoretical_schedule_decreases():
    lrs = [theoretical_lr(r, smoothness=2.0, mu=0.01, local_steps=5) for r in range(50)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[0] == pytest.approx(2.0 / 16.0)


def test_theoretical_schedule_trains():
    ds = tiny_dataset()
    cfg = TrainConfig(local_steps=3, batch=8, rounds=30, seed=0,
                      lr_schedule="theoretical", l2=1e-3,
                      participation=ParticipationVector([1.0, 1.0, 1.0]))
    metrics = train(ds, cfg)
    assert metrics[-1].loss < metrics[0].loss


def test_global_loss_weighted_by_datasize():
    x0 = np.zeros((1, 2))
    x1 = np.zeros((3, 2))
    y0 = np.array([0])
    y1 = np.array([1, 1, 1])
    ds = FederatedDataset(
        shards=((x0, y0), (x1, y1)),
        test_features=np.zeros((0, 2)), test_labels=np.zeros((0,), dtype=np.int64),
        n_classes=2, dim=2,
    )
    w = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 0.0]])  # bias favors class 0
    from fedpricing.fltrain import sample_loss
    expected = 0.25 * sample_loss(w, x0, y0, 0.0) + 0.75 * sample_loss(w, x1, y1, 0.0)
    assert global_loss(w, ds) == pytest.approx(expected)


def test_accuracy_counts_argmax_hits():
    w = np.array([[1.0, 0.0], [-1.0, 0.0]])  # predicts class 0 iff feature > 0
    x = np.array([[1.0], [-1.0], [2.0]])
    y = np.array([0, 1, 1])
    assert accuracy_of(w, x, y) == pytest.approx(2.0 / 3.0)


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        TrainConfig(rounds=0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="linear")
    with pytest.raises(ValueError):
        TrainConfig(local_steps=-1)
