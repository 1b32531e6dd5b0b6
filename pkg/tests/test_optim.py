import csv
import math

import numpy as np
import pytest

from hta.linalg import Rng
from hta.optim import (
    Constant, Diminishing, DivergenceError, Trace, TrainConfig, averaged_iterates, partial_sums,
    restart_seeds, restart_sweep, schedule_array, sgd_step, theorem1_metric, train,
)


def quadratic_oracle(center=3.0):
    def oracle(theta, xb, yb):
        r = theta - center
        return float(r @ r), 2.0 * r
    return oracle


def test_sgd_step_fixed_point():
    theta = np.array([1.0, -2.0])
    assert np.array_equal(sgd_step(theta, np.zeros(2), 0, Constant(0.05)), theta)


def test_sgd_step_arithmetic():
    assert sgd_step(np.array([1.0]), np.array([2.0]), 0, Constant(0.05)).tolist() == [0.9]


def test_sgd_step_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step(np.zeros(2), np.zeros(3), 0, Constant(0.1))


def test_diminishing_values():
    s = Diminishing(1.0)
    assert s(0) == 1.0 and s(9) == pytest.approx(0.1)
    assert all(s(k + 1) < s(k) for k in range(100))


def test_quadratic_converges_as_closed_form():
    dummy = np.zeros((1, 1))
    theta0 = np.array([0.0])
    cfg = TrainConfig(schedule=Constant(0.1), batch_size=1, epochs=200)
    theta, trace = train(quadratic_oracle(), theta0.copy(), dummy, dummy, cfg)
    assert abs(theta[0] - 3.0) < 1e-6
    assert trace.n_steps == 200
    # loss_k = (theta_k - 3)^2 with theta_k - 3 = (1 - 2 gamma)^k (theta_0 - 3)
    for k in range(60):
        assert trace.batch_loss[k] == pytest.approx((0.8**k * 3.0) ** 2, rel=1e-10)


def test_zero_epochs_returns_initial():
    theta0 = np.array([1.5, 2.5])
    theta, trace = train(quadratic_oracle(), theta0.copy(), np.zeros((4, 1)), np.zeros((4, 1)),
                         TrainConfig(epochs=0))
    assert np.array_equal(theta, theta0) and trace.n_steps == 0


def _linear_regression_run(seed):
    x = Rng(1).uniform(-1, 1, (50, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + 0.1

    def oracle(theta, xb, yb):
        r = xb @ theta[:3] + theta[3] - yb
        return float(r @ r) / len(r), np.concatenate([2 * xb.T @ r, [2 * r.sum()]]) / len(r)

    return train(oracle, np.zeros(4), x, y, TrainConfig(batch_size=8, epochs=5, seed=seed))


def test_same_seed_bit_identical():
    a_theta, a = _linear_regression_run(3)
    b_theta, b = _linear_regression_run(3)
    assert np.array_equal(a_theta, b_theta)
    assert a.batch_loss == b.batch_loss and a.k == b.k
    c_theta, _ = _linear_regression_run(4)
    assert not np.array_equal(a_theta, c_theta)


def test_steps_per_epoch_and_batches():
    _, trace = _linear_regression_run(0)
    assert trace.n_steps == 5 * math.ceil(50 / 8)


def test_max_steps_caps_run():
    x = np.zeros((50, 1))
    _, trace = train(quadratic_oracle(), np.zeros(1), x, x, TrainConfig(batch_size=8, epochs=10, max_steps=13))
    assert trace.n_steps == 13


def test_divergence_aborts_with_trace():
    def oracle(theta, xb, yb):
        with np.errstate(over="ignore"):
            return float(theta[0] ** 2), 2 * theta

    with pytest.raises(DivergenceError) as info:
        train(oracle, np.array([1.0]), np.zeros((1, 1)), np.zeros((1, 1)),
              TrainConfig(schedule=Constant(10.0), batch_size=1, epochs=1000))
    assert info.value.trace.n_steps > 0


def test_k_offset_continues_schedule():
    x = np.zeros((4, 1))
    _, trace = train(quadratic_oracle(), np.zeros(1), x, x,
                     TrainConfig(schedule=Diminishing(1.0), batch_size=4, epochs=3), k0=10)
    assert trace.k == [10, 11, 12]
    assert trace.gamma == [1 / 11, 1 / 12, 1 / 13]


def test_trace_csv(tmp_path):
    _, trace = _linear_regression_run(0)
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["step", "k", "t", "gamma", "batch_loss", "full_loss"]
    assert len(rows) == trace.n_steps


# -- restarts --------------------------------------------------------------------


def _fake_run(seed):
    loss = (seed % 1000) / 1000.0
    return loss + 0.1, loss, {"seed": seed}


def test_restart_single_equals_direct():
    cfg = TrainConfig(restarts=1, seed=4)
    result = restart_sweep(_fake_run, cfg)
    seed = restart_seeds(4, 1)[0]
    assert result.best == _fake_run(seed)[2]


def test_restart_best_dominates():
    result = restart_sweep(_fake_run, TrainConfig(restarts=15, seed=2))
    assert len(result.summaries) == 15
    assert all(result.best_test_loss <= s.test_loss for s in result.summaries)


def test_restart_parallel_matches_sequential():
    cfg = TrainConfig(restarts=6, seed=9)
    a = restart_sweep(_fake_run, cfg)
    b = restart_sweep(_fake_run, cfg, workers=3)
    assert a.summaries == b.summaries and a.best_index == b.best_index


def test_default_restarts_match_protocol():
    assert TrainConfig().restarts == 15
    assert TrainConfig().schedule == Constant(0.05)
    assert TrainConfig().batch_size == 128 and TrainConfig().epochs == 380


# -- schedule sums and diagnostics --------------------------------------------------


@pytest.mark.parametrize("K", [10**3, 10**6])
def test_diminishing_partial_sum_diverges(K):
    g0 = 0.7
    total, _ = partial_sums(Diminishing(g0), K)
    assert total >= g0 * math.log(K)


def test_diminishing_square_tail_small():
    g0 = 0.7
    g = schedule_array(Diminishing(g0), 10**7)
    tail = math.fsum(g[10**6:] ** 2)
    assert tail < 1e-5 * g0**2


def _trace_with(gammas, thetas, ts=None):
    tr = Trace()
    ts = ts if ts is not None else [0.0] * len(gammas)
    tr.retained = [(k, g, t, np.atleast_1d(np.asarray(th, dtype=float))) for k, (g, th, t) in enumerate(zip(gammas, thetas, ts))]
    return tr


def test_theorem1_metric_zero_gradients():
    tr = _trace_with([1.0, 0.5, 0.25], [[1.0], [2.0], [3.0]])
    assert [v for _, v in theorem1_metric(tr, lambda th: np.zeros(1))] == [0.0, 0.0, 0.0]


def test_theorem1_metric_constant_gradient():
    g = np.array([3.0, 4.0])
    tr = _trace_with([1.0, 0.5, 0.2], [[0.0], [1.0], [2.0]])
    for _, v in theorem1_metric(tr, lambda th: g):
        assert v == pytest.approx(25.0)


def test_averaged_iterates_constant():
    tr = _trace_with([1.0, 0.3, 0.1], [[2.5], [2.5], [2.5]], [1.0, 1.0, 1.0])
    theta, t = averaged_iterates(tr)
    assert theta[0] == pytest.approx(2.5, rel=1e-15) and t == pytest.approx(1.0, rel=1e-15)


def test_averaged_iterates_two_steps():
    theta, _ = averaged_iterates(_trace_with([1.0, 1.0], [[0.0], [2.0]]))
    assert theta.tolist() == [1.0]


def test_averaged_iterates_empty():
    with pytest.raises(ValueError):
        averaged_iterates(Trace())


def test_averaged_iterates_convex_homotopy_quadratic():
    # f(theta, t) = 0.5 ||theta - t c||^2, so min_theta f(., t) = 0 for every t.
    # t steps through 1/4, 1/2, 3/4 over the first 75 steps and then stays at 1.
    # With gamma_k = 1/(k+1) the tracking lag enters theta_bar as O(||c|| / A_n),
    # A_n ~ ln n, so the gap at n = 1e4 is ~1e-2 ||c||^2.
    c = np.array([0.3, -0.2, 0.1])
    noise = Rng(42)

    def oracle_at(t):
        def oracle(theta, xb, yb):
            r = theta - t * c
            return 0.5 * float(r @ r), r + 0.1 * noise.uniform(-1, 1, 3)
        return oracle

    x = np.zeros((1, 1))
    total = Trace()
    theta = np.zeros(3)
    for t, steps in [(0.25, 25), (0.5, 25), (0.75, 25), (1.0, 10**4 - 75)]:
        cfg = TrainConfig(schedule=Diminishing(1.0), batch_size=1, epochs=steps, retain_every=1)
        theta, part = train(oracle_at(t), theta, x, x, cfg, k0=total.n_steps, t=t)
        total.extend(part)
    assert total.n_steps == 10**4
    assert all(a <= b for a, b in zip(total.t, total.t[1:]))
    theta_bar, t_bar = averaged_iterates(total)
    r = theta_bar - t_bar * c
    assert 0.5 * float(r @ r) < 1e-3
