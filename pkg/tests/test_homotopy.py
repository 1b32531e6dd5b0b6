import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hta.homotopy import (
    AddLayer, HomotopyBlend, HtaSchedule, LayerMap, SubnetView, Widen, add_layer, blend_backward,
    blend_forward, blend_loss, hta_train, multi_stage_train, plain_train, widen,
)
from hta.linalg import Rng
from hta.network import Activation, LossKind, Mlp, loss_grad, numeric_grad, relative_error
from hta.optim import TrainConfig

from conftest import random_net

SE = LossKind.SQUARED_ERROR


def widened_pair(sizes=(2, 2, 1), added=2, hidden="sigmoid", seed=0, layer=0):
    small = random_net(list(sizes), hidden, seed)
    large, view = widen(small, layer, added, Rng(seed + 1))
    # move the large net off the embedded point so both paths differ
    large.theta += Rng(seed + 2).uniform(-0.3, 0.3, large.theta.shape)
    return small, large, view


# -- views and blends ------------------------------------------------------------


def test_identity_view_extracts_same_network():
    net = random_net([3, 4, 2], "relu", 1)
    view = SubnetView.identity(net)
    assert np.array_equal(view.extract(net).theta, net.theta)


def test_view_rejects_out_of_range_indices():
    with pytest.raises(ValueError):
        SubnetView((2, 2, 1), ["relu", "identity"],
                   [LayerMap(0, np.array([0, 5]), np.arange(2)), LayerMap(1, np.arange(1), np.arange(2))], (2, 4, 1))


def test_view_rejects_wrong_large_net():
    _, large, view = widened_pair()
    with pytest.raises(ValueError):
        HomotopyBlend(random_net([2, 3, 1], "relu", 0), view)


def test_t_outside_unit_interval():
    _, large, view = widened_pair()
    with pytest.raises(ValueError):
        HomotopyBlend(large, view, 1.5)


def test_blend_endpoints_exact():
    _, large, view = widened_pair(seed=3)
    small_now = view.extract(large)
    x = Rng(4).uniform(-1, 1, (50, 2))
    assert np.array_equal(blend_forward(HomotopyBlend(large, view, 0.0), x), small_now(x))
    assert np.array_equal(blend_forward(HomotopyBlend(large, view, 1.0), x), large(x))


def test_blend_half_is_average():
    small = Mlp([1, 1, 1], ["identity", "identity"], np.array([0.0, 0.0, 0.0, 1.0]))
    large, view = widen(small, 0, 1, Rng(0))
    large.weights[0][1] = 0.0
    large.biases[0][1] = 2.0
    large.weights[1][0, 1] = 1.0
    x = np.array([0.7])
    assert small(x).tolist() == [1.0] and large(x).tolist() == [3.0]
    assert blend_forward(HomotopyBlend(large, view, 0.5), x).tolist() == [2.0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_blend_linear_in_t(seed, t):
    _, large, view = widened_pair(sizes=(3, 4, 2), added=3, seed=seed)
    x = Rng(seed).uniform(-1, 1, 3)
    y0 = blend_forward(HomotopyBlend(large, view, 0.0), x)
    y1 = blend_forward(HomotopyBlend(large, view, 1.0), x)
    yt = blend_forward(HomotopyBlend(large, view, t), x)
    np.testing.assert_allclose(yt, y0 + t * (y1 - y0), rtol=0, atol=1e-12)


def test_blend_backward_t0_zero_outside_view():
    _, large, view = widened_pair(seed=5)
    b = HomotopyBlend(large, view, 0.0)
    g = blend_backward(b, np.array([0.3, -0.7]), SE, np.array([0.2]))
    outside = np.setdiff1d(np.arange(large.theta.size), view.flat_index)
    assert outside.size and not g[outside].any()


def test_blend_backward_t1_equals_plain_backward():
    _, large, view = widened_pair(seed=6)
    x, y = np.array([0.3, -0.7]), np.array([0.2])
    g = blend_backward(HomotopyBlend(large, view, 1.0), x, SE, y)
    np.testing.assert_array_equal(g, loss_grad(large, SE, x, y)[1])


@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 0.9, 1.0])
def test_blend_backward_finite_differences(t):
    _, large, view = widened_pair(sizes=(2, 2, 1), added=2, seed=7)
    b = HomotopyBlend(large, view, t)
    x = Rng(8).uniform(-1, 1, (3, 2))
    y = Rng(9).uniform(-1, 1, (3, 1))
    analytic = blend_backward(b, x, SE, y)
    probe = HomotopyBlend(large.copy(), view, t)

    def f(theta):
        probe.large.theta[...] = theta
        return blend_loss(probe, x, SE, y)

    numeric = numeric_grad(f, large.theta, 1e-5)
    assert relative_error(analytic, numeric).max() < 1e-4


def test_blend_backward_cross_entropy_finite_differences():
    small = random_net([3, 3, 4], "sigmoid", 10)
    large, view = add_layer(small, 1, 6, "sigmoid", Rng(11), fill="random")
    large.theta += Rng(12).uniform(-0.2, 0.2, large.theta.shape)
    b = HomotopyBlend(large, view, 0.4)
    x = Rng(13).uniform(-1, 1, (5, 3))
    labels = np.array([0, 3, 1, 2, 3])
    analytic = blend_backward(b, x, LossKind.CROSS_ENTROPY, labels)
    probe = HomotopyBlend(large.copy(), view, 0.4)

    def f(theta):
        probe.large.theta[...] = theta
        return blend_loss(probe, x, LossKind.CROSS_ENTROPY, labels)

    assert relative_error(analytic, numeric_grad(f, large.theta, 1e-5)).max() < 1e-4


# -- growth ------------------------------------------------------------------------


def test_widen_preserves_outputs():
    net = random_net([3, 10, 1], "relu", 14)
    large, view = widen(net, 0, 10, Rng(15))
    x = Rng(16).uniform(-3, 3, (100, 3))
    np.testing.assert_allclose(large(x), net(x), rtol=0, atol=1e-12)


def test_widen_example_one_shapes():
    n = 4
    net = random_net([n, 10, 1], "relu", 17)
    large, view = widen(net, 0, 10, Rng(18))
    assert large.weights[0].shape == (20, n)
    assert large.weights[1].shape == (1, 20)
    assert not large.weights[1][:, 10:].any()
    assert np.array_equal(view.extract(large).theta, net.theta)


def test_widen_second_layer():
    net = random_net([5, 10, 10, 1], "relu", 19)
    large, view = widen(net, 1, 10, Rng(20))
    assert large.sizes == (5, 10, 20, 1)
    x = Rng(21).uniform(-1, 1, (100, 5))
    np.testing.assert_allclose(large(x), net(x), rtol=0, atol=1e-12)
    assert np.array_equal(view.extract(large).theta, net.theta)


def test_widen_rejects_output_layer():
    with pytest.raises(IndexError):
        widen(random_net([2, 3, 1], "relu", 0), 1, 2, Rng(0))


def test_add_layer_theta0_pattern():
    net = random_net([1, 2, 1], "relu", 22)
    large, view = add_layer(net, 1, 3, "identity")
    assert large.sizes == (1, 2, 3, 1)
    # old output layer becomes the first row, remaining rows zero
    np.testing.assert_array_equal(large.weights[1], np.vstack([net.weights[1], np.zeros((2, 2))]))
    np.testing.assert_array_equal(large.biases[1], [net.biases[1][0], 0.0, 0.0])
    np.testing.assert_array_equal(large.weights[2], [[1.0, 0.0, 0.0]])
    assert large.biases[2].tolist() == [0.0]


def test_add_layer_blend_at_zero_is_old_net():
    net = random_net([3, 5, 2], "relu", 23)
    large, view = add_layer(net, 1, 4, "relu", Rng(24), fill="random")
    x = Rng(25).uniform(-2, 2, (100, 3))
    assert np.array_equal(blend_forward(HomotopyBlend(large, view, 0.0), x), net(x))


def test_add_layer_identity_preserves_large_output():
    net = random_net([3, 5, 2], "sigmoid", 26)
    large, _ = add_layer(net, 1, 4, "identity")
    x = Rng(27).uniform(-2, 2, (100, 3))
    np.testing.assert_allclose(large(x), net(x), rtol=0, atol=1e-12)


def test_add_layer_relu_passes_nonnegative_outputs():
    net = Mlp([1, 2, 1], ["relu", "identity"], np.array([1.0, -1.0, 0.0, 0.0, 2.0, 1.0, 0.5]))
    large, _ = add_layer(net, 1, 3, "relu")
    x = np.array([1.5])
    assert net(x)[0] >= 0
    assert large(x).tolist() == net(x).tolist()
    x = np.array([-4.0])  # old output 2*4 + 0.5 positive through the second unit
    assert large(x).tolist() == net(x).tolist()


def test_add_layer_relu_clips_negative_outputs():
    net = Mlp([1, 1, 1], ["relu", "identity"], np.array([1.0, 0.0, -1.0, 0.0]))
    large, view = add_layer(net, 1, 2, "relu")
    x = np.array([2.0])
    assert net(x).tolist() == [-2.0]
    assert large(x).tolist() == [0.0]
    assert blend_forward(HomotopyBlend(large, view, 0.0), x).tolist() == [-2.0]


def test_add_layer_hidden_position():
    net = random_net([2, 4, 3, 1], "relu", 28)
    large, view = add_layer(net, 1, 6, "relu", Rng(29), fill="random")
    assert large.sizes == (2, 4, 6, 3, 1)
    x = Rng(30).uniform(-1, 1, (100, 2))
    # relu(relu(z)) == relu(z): exact even with a ReLU on the inserted layer
    np.testing.assert_array_equal(large(x), net(x))


def test_add_layer_rejects_narrow_width():
    with pytest.raises(ValueError):
        add_layer(random_net([2, 4, 3], "relu", 0), 1, 2)


# -- continuation schedule ----------------------------------------------------------


def test_schedule_steps():
    assert HtaSchedule(0.5).ts() == [0.5, 1.0]
    assert HtaSchedule(1.0).ts() == [1.0]
    s = HtaSchedule(0.1)
    assert s.steps == 10 and s.ts()[-1] == 1.0
    assert abs(s.steps * s.delta_t - 1) <= 1e-12
    with pytest.raises(ValueError):
        HtaSchedule(0.3)
    with pytest.raises(ValueError):
        HtaSchedule(0.0)


def _toy_data(n=40, seed=31):
    x = Rng(seed).uniform(-1, 1, (n, 2))
    return x, np.sin(x.sum(axis=1, keepdims=True))


def test_hta_train_trace_bookkeeping():
    x, y = _toy_data()
    _, large, view = widened_pair(hidden="relu", seed=32)
    b = HomotopyBlend(large, view, 0.0)
    sched = HtaSchedule(0.5, epochs_per_step=3)
    theta, trace = hta_train(b, x, y, sched, TrainConfig(batch_size=16, seed=1))
    assert theta is large.theta
    assert len(trace.epochs) == sched.steps * sched.epochs_per_step
    ts = [e[2] for e in trace.epochs]
    assert ts == [0.5] * 3 + [1.0] * 3
    assert trace.n_steps == 6 * 3  # ceil(40 / 16) steps per epoch
    assert trace.k == list(range(trace.n_steps))


def test_hta_train_presolve_visits_zero_first():
    x, y = _toy_data()
    _, large, view = widened_pair(hidden="relu", seed=33)
    _, trace = hta_train(HomotopyBlend(large, view), x, y, HtaSchedule(0.5, 2), TrainConfig(batch_size=40),
                         presolve_epochs=2)
    assert [e[2] for e in trace.epochs] == [0.0, 0.0, 0.5, 0.5, 1.0, 1.0]
    assert all(a <= b for a, b in zip(trace.t, trace.t[1:]))


def test_hta_single_step_equals_plain_sgd():
    x, y = _toy_data()
    small = random_net([2, 3, 1], "relu", 34)
    large, view = widen(small, 0, 3, Rng(35))
    reference = large.copy()
    cfg = TrainConfig(batch_size=8, seed=77)
    sched = HtaSchedule(1.0, epochs_per_step=4)
    theta, trace = hta_train(HomotopyBlend(large, view), x, y, sched, cfg)
    from hta.homotopy import _phase_seed

    _, ref_trace = plain_train(reference, x, y, cfg.replace(epochs=4, seed=_phase_seed(cfg.seed, 0, 0)))
    assert np.array_equal(theta, reference.theta)
    assert trace.batch_loss == ref_trace.batch_loss


def test_multi_stage_example_two_path():
    x = Rng(36).uniform(-1, 1, (60, 5))
    y = np.sin(x.sum(axis=1, keepdims=True))
    base = random_net([5, 10, 10, 1], "relu", 37)
    stages = [(Widen(0, 10), HtaSchedule(0.5, 1)), (Widen(1, 10), HtaSchedule(0.5, 1))]
    final, trace, history = multi_stage_train(stages, base, x, y, TrainConfig(epochs=1, batch_size=32))
    assert [h.sizes[1:-1] for h in history] == [(10, 10), (20, 10), (20, 20)]
    assert final.sizes == (5, 20, 20, 1)
    assert [e[1] for e in trace.epochs] == [0, 1, 1, 2, 2]


def test_multi_stage_empty_is_plain_training():
    x, y = _toy_data()
    base = random_net([2, 4, 1], "relu", 38)
    ref = base.copy()
    cfg = TrainConfig(epochs=3, batch_size=10, seed=5)
    final, trace, _ = multi_stage_train([], base, x, y, cfg)
    from hta.homotopy import _phase_seed

    plain_train(ref, x, y, cfg.replace(seed=_phase_seed(5, 0, 0)))
    assert final is base and np.array_equal(final.theta, ref.theta)


def test_multi_stage_add_layer():
    x, y = _toy_data()
    base = random_net([2, 4, 1], "relu", 39)
    stages = [(AddLayer(1, 3, Activation.IDENTITY), HtaSchedule(0.5, 2))]
    final, _, history = multi_stage_train(stages, base, x, y, TrainConfig(epochs=2, batch_size=40))
    assert final.sizes == (2, 4, 3, 1)
