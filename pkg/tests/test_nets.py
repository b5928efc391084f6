import numpy as np
import pytest

from bsderk.nets import (
    AdamState,
    MLP,
    NetError,
    RegressionBatch,
    ScalarMSELoss,
    TrainSchedule,
    TrainingDiverged,
    adam_step,
    init_mlp,
    load_checkpoint,
    loss_gradient,
    param_count,
    save_checkpoint,
    split_heads,
    train_to_convergence,
)


def test_param_count_matches_actual_arrays():
    net = init_mlp(10, 21, 20, seed=0)
    # each layer stores out*(in+1) numbers; for dims 10-20-20-21 that is 1081
    by_sum = param_count([10, 20, 20, 21])
    actual = sum(w.size + b.size for w, b in zip(net.weights, net.biases))
    assert by_sum == actual == 1081
    assert net.pack().size == 1081
    assert param_count([3, 7, 7, 5]) == 7 * 4 + 7 * 8 + 5 * 8


def test_init_deterministic_and_finite():
    a = init_mlp(4, 5, 8, seed=123)
    b = init_mlp(4, 5, 8, seed=123)
    np.testing.assert_array_equal(a.pack(), b.pack())
    out = a(np.random.default_rng(0).standard_normal((32, 4)))
    assert np.all(np.isfinite(out))
    zero_seed = init_mlp(4, 5, 8, seed=0)
    assert np.all(np.isfinite(zero_seed(np.zeros((2, 4)))))


def test_forward_zero_parameters():
    net = init_mlp(3, 4, 6, seed=1)
    net.unpack(np.zeros(net.n_params))
    out = net(np.random.default_rng(1).standard_normal((10, 3)))
    np.testing.assert_array_equal(out, np.zeros((10, 4)))


def test_forward_hand_computed_chain():
    net = MLP(
        weights=[np.array([[0.7]]), np.array([[1.3]]), np.array([[0.9]])],
        biases=[np.array([0.1]), np.array([-0.2]), np.array([0.05])],
    )
    x = np.array([[0.4]])
    expected = 0.9 * np.tanh(1.3 * np.tanh(0.7 * 0.4 + 0.1) - 0.2) + 0.05
    assert net(x)[0, 0] == pytest.approx(expected, abs=1e-12)


def test_batch_order_preserved():
    net = init_mlp(3, 2, 5, seed=2)
    x = np.random.default_rng(2).standard_normal((20, 3))
    perm = np.random.default_rng(3).permutation(20)
    np.testing.assert_allclose(net(x)[perm], net(x[perm]), atol=1e-14)


def test_dim_mismatch_raises():
    net = init_mlp(3, 2, 5, seed=2)
    with pytest.raises(NetError):
        net(np.zeros((4, 5)))


def test_split_heads():
    out = np.arange(14.0).reshape(2, 7)
    u, v, a = split_heads(out, 3)
    assert u.shape == (2,) and v.shape == (2, 3) and a.shape == (2, 3)
    u2, v2, a2 = split_heads(out[:, :4], 3)
    assert a2 is None
    with pytest.raises(NetError):
        split_heads(out[:, :6], 3)


def test_input_standardization():
    net = init_mlp(2, 1, 4, seed=5, input_center=np.array([1.0, -1.0]),
                   input_scale=np.array([2.0, 0.5]))
    raw = np.array([[3.0, -2.0]])
    bare = init_mlp(2, 1, 4, seed=5)
    np.testing.assert_allclose(net(raw), bare(np.array([[1.0, -2.0]])), atol=1e-14)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    net = init_mlp(4, 3, 6, seed=7)
    x = rng.standard_normal((32, 4))
    y = np.cos(x.sum(axis=1))
    batch = RegressionBatch(x=x, y=y)
    loss = ScalarMSELoss()
    value, gw, gb = loss_gradient(net, loss, batch)
    flat = np.concatenate([g.ravel() for pair in zip(gw, gb) for g in pair])
    theta = net.pack()
    idx = rng.choice(theta.size, size=60, replace=False)
    # flat gradient layout matches pack(): [W1, b1, W2, b2, W3, b3]
    packed = []
    for w, b in zip(gw, gb):
        packed.append(w.ravel())
        packed.append(b.ravel())
    flat = np.concatenate(packed)
    eps = 1e-5
    scale = np.max(np.abs(flat))
    for i in idx:
        tp = theta.copy()
        tp[i] += eps
        net.unpack(tp)
        up = loss.value(net(batch.x), batch)
        tp[i] -= 2 * eps
        net.unpack(tp)
        dn = loss.value(net(batch.x), batch)
        fd = (up - dn) / (2 * eps)
        assert abs(fd - flat[i]) <= 1e-5 * max(abs(fd), abs(flat[i]), 0.01 * scale)
        net.unpack(theta)


def test_constant_objective_has_zero_gradient():
    class ConstLoss:
        def value(self, out, batch):
            return 3.5

        def value_and_output_grads(self, out, batch):
            return 3.5, np.zeros_like(out)

    net = init_mlp(2, 2, 4, seed=8)
    _, gw, gb = loss_gradient(net, ConstLoss(),
                              RegressionBatch(np.zeros((5, 2)), np.zeros(5)))
    assert all(np.all(g == 0) for g in gw + gb)


def test_linear_regime_least_squares_optimum():
    rng = np.random.default_rng(9)
    net = init_mlp(3, 1, 6, seed=10)
    # shrink the hidden layers so tanh is effectively linear
    for w in net.weights[:-1]:
        w *= 0.01
    x = rng.standard_normal((200, 3))
    y = x @ np.array([0.3, -0.2, 0.1])
    _, acts = net.forward(x)
    feats = np.hstack([acts[-1], np.ones((200, 1))])
    coef, *_ = np.linalg.lstsq(feats, y, rcond=None)
    net.weights[-1][:, 0] = coef[:-1]
    net.biases[-1][0] = coef[-1]
    _, gw, gb = loss_gradient(net, ScalarMSELoss(), RegressionBatch(x, y))
    assert np.max(np.abs(gw[-1])) < 1e-10
    assert np.max(np.abs(gb[-1])) < 1e-10


def test_adam_zero_gradient_no_move():
    net = init_mlp(2, 1, 3, seed=11)
    before = net.pack()
    st = AdamState.for_net(net, lr=0.1)
    adam_step(st, net, [np.zeros_like(w) for w in net.weights],
              [np.zeros_like(b) for b in net.biases])
    np.testing.assert_array_equal(net.pack(), before)


def test_adam_constant_gradient_step_size():
    net = init_mlp(1, 1, 2, seed=12)
    st = AdamState.for_net(net, lr=1e-3)
    g_w = [np.full_like(w, 2.0) for w in net.weights]
    g_b = [np.full_like(b, 2.0) for b in net.biases]
    prev = net.pack()
    moves = []
    for _ in range(300):
        adam_step(st, net, g_w, g_b)
        cur = net.pack()
        moves.append(cur - prev)
        prev = cur
    late = np.array(moves[-50:])
    assert np.all(late < 0)  # monotone move opposite the gradient
    np.testing.assert_allclose(-late, 1e-3, rtol=1e-3)


def test_adam_quadratic_convergence():
    # minimize (theta - 3)^2 for a single parameter at rate 1e-2
    net = MLP(weights=[np.array([[0.0]])], biases=[np.array([0.0])])
    st = AdamState.for_net(net, lr=1e-2)
    for i in range(10_000):
        theta = net.weights[0][0, 0]
        g = 2.0 * (theta - 3.0)
        adam_step(st, net, [np.array([[g]])], [np.array([0.0])])
        if abs(net.weights[0][0, 0] - 3.0) < 1e-6 and i > 100:
            break
    assert abs(net.weights[0][0, 0] - 3.0) < 1e-6


class _GaussianRegression:
    """Fresh Gaussian batches for a fixed scalar target function."""

    def __init__(self, dim, fn):
        self.dim = dim
        self.fn = fn

    def __call__(self, rng, size):
        x = rng.standard_normal((size, self.dim))
        return RegressionBatch(x=x, y=self.fn(x))


def test_schedule_validation():
    with pytest.raises(NetError):
        TrainSchedule(batch_size=10, decay=1.5)
    with pytest.raises(NetError):
        TrainSchedule(batch_size=10, initial_lr=1e-4, stop_lr=1e-2)


def test_stop_equals_initial_returns_after_first_window():
    net = init_mlp(2, 2, 3, seed=13)

    class ConstLoss:
        def value(self, out, batch):
            return 1.0

        def value_and_output_grads(self, out, batch):
            return 1.0, np.zeros_like(out)

    schedule = TrainSchedule(batch_size=16, initial_lr=1e-3, stop_lr=1e-3)
    log = train_to_convergence(net, ConstLoss(),
                               _GaussianRegression(2, lambda x: x[:, 0]),
                               schedule, np.random.default_rng(0))
    assert log.epochs == schedule.check_every
    lrs = [row[3] for row in log.rows]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))  # monotone in the rate


def test_training_fits_cos_ridge():
    # Gaussian inputs at the coordinate scale the stage regressions see
    # (variance 1/d), so the ridge argument spreads about one radian
    d = 10
    scale = 1.0 / np.sqrt(d)
    net = init_mlp(d, 2, 20, seed=14,
                   input_center=np.zeros(d), input_scale=np.full(d, scale))

    class _Src:
        def __call__(self, rng, size):
            x = scale * rng.standard_normal((size, d))
            return RegressionBatch(x=x, y=np.cos(x.sum(axis=1)))

    schedule = TrainSchedule(batch_size=512, initial_lr=1e-2, stop_lr=1e-6)
    log = train_to_convergence(net, ScalarMSELoss(), _Src(), schedule,
                               np.random.default_rng(15))
    assert log.rows[-1][2] < 1e-3


def test_non_finite_loss_reports_sample():
    loss = ScalarMSELoss()
    out = np.zeros((4, 1))
    y = np.array([0.0, 1.0, np.inf, 2.0])
    with pytest.raises(TrainingDiverged) as err:
        loss.value(out, RegressionBatch(np.zeros((4, 1)), y))
    assert err.value.sample_index == 2


def test_checkpoint_round_trip(tmp_path):
    net = init_mlp(3, 5, 7, seed=16, input_center=np.array([1.0, 2.0, 3.0]),
                   input_scale=np.array([0.5, 1.5, 2.5]))
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, str(path))
    back = load_checkpoint(str(path))
    np.testing.assert_array_equal(back.pack(), net.pack())
    np.testing.assert_array_equal(back.input_center, net.input_center)
    x = np.random.default_rng(17).standard_normal((8, 3))
    np.testing.assert_allclose(back(x), net(x), atol=1e-15)
