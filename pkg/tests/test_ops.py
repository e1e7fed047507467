import numpy as np
import pytest

from oracles import (batchnorm_train_naive, conv2d_naive, conv_sweep_configs,
                     maxpool2d_naive, softmax_xent_naive)
from wiser import ops
from wiser.autograd import Tape, backward, grad_check
from wiser.tensor import ShapeError, Tensor


def _leaf(tape, arr, name=None, grad=True):
    return tape.leaf(Tensor(np.asarray(arr, dtype=np.float64)), grad, name)


def _weighted(out, tape, seed=0):
    # scalar projection with fixed weights; keeps grad_check losses scalar
    r = np.random.default_rng(seed).standard_normal(out.value.shape)
    return ops.tsum(ops.mul(out, tape.leaf(Tensor(r))))


# ---------------------------------------------------------------------------
# elementwise / linear algebra

def test_add_channel_vector_backward():
    tape = Tape()
    x = _leaf(tape, np.ones((2, 3, 2, 2)), "x")
    b = _leaf(tape, np.array([1.0, 2.0, 3.0]), "b")
    loss = ops.tsum(ops.add(x, b))
    backward(loss)
    assert np.allclose(x.grad, 1.0)
    # each channel bias feeds N*H*W = 8 outputs
    assert np.allclose(b.grad, [8.0, 8.0, 8.0])


def test_matmul_backward_hand_values():
    tape = Tape()
    a = _leaf(tape, [[1.0, 2.0]], "a")
    b = _leaf(tape, [[3.0], [4.0]], "b")
    loss = ops.tsum(ops.matmul(a, b))
    backward(loss)
    assert np.allclose(a.grad, [[3.0, 4.0]])
    assert np.allclose(b.grad, [[1.0], [2.0]])


def test_reshape_round_trips_gradient():
    tape = Tape()
    x = _leaf(tape, np.arange(12.0).reshape(3, 4), "x")
    y = ops.reshape(x, (2, 6))
    assert y.value.shape == (2, 6)
    loss = ops.tsum(ops.mul(y, y))
    backward(loss)
    assert np.allclose(x.grad, 2.0 * x.value.data)


def test_reshape_size_mismatch():
    tape = Tape()
    x = _leaf(tape, np.ones((2, 3)), "x")
    with pytest.raises(ShapeError):
        ops.reshape(x, (7,))


def test_relu_forward_and_mask():
    tape = Tape()
    x = _leaf(tape, [-2.0, -0.5, 0.0, 0.5, 2.0], "x")
    y = ops.relu(x)
    assert np.array_equal(y.value.data, [0.0, 0.0, 0.0, 0.5, 2.0])
    loss = ops.tsum(y)
    backward(loss)
    # subgradient at exactly zero is zero
    assert np.array_equal(x.grad, [0.0, 0.0, 0.0, 1.0, 1.0])


def test_scale_backward():
    tape = Tape()
    x = _leaf(tape, [1.0, 2.0], "x")
    loss = ops.tsum(ops.scale(x, -3.0))
    backward(loss)
    assert np.allclose(x.grad, [-3.0, -3.0])


def test_concat_channels_backward_splits():
    tape = Tape()
    a = _leaf(tape, np.ones((2, 2, 2, 2)), "a")
    b = _leaf(tape, np.ones((2, 3, 2, 2)), "b")
    cat = ops.concat_channels(a, b)
    assert cat.value.shape == (2, 5, 2, 2)
    w = np.zeros((2, 5, 2, 2))
    w[:, :2] = 1.0
    w[:, 2:] = 10.0
    loss = ops.tsum(ops.mul(cat, tape.leaf(Tensor(w))))
    backward(loss)
    assert np.allclose(a.grad, 1.0)
    assert np.allclose(b.grad, 10.0)


# ---------------------------------------------------------------------------
# convolution

def test_conv_hand_values():
    # all-ones 3x3 input, 2x2 ones kernel, bias 0.5: every output is 4.5
    tape = Tape()
    x = _leaf(tape, np.ones((1, 1, 3, 3)), "x")
    w = _leaf(tape, np.ones((1, 1, 2, 2)), "w")
    b = _leaf(tape, [0.5], "b")
    out = ops.conv2d(x, ops.Conv2dParams(w, b))
    assert out.value.shape == (1, 1, 2, 2)
    assert np.allclose(out.value.data, 4.5)


def test_conv_forward_oracle_sweep_single_precision():
    rng = np.random.default_rng(2024)
    configs = conv_sweep_configs(rng, 60)
    for cfg in configs:
        x = rng.standard_normal((cfg["n"], cfg["c"], cfg["h"], cfg["w"])).astype(np.float32)
        w = rng.standard_normal((cfg["oc"], cfg["c"], cfg["kh"], cfg["kw"])).astype(np.float32)
        b = rng.standard_normal(cfg["oc"]).astype(np.float32) if cfg["bias"] else None
        tape = Tape()
        xn = tape.leaf(Tensor(x), False, None)
        wn = tape.leaf(Tensor(w), False, None)
        bn = tape.leaf(Tensor(b)) if b is not None else None
        got = ops.conv2d(xn, ops.Conv2dParams(wn, bn, cfg["stride"], cfg["padding"]))
        want = conv2d_naive(x.astype(np.float64), w.astype(np.float64),
                            None if b is None else b.astype(np.float64),
                            cfg["stride"], cfg["padding"])
        assert got.value.shape == want.shape, cfg
        err = np.abs(got.value.data - want) / np.maximum(1.0, np.abs(want))
        assert err.max() < 1e-5, (cfg, err.max())


def test_conv_full_width_collapses_to_one_column():
    tape = Tape()
    x = _leaf(tape, np.random.default_rng(0).standard_normal((2, 3, 9, 7)), "x")
    w = _leaf(tape, np.random.default_rng(1).standard_normal((4, 3, 5, 7)), "w")
    out = ops.conv2d(x, ops.Conv2dParams(w))
    assert out.value.shape == (2, 4, 5, 1)


def test_conv_geometry_floor_division():
    # 5 rows, k=3, stride 2, no padding: floor((5-3)/2)+1 = 2 rows out
    tape = Tape()
    x = _leaf(tape, np.zeros((1, 1, 5, 6)), "x")
    w = _leaf(tape, np.zeros((1, 1, 3, 3)), "w")
    out = ops.conv2d(x, ops.Conv2dParams(w, stride=(2, 2)))
    assert out.value.shape == (1, 1, 2, 2)


def test_conv_shape_errors():
    tape = Tape()
    x = _leaf(tape, np.zeros((1, 2, 4, 4)), "x")
    w_bad_c = _leaf(tape, np.zeros((1, 3, 3, 3)), "w1")
    with pytest.raises(ShapeError):
        ops.conv2d(x, ops.Conv2dParams(w_bad_c))
    w_big = _leaf(tape, np.zeros((1, 2, 5, 5)), "w2")
    with pytest.raises(ShapeError):
        ops.conv2d(x, ops.Conv2dParams(w_big))
    w = _leaf(tape, np.zeros((1, 2, 3, 3)), "w3")
    with pytest.raises(ShapeError):
        ops.conv2d(x, ops.Conv2dParams(w, stride=(0, 1)))
    b_bad = _leaf(tape, np.zeros(2), "b")
    with pytest.raises(ShapeError):
        ops.conv2d(x, ops.Conv2dParams(w, b_bad))


def _conv_build(stride, padding, with_bias=True, rseed=0):
    def build(tape, values):
        x = tape.leaf(values["x"], True, "x")
        w = tape.leaf(values["w"], True, "w")
        b = tape.leaf(values["b"], True, "b") if with_bias else None
        out = ops.conv2d(x, ops.Conv2dParams(w, b, stride, padding))
        return _weighted(out, tape, rseed)
    return build


def test_conv_gradcheck_plain():
    rng = np.random.default_rng(5)
    params = {"x": Tensor(rng.standard_normal((2, 2, 5, 5))),
              "w": Tensor(rng.standard_normal((3, 2, 3, 3))),
              "b": Tensor(rng.standard_normal(3))}
    res = grad_check(_conv_build((1, 1), (1, 1)), params)
    assert res.max_rel_err < 1e-6, res.worst


def test_conv_gradcheck_strided_asymmetric():
    rng = np.random.default_rng(6)
    params = {"x": Tensor(rng.standard_normal((2, 3, 7, 6))),
              "w": Tensor(rng.standard_normal((2, 3, 2, 4))),
              "b": Tensor(rng.standard_normal(2))}
    res = grad_check(_conv_build((2, 3), (2, 0)), params)
    assert res.max_rel_err < 1e-6, res.worst


def test_conv_gradcheck_full_width():
    rng = np.random.default_rng(7)
    params = {"x": Tensor(rng.standard_normal((2, 2, 8, 5))),
              "w": Tensor(rng.standard_normal((3, 2, 4, 5))),
              "b": Tensor(rng.standard_normal(3))}
    res = grad_check(_conv_build((1, 1), (0, 0)), params)
    assert res.max_rel_err < 1e-6, res.worst


# ---------------------------------------------------------------------------
# batch normalization

def _bn_nodes(tape, c, rng):
    g = _leaf(tape, rng.standard_normal(c) * 0.5 + 1.0, "gamma")
    b = _leaf(tape, rng.standard_normal(c) * 0.2, "beta")
    return g, b


def test_batchnorm_train_forward_oracle():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((3, 4, 5, 2))
    tape = Tape()
    xn = _leaf(tape, x, "x")
    g, b = _bn_nodes(tape, 4, rng)
    p = ops.BatchNormParams(g, b, np.zeros(4), np.ones(4))
    out = ops.batchnorm(xn, p)
    want, means, variances = batchnorm_train_naive(
        x, g.value.data, b.value.data, eps=1e-5)
    assert np.allclose(out.value.data, want, atol=1e-10)
    # running buffers fold in the biased batch statistics
    assert np.allclose(p.running_mean, 0.9 * 0.0 + 0.1 * means, atol=1e-12)
    assert np.allclose(p.running_var, 0.9 * 1.0 + 0.1 * variances, atol=1e-12)


def test_batchnorm_train_output_statistics():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((8, 3, 6, 6)) * 3.0 + 5.0
    tape = Tape()
    xn = _leaf(tape, x, "x")
    gamma = _leaf(tape, [2.0, 0.5, 1.5], "gamma")
    beta = _leaf(tape, [1.0, -1.0, 0.0], "beta")
    out = ops.batchnorm(xn, ops.BatchNormParams(gamma, beta, np.zeros(3), np.ones(3)))
    got = out.value.data
    assert np.allclose(got.mean(axis=(0, 2, 3)), [1.0, -1.0, 0.0], atol=1e-10)
    assert np.allclose(got.std(axis=(0, 2, 3)), [2.0, 0.5, 1.5], atol=1e-4)


def test_batchnorm_eval_uses_running_stats():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 3, 4, 4))
    mean = np.array([1.0, -2.0, 0.5])
    var = np.array([4.0, 0.25, 1.0])
    tape = Tape()
    xn = _leaf(tape, x, "x")
    gamma = _leaf(tape, [1.0, 2.0, 3.0], "gamma")
    beta = _leaf(tape, [0.0, 1.0, -1.0], "beta")
    p = ops.BatchNormParams(gamma, beta, mean.copy(), var.copy(), mode="eval")
    out = ops.batchnorm(xn, p)
    inv = 1.0 / np.sqrt(var + 1e-5)
    want = ((x - mean.reshape(1, 3, 1, 1)) * inv.reshape(1, 3, 1, 1)
            * np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1)
            + np.array([0.0, 1.0, -1.0]).reshape(1, 3, 1, 1))
    assert np.allclose(out.value.data, want, atol=1e-12)
    # eval mode must not touch the buffers
    assert np.array_equal(p.running_mean, mean)
    assert np.array_equal(p.running_var, var)


def test_batchnorm_train_rejects_single_value_channels():
    tape = Tape()
    xn = _leaf(tape, np.ones((1, 3, 1, 1)), "x")
    gamma = _leaf(tape, np.ones(3), "gamma")
    beta = _leaf(tape, np.zeros(3), "beta")
    with pytest.raises(ShapeError):
        ops.batchnorm(xn, ops.BatchNormParams(gamma, beta, np.zeros(3), np.ones(3)))


def _bn_build(mode):
    running_mean = np.array([0.3, -0.2])
    running_var = np.array([1.5, 0.7])

    def build(tape, values):
        x = tape.leaf(values["x"], True, "x")
        g = tape.leaf(values["gamma"], True, "gamma")
        b = tape.leaf(values["beta"], True, "beta")
        p = ops.BatchNormParams(g, b, running_mean.copy(), running_var.copy(), mode=mode)
        return _weighted(ops.batchnorm(x, p), tape, 1)
    return build


def test_batchnorm_gradcheck_train():
    rng = np.random.default_rng(13)
    params = {"x": Tensor(rng.standard_normal((3, 2, 4, 3))),
              "gamma": Tensor(np.array([1.2, 0.8])),
              "beta": Tensor(np.array([0.1, -0.3]))}
    res = grad_check(_bn_build("train"), params)
    assert res.max_rel_err < 1e-6, res.worst


def test_batchnorm_gradcheck_eval():
    rng = np.random.default_rng(14)
    params = {"x": Tensor(rng.standard_normal((2, 2, 3, 3))),
              "gamma": Tensor(np.array([0.9, 1.1])),
              "beta": Tensor(np.array([0.0, 0.5]))}
    res = grad_check(_bn_build("eval"), params)
    assert res.max_rel_err < 1e-6, res.worst


# ---------------------------------------------------------------------------
# pooling

def test_maxpool_forward_oracle_sweep():
    rng = np.random.default_rng(20)
    for _ in range(25):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        wh = int(rng.integers(1, 4))
        ww = int(rng.integers(1, 4))
        h = int(rng.integers(wh, 9))
        w = int(rng.integers(ww, 9))
        stride = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        x = rng.standard_normal((n, c, h, w))
        tape = Tape()
        xn = _leaf(tape, x, "x")
        got = ops.maxpool2d(xn, (wh, ww), stride)
        want = maxpool2d_naive(x, (wh, ww), stride)
        assert got.value.shape == want.shape
        assert np.array_equal(got.value.data, want)


def test_maxpool_tie_routes_to_first_element():
    # constant input: every window's first element takes the gradient
    tape = Tape()
    xn = _leaf(tape, np.zeros((1, 1, 4, 4)), "x")
    out = ops.maxpool2d(xn, (2, 2), (2, 2))
    backward(ops.tsum(out))
    want = np.zeros((4, 4))
    want[0::2, 0::2] = 1.0
    assert np.array_equal(xn.grad[0, 0], want)


def test_maxpool_overlapping_windows_accumulate():
    # single peak seen by all four overlapping 2x2 windows
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 5.0
    tape = Tape()
    xn = _leaf(tape, x, "x")
    out = ops.maxpool2d(xn, (2, 2), (1, 1))
    assert np.all(out.value.data == 5.0)
    backward(ops.tsum(out))
    assert xn.grad[0, 0, 1, 1] == 4.0


def test_maxpool_gradcheck_tie_free():
    # distinct values everywhere so h-perturbations cannot flip the argmax
    vals = np.random.default_rng(21).permutation(2 * 2 * 6 * 5).astype(np.float64)
    x = Tensor(vals.reshape(2, 2, 6, 5) * 0.01)

    def build(tape, values):
        xn = tape.leaf(values["x"], True, "x")
        return _weighted(ops.maxpool2d(xn, (2, 2), (2, 1)), tape, 2)

    res = grad_check(build, {"x": x})
    assert res.max_rel_err < 1e-6, res.worst


def test_maxpool_window_validation():
    tape = Tape()
    xn = _leaf(tape, np.zeros((1, 1, 3, 3)), "x")
    with pytest.raises(ShapeError):
        ops.maxpool2d(xn, (4, 1), (1, 1))


def test_global_avgpool_forward_backward():
    rng = np.random.default_rng(22)
    x = rng.standard_normal((3, 4, 5, 6))
    tape = Tape()
    xn = _leaf(tape, x, "x")
    out = ops.global_avgpool(xn)
    assert out.value.shape == (3, 4)
    assert np.allclose(out.value.data, x.mean(axis=(2, 3)), atol=1e-12)
    backward(ops.tsum(out))
    assert np.allclose(xn.grad, 1.0 / 30.0)


# ---------------------------------------------------------------------------
# linear / loss

def test_linear_forward_and_gradcheck():
    rng = np.random.default_rng(30)

    def build(tape, values):
        x = tape.leaf(values["x"], True, "x")
        w = tape.leaf(values["w"], True, "w")
        b = tape.leaf(values["b"], True, "b")
        return _weighted(ops.linear(x, w, b), tape, 3)

    params = {"x": Tensor(rng.standard_normal((4, 5))),
              "w": Tensor(rng.standard_normal((5, 3))),
              "b": Tensor(rng.standard_normal(3))}
    res = grad_check(build, params)
    assert res.max_rel_err < 1e-6, res.worst


def test_softmax_xent_forward_oracle_sweep():
    rng = np.random.default_rng(31)
    for _ in range(30):
        n = int(rng.integers(1, 9))
        c = int(rng.integers(2, 12))
        logits = rng.standard_normal((n, c)) * 4.0
        labels = rng.integers(0, c, size=n)
        tape = Tape()
        zn = _leaf(tape, logits, "z")
        loss, probs = ops.softmax_cross_entropy(zn, labels)
        want = softmax_xent_naive(logits, labels)
        assert abs(loss.value.item() - want) < 1e-10
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(32)
    logits = rng.standard_normal((4, 6))
    labels = np.array([0, 2, 5, 1])
    tape = Tape()
    _, p1 = ops.softmax_cross_entropy(_leaf(tape, logits, "a"), labels)
    _, p2 = ops.softmax_cross_entropy(_leaf(tape, logits + 300.0, "b"), labels)
    assert np.allclose(p1, p2, atol=1e-12)
    assert np.isfinite(p2).all()


def test_uniform_logits_loss_is_log_c():
    for c in (2, 5, 10, 100):
        tape = Tape()
        zn = _leaf(tape, np.zeros((3, c)), "z")
        loss, probs = ops.softmax_cross_entropy(zn, np.zeros(3, dtype=np.int64))
        assert abs(loss.value.item() - np.log(c)) < 1e-12
        assert np.allclose(probs, 1.0 / c, atol=1e-15)


def test_xent_gradient_is_probs_minus_onehot():
    rng = np.random.default_rng(33)
    logits = rng.standard_normal((5, 4))
    labels = np.array([1, 0, 3, 2, 2])
    tape = Tape()
    zn = _leaf(tape, logits, "z")
    loss, probs = ops.softmax_cross_entropy(zn, labels)
    backward(loss)
    onehot = np.zeros((5, 4))
    onehot[np.arange(5), labels] = 1.0
    assert np.allclose(zn.grad, (probs - onehot) / 5.0, atol=1e-12)


def test_xent_gradcheck():
    rng = np.random.default_rng(34)
    labels = np.array([0, 3, 1])

    def build(tape, values):
        z = tape.leaf(values["z"], True, "z")
        loss, _ = ops.softmax_cross_entropy(z, labels)
        return loss

    res = grad_check(build, {"z": Tensor(rng.standard_normal((3, 4)))})
    assert res.max_rel_err < 1e-6, res.worst


def test_xent_label_validation():
    tape = Tape()
    zn = _leaf(tape, np.zeros((2, 3)), "z")
    with pytest.raises(ShapeError):
        ops.softmax_cross_entropy(zn, np.array([0, 3]))
    with pytest.raises(ShapeError):
        ops.softmax_cross_entropy(zn, np.array([0.0, 1.0]))
    with pytest.raises(ShapeError):
        ops.softmax_cross_entropy(zn, np.array([0, 1, 2]))
