import numpy as np
import pytest

from femtodet.tensor import (
    ShapeError,
    Tensor,
    add,
    batch_norm,
    bce_with_logits,
    concat_channels,
    conv2d,
    exp,
    grad_check,
    log,
    make_batch_norm,
    maximum,
    minimum,
    parameter,
    relu,
    sigmoid,
    slice_channels,
    tensor,
    upsample_nearest,
)

from oracles import naive_conv


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_pointwise_identity_passthrough(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 5)).astype(np.float32))
    w = Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
    b = Tensor(np.zeros(3, dtype=np.float32))
    y = conv2d(x, w, b)
    np.testing.assert_array_equal(y.data, x.data)


def test_zero_input_gives_bias(rng):
    x = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float64))
    w = Tensor(rng.standard_normal((2, 1, 3, 3)))
    b = Tensor(np.array([1.5, -0.25]))
    y = conv2d(x, w, b, stride=1, padding=1)
    for c, bv in enumerate(b.data):
        np.testing.assert_array_equal(y.data[:, c], np.full((1, 4, 4), bv))


def test_conv_matches_naive_loops_exactly(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    w = rng.standard_normal((1, 1, 3, 3))
    b = rng.standard_normal(1)
    ours = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
    ref = naive_conv(x, w, b, 1, 1, 1)
    # same summation order in 64-bit: bit-identical
    np.testing.assert_array_equal(ours, ref)


@pytest.mark.parametrize("shape,cout,k,s,p,g", [
    ((2, 4, 8, 8), 6, 3, 1, 1, 1),
    ((2, 4, 8, 8), 4, 3, 2, 1, 4),
    ((1, 3, 8, 8), 5, 1, 1, 0, 1),
    ((2, 4, 8, 8), 6, 3, 2, 1, 2),
    ((2, 2, 7, 7), 2, 1, 2, 0, 2),
    ((1, 3, 8, 8), 8, 5, 1, 2, 1),
])
def test_conv_oracle_sweep(rng, shape, cout, k, s, p, g):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((cout, shape[1] // g, k, k))
    b = rng.standard_normal(cout)
    ours = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=s, padding=p, groups=g).data
    ref = naive_conv(x, w, b, s, p, g)
    assert np.abs(ours - ref).max() < 1e-12


def test_conv_is_linear_without_bias(rng):
    x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
    y = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    alpha, beta = 0.7, -1.3

    def f(v):
        return conv2d(Tensor(v), w, None, stride=1, padding=1).data

    lhs = f((alpha * x + beta * y).astype(np.float32))
    rhs = alpha * f(x) + beta * f(y)
    # relative to the output scale (elementwise ratios blow up on cancellation)
    assert np.abs(lhs - rhs).max() / np.abs(rhs).max() < 1e-6


def test_conv_shape_errors_name_axis(rng):
    x = Tensor(rng.standard_normal((1, 3, 4, 4)))
    w = Tensor(rng.standard_normal((2, 4, 3, 3)))
    with pytest.raises(ShapeError, match="channel axis"):
        conv2d(x, w, None, padding=1)
    wee = Tensor(rng.standard_normal((2, 3, 9, 9)))
    with pytest.raises(ShapeError, match="height axis"):
        conv2d(x, wee, None)


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


def test_bn_eval_identity(rng):
    bn = make_batch_norm(3, dtype=np.float64)
    bn.mode = "eval"
    bn.running_var = np.full(3, 1.0 - bn.eps)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    y = batch_norm(x, bn)
    np.testing.assert_array_equal(y.data, x.data)


def test_bn_train_constant_input_returns_beta(rng):
    bn = make_batch_norm(2, dtype=np.float64)
    bn.beta.data = np.array([0.5, -1.0])
    x = Tensor(np.concatenate([np.full((2, 1, 3, 3), 7.0), np.full((2, 1, 3, 3), -2.0)], axis=1))
    y = batch_norm(x, bn)
    np.testing.assert_array_equal(y.data[:, 0], np.full((2, 3, 3), 0.5))
    np.testing.assert_array_equal(y.data[:, 1], np.full((2, 3, 3), -1.0))


def test_bn_train_hand_statistics():
    x = np.arange(1.0, 9.0).reshape(2, 1, 2, 2)
    # tiny eps so the normalized variance is 1 within the stated 1e-6
    # (the deviation is exactly eps/var)
    bn = make_batch_norm(1, eps=1e-9, dtype=np.float64)
    y = batch_norm(Tensor(x), bn)
    # batch mean 4.5, biased variance 5.25
    np.testing.assert_allclose(bn.running_mean, 0.9 * 0.0 + 0.1 * 4.5)
    np.testing.assert_allclose(bn.running_var, 0.9 * 1.0 + 0.1 * 5.25)
    assert abs(y.data.mean()) < 1e-6
    assert abs(y.data.var() - 1.0) < 1e-6
    np.testing.assert_allclose(y.data.var(), 5.25 / (5.25 + bn.eps), rtol=1e-12)


def test_bn_stat_alignment_invariant(rng):
    bn = make_batch_norm(4, dtype=np.float64)
    x = Tensor(rng.standard_normal((8, 4, 6, 6)) * 2.0 + 1.0)
    y = batch_norm(x, bn).data
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(y.var(axis=(0, 2, 3)) - 1.0).max() < 1e-4


def test_bn_validation_errors(rng):
    bn = make_batch_norm(3)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32))
    with pytest.raises(ShapeError, match="channel axis"):
        batch_norm(x, bn)
    with pytest.raises(ValueError, match="eps"):
        make_batch_norm(3, eps=0.0)


def test_bn_running_update_convention(rng):
    bn = make_batch_norm(1, momentum=0.25, dtype=np.float64)
    x = rng.standard_normal((4, 1, 3, 3))
    batch_norm(Tensor(x), bn)
    np.testing.assert_allclose(bn.running_mean, 0.75 * 0.0 + 0.25 * x.mean())
    np.testing.assert_allclose(bn.running_var, 0.75 * 1.0 + 0.25 * x.var())


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def test_relu_example():
    y = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])


def test_upsample_example():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    y = upsample_nearest(x, 2)
    assert y.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(y.data[0, 0, :2, :2], [[0, 0], [0, 0]])
    np.testing.assert_array_equal(y.data[0, 0, 2:, 2:], [[3, 3], [3, 3]])


def test_add_identity_and_mismatch(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)))
    np.testing.assert_array_equal(add(x, Tensor(np.zeros((1, 2, 3, 3)))).data, x.data)
    with pytest.raises(ShapeError):
        add(x, Tensor(np.zeros((1, 2, 3, 4))))


def test_tensor_rejects_nonfinite():
    with pytest.raises(ValueError):
        tensor(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        tensor(np.array([np.inf]))


def test_forward_replay_is_bit_identical(rng):
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    b = Tensor(rng.standard_normal(4))
    a = conv2d(x, w, b, padding=1).data
    again = conv2d(x, w, b, padding=1).data
    np.testing.assert_array_equal(a, again)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_grad_check_linear_layer_quadratic_loss(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    w = parameter(rng.standard_normal((5, 3, 1, 1)), dtype=np.float64)
    b = parameter(rng.standard_normal(5), dtype=np.float64)
    t = Tensor(rng.standard_normal((2, 5, 4, 4)))

    def loss_fn():
        d = conv2d(x, w, b) - t
        return (d * d).sum()

    assert grad_check(loss_fn, [w, b]) < 1e-8


@pytest.mark.parametrize("name", [
    "conv_vanilla", "conv_depthwise", "conv_pointwise", "bn_train", "bn_eval",
    "relu", "upsample", "add", "mul", "div", "sigmoid", "exp", "log",
    "maximum", "minimum", "bce", "slice", "concat",
])
def test_grad_check_every_op(rng, name):
    x = parameter(rng.standard_normal((2, 4, 4, 4)), dtype=np.float64)
    wgt = Tensor(rng.standard_normal((2, 4, 4, 4)))
    params = [x]

    if name == "conv_vanilla":
        w = parameter(rng.standard_normal((3, 4, 3, 3)) * 0.3, dtype=np.float64)
        b = parameter(rng.standard_normal(3) * 0.3, dtype=np.float64)
        wv = Tensor(rng.standard_normal((1, 3, 4, 4)))
        params += [w, b]
        fn = lambda: (conv2d(x, w, b, stride=1, padding=1) * wv).sum()
    elif name == "conv_depthwise":
        w = parameter(rng.standard_normal((4, 1, 3, 3)) * 0.3, dtype=np.float64)
        b = parameter(rng.standard_normal(4) * 0.3, dtype=np.float64)
        wd = Tensor(rng.standard_normal((2, 4, 2, 2)))
        params += [w, b]
        fn = lambda: (conv2d(x, w, b, stride=2, padding=1, groups=4) * wd).sum()
    elif name == "conv_pointwise":
        w = parameter(rng.standard_normal((6, 4, 1, 1)) * 0.3, dtype=np.float64)
        b = parameter(rng.standard_normal(6) * 0.3, dtype=np.float64)
        params += [w, b]
        fn = lambda: (conv2d(x, w, b) * conv2d(x, w, b)).sum()
    elif name in ("bn_train", "bn_eval"):
        bn = make_batch_norm(4, dtype=np.float64)
        bn.gamma.data = rng.standard_normal(4)
        bn.beta.data = rng.standard_normal(4)
        bn.running_mean = rng.standard_normal(4)
        bn.running_var = rng.random(4) + 0.5
        bn.mode = "train" if name == "bn_train" else "eval"
        params += [bn.gamma, bn.beta]
        fn = lambda: (batch_norm(x, bn) * wgt).sum()
    elif name == "relu":
        fn = lambda: (relu(x) * wgt).sum()
    elif name == "upsample":
        wu = Tensor(rng.standard_normal((2, 4, 8, 8)))
        fn = lambda: (upsample_nearest(x, 2) * wu).sum()
    elif name == "add":
        y = parameter(rng.standard_normal((2, 4, 4, 4)), dtype=np.float64)
        params += [y]
        fn = lambda: (add(x, y) * wgt).sum()
    elif name == "mul":
        fn = lambda: (x * x * wgt).sum()
    elif name == "div":
        y = parameter(rng.random((2, 4, 4, 4)) + 1.0, dtype=np.float64)
        params += [y]
        fn = lambda: ((x / y) * wgt).sum()
    elif name == "sigmoid":
        fn = lambda: (sigmoid(x) * wgt).sum()
    elif name == "exp":
        fn = lambda: (exp(x * 0.3) * wgt).sum()
    elif name == "log":
        y = parameter(rng.random((2, 4, 4, 4)) + 0.5, dtype=np.float64)
        params = [y]
        fn = lambda: (log(y) * wgt).sum()
    elif name == "maximum":
        y = parameter(rng.standard_normal((2, 4, 4, 4)), dtype=np.float64)
        params += [y]
        fn = lambda: (maximum(x, y) * wgt).sum()
    elif name == "minimum":
        y = parameter(rng.standard_normal((2, 4, 4, 4)), dtype=np.float64)
        params += [y]
        fn = lambda: (minimum(x, y) * wgt).sum()
    elif name == "bce":
        t = (rng.random((2, 4, 4, 4)) > 0.5).astype(np.float64)
        fn = lambda: bce_with_logits(x, t).sum()
    elif name == "slice":
        ws = Tensor(rng.standard_normal((2, 2, 4, 4)))
        fn = lambda: (slice_channels(x, 1, 3) * ws).sum()
    elif name == "concat":
        y = parameter(rng.standard_normal((2, 2, 4, 4)), dtype=np.float64)
        wc = Tensor(rng.standard_normal((2, 6, 4, 4)))
        params += [y]
        fn = lambda: (concat_channels([x, y]) * wc).sum()
    else:
        raise AssertionError(name)

    assert grad_check(fn, params) < 1e-5


def test_grad_check_validates_preconditions(rng):
    x = parameter(rng.standard_normal((1, 1, 2, 2)), dtype=np.float32)
    with pytest.raises(ValueError, match="float64"):
        grad_check(lambda: (x * x).sum(), [x])
    x64 = parameter(rng.standard_normal((1, 1, 2, 2)), dtype=np.float64)
    with pytest.raises(ValueError, match="step"):
        grad_check(lambda: (x64 * x64).sum(), [x64], step=1e-2)
