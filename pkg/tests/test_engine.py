import math

import numpy as np
import pytest

from app.core.exceptions import NonFiniteError, ShapeError, TapeError
from app.engine import ops
from app.engine.gradcheck import grad_check
from app.engine.optim import AdamState, adam_step, clip_grad_norm
from app.engine.tensor import Tape, Tensor, backward, set_check_finite

SEEDS = range(20)
TOL = 1e-4


def _rand(rng, *shape):
    return rng.normal(size=shape)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _rand(rng, 2, 3, 5, 5), _rand(rng, 2, 3, 3, 3), _rand(rng, 2)
    err = grad_check(lambda x, w, b: ops.total(ops.conv2d(x, w, b, padding=1)), [x, w, b], max_coords=12, seed=seed)
    assert err < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_pointwise_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _rand(rng, 2, 4, 3, 3), _rand(rng, 3, 4, 1, 1), _rand(rng, 3)
    weights = _rand(rng, 2, 3, 3, 3)

    def f(x, w, b):
        return ops.total(ops.mul(ops.conv2d(x, w, b), Tensor(weights, dtype=np.float64)))

    assert grad_check(f, [x, w, b], max_coords=12, seed=seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_activation_gradients(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 2, 3, 3)
    assert grad_check(lambda t: ops.total(ops.mul(ops.gelu(t), ops.gelu(t))), [x]) < TOL
    assert grad_check(lambda t: ops.total(ops.mul(ops.sigmoid(t), t)), [x]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_set_and_resize_gradients(seed):
    rng = np.random.default_rng(seed)
    ctx = _rand(rng, 3, 2, 2, 4, 4)
    w = Tensor(_rand(rng, 2, 2, 4, 4), dtype=np.float64)

    def f(c):
        pooled = ops.mean_over_set(c)
        down = ops.resize2(pooled, "down")
        up = ops.resize2(down, "up")
        return ops.total(ops.mul(up, w))

    assert grad_check(f, [ctx]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_channel_ops_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, 2, 2, 3, 3), _rand(rng, 2, 1, 3, 3)
    w = Tensor(_rand(rng, 2, 3, 3, 3), dtype=np.float64)

    def f(a, b):
        cat = ops.concat_channels(a, b)
        return ops.total(ops.mul(ops.mul(cat, w), ops.concat_channels(ops.slice_channels(cat, 1, 3), b)))

    assert grad_check(f, [a, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_arithmetic_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, 3, 4), rng.uniform(0.5, 2.0, size=(3, 4))

    def f(a, b):
        q = ops.div(ops.add(a, b), b)
        r = ops.sub(ops.scale(q, 3.0), ops.shift(a, 0.5))
        return ops.mean(ops.sum_per_sample(ops.mul(r, r)))

    assert grad_check(f, [a, b]) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_repeat_set_and_reshape_gradients(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 2, 2)
    w = Tensor(_rand(rng, 4, 3, 2, 2), dtype=np.float64)

    def f(t):
        return ops.total(ops.mul(ops.reshape(ops.repeat_set(t, 2), (4, 3, 2, 2)), w))

    assert grad_check(f, [x]) < TOL


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), padding=1).numpy()
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                expected[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_conv2d_with_bias_matches_direct_loop():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(1, 3, 8, 8)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
    out = ops.conv2d(*(Tensor(a, dtype=np.float64) for a in (x, w, b)), padding=1).numpy()
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 2, 8, 8))
    for o in range(2):
        for i in range(8):
            for j in range(8):
                expected[0, o, i, j] = b[o] + sum(
                    xp[0, c, i + di, j + dj] * w[o, c, di, dj]
                    for c in range(3) for di in range(3) for dj in range(3)
                )
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_conv2d_box_kernel_on_constant_image():
    x = Tensor(np.full((1, 1, 4, 4), 5.0))
    out = ops.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1).numpy()[0, 0]
    # нулевое дополнение: угол видит 4 пикселя, край 6, центр 9
    np.testing.assert_array_equal(out[1:3, 1:3], 45.0)
    assert out[0, 0] == out[0, 3] == out[3, 0] == out[3, 3] == 20.0
    assert out[0, 1] == out[2, 3] == 30.0


def test_gelu_scalar_values():
    out = ops.gelu(Tensor(np.array([0.0, 10.0, -1.0]), dtype=np.float64)).numpy()
    expected = 0.5 * -1.0 * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (-1.0 - 0.044715)))
    assert out[0] == 0.0
    assert out[1] == pytest.approx(10.0, abs=1e-4)
    assert out[2] == pytest.approx(expected, abs=1e-12)


def test_resize_down_averages_blocks():
    out = ops.resize2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), "down").numpy()
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == pytest.approx(2.5)


def test_grad_check_of_linear_function_is_exact():
    x = np.random.default_rng(0).uniform(0.0, 1.0, size=(2, 3))
    # для линейной функции центральная разность точна при любом шаге
    assert grad_check(ops.total, [x], eps=1e-3) < 1e-10


def test_conv2d_rejects_bad_shapes():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((1, 2, 5, 5))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))


def test_mean_over_set_of_copies_is_exact():
    rng = np.random.default_rng(3)
    member = rng.normal(size=(2, 3, 4)).astype(np.float32)
    stacked = Tensor(np.stack([member] * 7))
    np.testing.assert_array_equal(ops.mean_over_set(stacked).numpy(), member)


def test_mean_over_set_rejects_empty():
    with pytest.raises(ShapeError):
        ops.mean_over_set(Tensor(np.zeros((0, 2, 2))))


def test_resize_down_requires_even_extent():
    with pytest.raises(ShapeError):
        ops.resize2(Tensor(np.zeros((1, 1, 3, 4))), "down")


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        loss = ops.total(ops.mul(x, x))
        backward(loss)
        with pytest.raises(TapeError):
            backward(loss)


def test_backward_without_tape_raises():
    loss = ops.total(Tensor(np.ones(3), requires_grad=True))
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ops.scale(x, 2.0)
        with pytest.raises(TapeError):
            tape.backward(y)


def test_gradient_accumulates_over_shared_inputs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    with Tape():
        grads = backward(ops.total(ops.add(ops.mul(x, x), x)))
    np.testing.assert_allclose(grads[x], 2 * x.data + 1)


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        ops.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_non_finite_check_can_be_disabled():
    set_check_finite(False)
    try:
        out = ops.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.isinf(out.numpy()).all()
    finally:
        set_check_finite(True)


def test_tensors_are_immutable():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_adam_first_step_moves_by_lr():
    param = Tensor(np.array([1.0, -2.0]), requires_grad=True, name="w")
    grads = {"w": np.array([0.5, -3.0], dtype=np.float32)}
    new, state = adam_step({"w": param}, grads, AdamState(lr=0.1))
    # после поправки смещения первый шаг равен lr · sign(g)
    np.testing.assert_allclose(new["w"].numpy(), [0.9, -1.9], rtol=1e-5)
    assert state.step == 1


def test_adam_minimizes_a_parabola():
    params, state = {"x": Tensor(np.array([1.0]), requires_grad=True, name="x")}, AdamState(lr=0.1)
    for _ in range(100):
        params, state = adam_step(params, {"x": 2.0 * params["x"].numpy()}, state)
    assert abs(float(params["x"].numpy()[0])) < 0.05
    assert state.step == 100


def test_adam_treats_missing_gradient_as_zero():
    param = Tensor(np.ones(2), requires_grad=True)
    new, state = adam_step({"w": param}, {}, AdamState())
    np.testing.assert_array_equal(new["w"].numpy(), param.numpy())
    assert state.m["w"].shape == (2,)


def test_adam_rejects_bad_gradients():
    param = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step({"w": param}, {"w": np.ones(3, dtype=np.float32)}, AdamState())
    with pytest.raises(NonFiniteError):
        adam_step({"w": param}, {"w": np.array([np.nan, 0.0], dtype=np.float32)}, AdamState())


def test_clip_grad_norm_scales_to_max():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum(float(np.sum(g ** 2)) for g in clipped.values()))
    assert total == pytest.approx(1.0)


def test_clip_grad_norm_keeps_small_gradients():
    grads = {"a": np.array([0.1, 0.2])}
    clipped, _ = clip_grad_norm(grads, 1.0)
    assert clipped is grads
