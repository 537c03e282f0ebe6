"""Autodiff engine: finite-difference gradient checks, shape errors and tape semantics."""

import numpy as np
import pytest

from oracles import check_gradients, projected
from shortcut_probe import tensor as T
from shortcut_probe.errors import DomainError, ShapeError, UsageError
from shortcut_probe.tensor import Tape, Tensor

N_INSTANCES = 20
TOL = 1e-4


def param(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def away_from(x, point=0.0, gap=1e-2):
    """Move entries at least ``gap`` away from a kink at ``point``."""
    d = x - point
    return point + np.sign(d + (d == 0)) * (np.abs(d) + gap)


def _unary_case(op, make_input):
    def run(rng):
        x = param(make_input(rng))
        out = op(x)
        w = rng.standard_normal(out.shape)
        return check_gradients(lambda: projected(op(x), w), [x])
    return run


def _binary_case(op, shape_a, shape_b):
    def run(rng):
        a = param(rng.standard_normal(shape_a))
        b = param(rng.standard_normal(shape_b))
        w = rng.standard_normal(op(a, b).shape)
        return check_gradients(lambda: projected(op(a, b), w), [a, b])
    return run


def _conv_case(rng):
    n, c, f, h = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), 2 * rng.integers(1, 4)
    x = param(rng.standard_normal((n, c, h, h)))
    k = param(rng.standard_normal((f, c, 3, 3)))
    b = param(rng.standard_normal(f))
    w = rng.standard_normal((n, f, h, h))
    return check_gradients(lambda: projected(T.conv2d(x, k, b), w), [x, k, b])


def _linear_case(rng):
    x = param(rng.standard_normal((4, 5)))
    w = param(rng.standard_normal((3, 5)))
    b = param(rng.standard_normal(3))
    proj = rng.standard_normal((4, 3))
    return check_gradients(lambda: projected(T.linear(x, w, b), proj), [x, w, b])


def _pick_case(rng):
    labels = rng.integers(0, 4, size=6)
    x = param(rng.standard_normal((6, 4)))
    proj = rng.standard_normal(6)
    return check_gradients(lambda: projected(T.pick(x, labels), proj), [x])


def _softmax_case(rng):
    x = param(3 * rng.standard_normal((5, 4)))
    proj = rng.standard_normal((5, 4))
    return check_gradients(lambda: projected(T.softmax(x), proj), [x])


def _channel_affine_case(rng):
    x = param(rng.standard_normal((2, 3, 4, 4)))
    shift, factor = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    proj = rng.standard_normal((2, 3, 4, 4))
    return check_gradients(lambda: projected(T.channel_affine(x, shift, factor), proj), [x])


def _shared_input_case(rng):
    # x feeds two paths; its gradient must be the sum of both
    x = param(rng.standard_normal((3, 3)))
    proj = rng.standard_normal((3, 3))
    return check_gradients(lambda: projected(T.add(T.mul(x, x), T.exp(x)), proj), [x])


CASES = {
    "add": _binary_case(T.add, (3, 4), (3, 4)),
    "mul": _binary_case(T.mul, (3, 4), (3, 4)),
    "matmul": _binary_case(T.matmul, (3, 5), (5, 2)),
    "scale": _unary_case(lambda x: T.scale(x, -1.7), lambda r: r.standard_normal((4, 3))),
    "relu": _unary_case(T.relu, lambda r: away_from(r.standard_normal((4, 5)))),
    "exp": _unary_case(T.exp, lambda r: r.standard_normal((3, 4))),
    "log": _unary_case(T.log, lambda r: r.uniform(0.2, 3.0, (3, 4))),
    "clamp_min": _unary_case(lambda x: T.clamp_min(x, 0.3),
                             lambda r: away_from(r.uniform(-1, 2, (4, 4)), 0.3)),
    "sum_all": _unary_case(T.tsum, lambda r: r.standard_normal((3, 4))),
    "sum_axis0": _unary_case(lambda x: T.tsum(x, 0), lambda r: r.standard_normal((3, 4))),
    "sum_axis_last": _unary_case(lambda x: T.tsum(x, -1), lambda r: r.standard_normal((3, 4))),
    "mean": _unary_case(lambda x: T.mean(x, 1), lambda r: r.standard_normal((3, 4))),
    "reshape": _unary_case(lambda x: T.reshape(x, (6, 2)), lambda r: r.standard_normal((3, 4))),
    "flatten": _unary_case(T.flatten, lambda r: r.standard_normal((2, 3, 2, 2))),
    "transpose": _unary_case(T.transpose, lambda r: r.standard_normal((3, 4))),
    "add_bias": _binary_case(T.add_bias, (4, 3), (3,)),
    "avgpool2": _unary_case(T.avgpool2, lambda r: r.standard_normal((2, 3, 4, 6))),
    "linear": _linear_case,
    "conv2d": _conv_case,
    "pick": _pick_case,
    "softmax": _softmax_case,
    "channel_affine": _channel_affine_case,
    "shared_input": _shared_input_case,
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name):
    worst = 0.0
    for i in range(N_INSTANCES):
        rng = np.random.default_rng([17, i])
        worst = max(worst, CASES[name](rng))
    assert worst < TOL, f"{name}: worst relative error {worst:.3g}"


def test_relu_gradient_at_zero_is_zero():
    x = param([[-1.0, 0.0, 2.0]])
    tape = Tape()
    with tape:
        loss = T.tsum(T.relu(x))
    T.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [[0.0, 0.0, 1.0]])


def test_shared_input_gradient_is_sum_of_paths():
    x = param([1.5, -0.5])
    tape = Tape()
    with tape:
        loss = T.tsum(T.add(T.scale(x, 2.0), T.scale(x, 3.0)))
    T.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [5.0, 5.0])


def test_softmax_rows_are_distributions():
    rng = np.random.default_rng(0)
    p = T.softmax(Tensor(50 * rng.standard_normal((200, 4)))).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_log_rejects_non_positive():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


@pytest.mark.parametrize("fn", [
    lambda: T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))),
    lambda: T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))),
    lambda: T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 3, 3))), Tensor(np.ones(3))),
    lambda: T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 2, 5, 5))), Tensor(np.ones(3))),
    lambda: T.avgpool2(Tensor(np.ones((1, 1, 3, 4)))),
    lambda: T.pick(Tensor(np.ones((3, 4))), [0, 1]),
    lambda: T.reshape(Tensor(np.ones((3, 4))), (5, 2)),
    lambda: T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(4))),
    lambda: T.softmax(Tensor(np.ones((3, 1)))),
])
def test_shape_errors(fn):
    with pytest.raises(ShapeError):
        fn()


def test_tensor_rejects_empty_dimension():
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


def test_backward_requires_scalar_loss():
    x = param(np.ones((2, 2)))
    tape = Tape()
    with tape:
        y = T.mul(x, x)
    with pytest.raises(UsageError):
        T.backward(y, tape)


def test_backward_requires_loss_from_tape():
    x = param(np.ones(3))
    tape = Tape()
    loss = T.tsum(x)  # recorded outside any tape
    with pytest.raises(UsageError):
        T.backward(loss, tape)


def test_no_recording_without_grad_inputs():
    tape = Tape()
    with tape:
        T.tsum(T.exp(Tensor(np.ones(3))))
    assert tape.nodes == []


def test_gradients_accumulate_across_backward_calls():
    x = param([2.0])
    for _ in range(2):
        tape = Tape()
        with tape:
            loss = T.tsum(T.scale(x, 3.0))
        T.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [6.0])


def test_deterministic_outputs():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    a1 = T.avgpool2(T.relu(T.conv2d(Tensor(x), Tensor(k), Tensor(b)))).data
    a2 = T.avgpool2(T.relu(T.conv2d(Tensor(x), Tensor(k), Tensor(b)))).data
    assert np.array_equal(a1, a2)


def test_conv2d_matches_direct_cross_correlation():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 5, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 5))
    for i in range(5):
        for j in range(5):
            patch = pad[:, :, i:i + 3, j:j + 3]
            ref[:, :, i, j] = np.einsum("ncij,fcij->nf", patch, k) + b
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data, ref, atol=1e-12)


def test_worked_examples():
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]])).data,
                                  [[3, 4], [5, 6]])
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11]])
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(T.softmax(Tensor(np.zeros((1, 4)))).data, [[0.25] * 4])
    big = T.softmax(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all() and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300


def test_conv_worked_examples():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1))).data[0, 0]
    assert out[1, 1] == 9 and out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    out = T.conv2d(Tensor(x), Tensor(np.zeros((2, 3, 3, 3))), Tensor([1.5, -2.0])).data
    assert (out[:, 0] == 1.5).all() and (out[:, 1] == -2.0).all()


def test_backward_worked_examples():
    x = param([1.0, 2.0, 3.0])
    tape = Tape()
    with tape:
        loss = T.tsum(T.mul(x, x))
    T.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2, 4, 6])
    y = param([1.0, 2.0, 3.0])
    tape = Tape()
    with tape:
        loss = T.tsum(y)
    T.backward(loss, tape)
    np.testing.assert_array_equal(y.grad, [1, 1, 1])
    z = param([0.5, -0.5])
    tape = Tape()
    with tape:
        loss = T.tsum(T.scale(z, 0.0))
    T.backward(loss, tape)
    assert not loss.item() and not z.grad.any()
