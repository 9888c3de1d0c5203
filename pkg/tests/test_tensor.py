import numpy as np
import pytest

from ddcmnet.gradcheck import gradcheck
from ddcmnet.nn import functional as F
from ddcmnet.tensor import (ShapeError, Tape, Tensor, backward, concat, elementwise, exp, log,
                            make_result, no_grad, square, tsum)


def test_add_and_scalar_mul():
    np.testing.assert_array_equal((Tensor([1, 2]) + Tensor([3, 4])).data, [4, 6])
    np.testing.assert_array_equal((Tensor([2, 3]) * 0).data, [0, 0])


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError) as exc:
        Tensor([1, 2]) + Tensor([1, 2, 3])
    assert "(2,)" in str(exc.value) and "(3,)" in str(exc.value)


def test_square_sum_gradient():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(tsum(a * a))
    np.testing.assert_allclose(a.grad, [2, 4, 6])
    # central differences
    f = lambda v: np.sum(v * v)
    h = 1e-6
    num = [(f(a.data + h * e) - f(a.data - h * e)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(a.grad, num, rtol=1e-8)


def test_linear_and_sigmoid_gradients():
    x = Tensor(np.zeros(3), requires_grad=True)
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x = Tensor(np.zeros(3), requires_grad=True)
    backward(tsum(F.sigmoid(x)))
    np.testing.assert_allclose(x.grad, 0.25)


def test_grad_accumulates_over_reuse():
    a = Tensor([1.0, -2.0], requires_grad=True)
    b = a * a + a * 3.0 - a
    backward(tsum(b))
    np.testing.assert_allclose(a.grad, 2 * a.data + 2)


def test_backward_requires_scalar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(a * 2.0)
    with pytest.raises(RuntimeError):
        backward(tsum(Tensor([1.0])))


def test_tape_order_is_recording_order():
    a = Tensor([1.0], requires_grad=True)
    b = a * 2.0
    c = exp(b)
    d = tsum(c + b)
    seqs = [t._seq for t in Tape(d).nodes]
    assert seqs == sorted(seqs)
    assert Tape(d).nodes[-1] is d


def test_no_grad_records_nothing():
    a = Tensor([1.0], requires_grad=True)
    with no_grad():
        b = a * 2.0
    assert not b.requires_grad and b.is_leaf


def test_composed_graph_gradcheck():
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def f(a, b):
        y = elementwise("max", log(a) * b, square(b) / a)
        return tsum(concat([exp(y * 0.1), y], axis=0) * 0.5)

    assert gradcheck(f, [a, b]).passed


def test_gradcheck_sum_is_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5)), requires_grad=True)
    assert gradcheck(lambda x: tsum(x), [x]).max_rel_error < 1e-10


def test_gradcheck_catches_wrong_rule():
    def bad_square(a):
        return make_result(a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    x = Tensor(np.random.default_rng(1).normal(size=5), requires_grad=True)
    assert not gradcheck(lambda x: tsum(bad_square(x)), [x]).passed
