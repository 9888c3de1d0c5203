import numpy as np
import pytest

from ddcmnet.nn import Parameter
from ddcmnet.optim import AdamAMSGrad, LRSchedule, is_bias, lr_at
from ddcmnet.rng import RngState


def test_lr_milestones():
    expect = {0: 0.00012, 4: 0.00012, 5: 0.00006, 14: 0.00006, 15: 0.00003, 25: 1.5e-5,
              64: 1.5e-5, 65: 7.5e-6, 100: 3.75e-6, 119: 3.75e-6}
    for epoch, lr in expect.items():
        assert lr_at(epoch) == lr
    assert lr_at(0, "bias") == 0.00024
    for epoch in range(130):
        assert lr_at(epoch, "bias") == 2 * lr_at(epoch)
    with pytest.raises(ValueError):
        lr_at(-1)


def test_bias_grouping():
    assert is_bias("low.blocks.0.conv.bias")
    assert is_bias("seg_head.bias")
    assert not is_bias("low.blocks.0.conv.weight")
    assert not is_bias("bias_weight")


def _single(value, name="w", **kw):
    p = Parameter(np.asarray(value, dtype=float))
    return p, AdamAMSGrad([(name, p)], **kw)


def test_zero_gradient_fixed_point():
    p, opt = _single([1.0, -2.0], weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_magnitude():
    sched = LRSchedule(initial=0.01)
    p, opt = _single([0.5, 3.0], schedule=sched, weight_decay=0.0)
    p.grad = np.ones(2)
    opt.step()
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    np.testing.assert_allclose([0.5, 3.0] - p.data, 0.01 / (1 + 1e-8), rtol=1e-12)


def test_bias_gets_double_step_and_no_decay():
    w, b = Parameter(np.ones(1)), Parameter(np.ones(1))
    opt = AdamAMSGrad([("conv.weight", w), ("conv.bias", b)], weight_decay=0.5)
    w.grad = np.ones(1)
    b.grad = np.ones(1)
    opt.step()
    np.testing.assert_allclose(1 - b.data, 2 * 0.00012 / (1 + 1e-8), rtol=1e-12)
    assert opt.m["conv.weight"][0] == pytest.approx(0.1 * 1.5)
    assert opt.m["conv.bias"][0] == pytest.approx(0.1)


def test_vmax_never_decreases():
    rng = RngState(3)
    p, opt = _single(np.zeros(5))
    prev = np.zeros(5)
    for _ in range(100):
        p.grad = rng.normal(0, 1, size=5) * rng.uniform(0, 3)
        opt.step()
        assert np.all(opt.v_max["w"] >= prev)
        prev = opt.v_max["w"].copy()


def test_quadratic_is_minimized():
    rng = np.random.default_rng(4)
    target = rng.normal(size=6)
    p, opt = _single(np.zeros(6), schedule=LRSchedule(initial=0.05), weight_decay=0.0)
    f = lambda x: float(np.sum((x - target) ** 2))
    f0 = f(p.data)
    for _ in range(500):
        p.grad = 2 * (p.data - target)
        opt.step()
    assert f(p.data) <= 0.01 * f0


def test_nonfinite_gradient_names_parameter():
    p, opt = _single([1.0], name="head.weight")
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="head.weight"):
        opt.step()
    assert p.data[0] == 1.0


def test_state_round_trip():
    p, opt = _single([1.0, 2.0])
    p.grad = np.array([0.3, -0.1])
    opt.step()
    state = {k: v.copy() for k, v in opt.state_dict().items()}
    q, other = _single([1.0, 2.0])
    other.load_state_dict(state)
    assert other.t == 1
    np.testing.assert_array_equal(other.m["w"], opt.m["w"])
    np.testing.assert_array_equal(other.v_max["w"], opt.v_max["w"])
