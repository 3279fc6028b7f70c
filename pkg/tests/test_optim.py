import math

import numpy as np
import pytest

from graphage.errors import TrainingError
from graphage.optim import SGD, AdamW, lr_at, scaled_lr
from graphage.tensor import Tensor


def test_adamw_first_step_is_almost_signed_lr():
    # f(t) = t^2 / 2 at t=1 gives gradient 1; bias correction makes the
    # first Adam step lr * g / (|g| + eps), so t moves to ~0.9
    t = Tensor(np.array(1.0), requires_grad=True)
    (t * t * 0.5).backward()
    opt = AdamW({"t": t}, lr=0.1)
    opt.step()
    assert abs(t.data - 0.9) < 1e-8


def test_adamw_decoupled_decay_is_exact_with_zero_grad():
    t = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    opt = AdamW({"t": t}, lr=0.1, weight_decay=0.01)
    opt.step()  # grad buffer is all zeros
    np.testing.assert_allclose(t.data, np.array([2.0, -4.0]) * (1.0 - 0.1 * 0.01), rtol=0, atol=0)


def test_adamw_and_sgd_share_first_step_direction():
    rng = np.random.default_rng(11)
    x = rng.normal(size=7)
    g = rng.normal(size=7)
    ta = Tensor(x, requires_grad=True)
    ts = Tensor(x, requires_grad=True)
    ta.grad[...] = g
    ts.grad[...] = g
    AdamW({"p": ta}, lr=1e-3).step()
    SGD({"p": ts}, lr=1e-3).step()
    np.testing.assert_array_equal(np.sign(ta.data - x), np.sign(ts.data - x))


def test_sgd_momentum_accumulates_velocity():
    t = Tensor(np.array(0.0), requires_grad=True)
    t.grad[...] = 1.0
    opt = SGD({"t": t}, lr=1.0, momentum=0.5)
    opt.step()
    assert t.data == -1.0
    opt.step()  # velocity = 0.5 * 1 + 1 = 1.5
    assert t.data == -2.5


def test_nan_gradient_raises_with_parameter_name():
    t = Tensor(np.array([1.0]), requires_grad=True)
    t.grad[...] = np.nan
    opt = AdamW({"stem.weight": t}, lr=0.1)
    with pytest.raises(TrainingError, match="stem.weight"):
        opt.step()


def test_optimizer_zero_grad_resets_buffers():
    t = Tensor(np.ones(3), requires_grad=True)
    t.grad[...] = 5.0
    opt = SGD({"t": t}, lr=0.1)
    opt.zero_grad()
    np.testing.assert_array_equal(t.grad, np.zeros(3))


def test_adamw_converges_on_quadratic():
    t = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = AdamW({"t": t}, lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ((t * t).sum() * 0.5).backward()
        opt.step()
    assert np.abs(t.data).max() < 1e-3


def test_lr_schedule_endpoints_and_warmup_peak():
    base = 0.4
    assert lr_at(0, 100, 10, base) == 0.0
    assert lr_at(10, 100, 10, base) == pytest.approx(base, abs=1e-15)
    assert lr_at(100, 100, 10, base) == pytest.approx(0.0, abs=1e-15)
    # halfway through the cosine span the rate is half the base
    assert lr_at(55, 100, 10, base) == pytest.approx(0.5 * base, abs=1e-12)


def test_lr_schedule_monotone_up_then_down():
    vals = [lr_at(s, 200, 20, 1.0) for s in range(201)]
    assert all(b >= a for a, b in zip(vals[:20], vals[1:21]))
    assert all(b <= a + 1e-15 for a, b in zip(vals[20:-1], vals[21:]))


def test_lr_schedule_validates_inputs():
    with pytest.raises(ValueError):
        lr_at(5, 100, 100, 1.0)
    with pytest.raises(ValueError):
        lr_at(-1, 100, 10, 1.0)
    with pytest.raises(ValueError):
        lr_at(101, 100, 10, 1.0)


def test_lr_continuous_at_warmup_boundary():
    base = 1.5e-4
    left = lr_at(49, 1000, 50, base)
    peak = lr_at(50, 1000, 50, base)
    right = lr_at(51, 1000, 50, base)
    assert left < peak
    assert right < peak
    assert peak == pytest.approx(base)
    assert peak - left < base / 40
    assert peak - right < base * math.pi**2 / 2 / 950**2 * 10


def test_linear_scaling_rule():
    assert scaled_lr(1.5e-4, 256) == pytest.approx(1.5e-4)
    assert scaled_lr(1.5e-4, 1024) == pytest.approx(6e-4)
    assert scaled_lr(1.5e-4, 32) == pytest.approx(1.5e-4 / 8)
