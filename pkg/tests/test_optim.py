import numpy as np
import numpy.testing as npt
import pytest

from vfnerf.autodiff import ParamStore
from vfnerf.optim import NonFiniteGradientError, OptimizerState, optimizer_step


def store(values):
    ps = ParamStore([("w", (len(values),))])
    ps["w"] = values
    return ps


class TestOptimizerStep:
    def test_zero_gradient_leaves_params(self):
        ps = store([1.0, -2.0, 3.0])
        before = ps.data.copy()
        optimizer_step(OptimizerState(len(ps), base_lr=0.1), ps)
        npt.assert_array_equal(ps.data, before)

    def test_first_step_magnitude_is_lr(self):
        ps = store([0.0, 0.0])
        ps.grad[:] = [3.0, -0.02]
        optimizer_step(OptimizerState(len(ps), base_lr=0.01), ps)
        npt.assert_allclose(ps.data, [-0.01, 0.01], rtol=1e-6)

    def test_gradients_zeroed(self):
        ps = store([1.0])
        ps.grad[:] = 1.0
        optimizer_step(OptimizerState(1), ps)
        npt.assert_array_equal(ps.grad, 0.0)

    def test_non_finite_gradient_rejected(self):
        ps = store([1.0, 2.0])
        ps.grad[:] = [np.nan, 1.0]
        opt = OptimizerState(2)
        with pytest.raises(NonFiniteGradientError, match="w"):
            optimizer_step(opt, ps)
        npt.assert_array_equal(ps.data, [1.0, 2.0])
        assert opt.step == 0 and not opt.m.any()

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            optimizer_step(OptimizerState(3), store([1.0]))

    def test_quadratic_bowl_converges(self):
        target = np.array([0.3, -1.2, 2.0])
        scale = np.array([1.0, 10.0, 0.1])
        ps = store([0.0, 0.0, 0.0])
        opt = OptimizerState(3, base_lr=0.05, decay_rate=0.01, total_epochs=2000)
        for step in range(2000):
            ps.grad[:] = 2 * scale * (ps.data - target)
            optimizer_step(opt, ps, epoch=step)
        npt.assert_allclose(ps.data, target, atol=1e-4)


class TestSchedule:
    def test_exponential_decay(self):
        opt = OptimizerState(1, base_lr=5e-4, decay_rate=0.1, total_epochs=300)
        assert opt.lr(0) == 5e-4
        assert opt.lr(300) == pytest.approx(5e-5)
        assert opt.lr(150) == pytest.approx(5e-4 * 0.1**0.5)

    def test_step_returns_lr(self):
        ps = store([1.0])
        ps.grad[:] = 1.0
        opt = OptimizerState(1, base_lr=1.0, decay_rate=0.5, total_epochs=10)
        assert optimizer_step(opt, ps, epoch=10) == pytest.approx(0.5)
