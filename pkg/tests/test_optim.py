import numpy as np
import pytest

from crossalign.autodiff import Tensor
from crossalign.errors import DimensionError
from crossalign.optim import OptimizerState, adam_step


def test_zero_grad_zero_decay_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    state = OptimizerState(lr=1e-3, weight_decay=0.0)
    before = p.data.copy()
    adam_step({"p": p}, {"p": np.zeros(3, dtype=p.data.dtype)}, state)
    np.testing.assert_array_equal(p.data, before)


def test_first_step_moves_by_learning_rate():
    # closed form: m_hat = g, v_hat = g^2, so the step is lr * g/(|g| + eps) ~ lr
    lr = 5e-6
    p = Tensor(np.array(1.0))
    state = OptimizerState(lr=lr, weight_decay=0.0)
    adam_step({"p": p}, {"p": np.array(1.0, dtype=p.data.dtype)}, state)
    expected = 1.0 - lr * 1.0 / (1.0 + 1e-8)
    assert float(p.data) == pytest.approx(expected, rel=1e-6)


def test_decoupled_decay_shrinks_by_exact_factor():
    lr, wd = 1e-3, 1e-2
    p = Tensor(np.array([2.0, -4.0]))
    state = OptimizerState(lr=lr, weight_decay=wd)
    before = p.data.copy()
    adam_step({"p": p}, {"p": np.zeros(2, dtype=p.data.dtype)}, state)
    np.testing.assert_allclose(p.data, before * (1.0 - lr * wd), rtol=1e-7)


def test_shape_mismatch_raises():
    p = Tensor(np.zeros((2, 2)))
    state = OptimizerState()
    with pytest.raises(DimensionError):
        adam_step({"p": p}, {"p": np.zeros(3)}, state)


def test_step_counter_and_moments_track_parameters():
    p = Tensor(np.array([1.0, 1.0]))
    state = OptimizerState(lr=1e-2, weight_decay=0.0)
    for step in range(1, 4):
        adam_step({"p": p}, {"p": np.full(2, 0.5, dtype=p.data.dtype)}, state)
        assert state.step_count == step
    assert state.m["p"].shape == p.shape
    assert state.v["p"].shape == p.shape
