"""Unit tests for Tensor and reverse-mode differentiation."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from rerender_pi.tensor import NonFiniteError, Parameter, Tensor, backward, float64_mode, no_grad


def test_tensor_is_4d():
    with pytest.raises(ValueError):
        Tensor(np.zeros((3, 4, 4)))
    assert Tensor(np.zeros((1, 3, 4, 4))).dtype == np.float32
    with float64_mode():
        assert Tensor(np.zeros((1, 1, 1, 1))).dtype == np.float64
    assert Tensor(np.zeros((1, 1, 1, 1))).dtype == np.float32


def test_broadcast_gradients():
    a = Tensor(np.ones((2, 3, 4, 4)), requires_grad=True)
    b = Tensor(np.full((1, 3, 1, 1), 2.), requires_grad=True)
    backward((a * b + b).sum())

    assert_allclose(a.grad, np.full((2, 3, 4, 4), 2.))
    assert b.grad.shape == (1, 3, 1, 1)
    assert_allclose(b.grad, np.full((1, 3, 1, 1), 2 * 16 + 2 * 16))


def test_backward_accumulates():
    x = Tensor(np.full((1, 1, 2, 2), 3.), requires_grad=True)
    loss = x.square().sum()
    backward(loss)
    backward(loss)
    assert_allclose(x.grad, np.full((1, 1, 2, 2), 12.))


def test_shared_node():
    """A tensor used twice receives the sum of both gradients."""
    x = Tensor(np.full((1, 1, 1, 1), 2.), requires_grad=True)
    y = x * 3.
    backward((y * y + y).sum())
    assert_allclose(x.grad, [[[[2 * 3 * 6. + 3.]]]])


def test_backward_needs_scalar():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.)


def test_non_finite():
    x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    with pytest.raises(NonFiniteError):
        Tensor(np.ones((1, 1, 1, 1))) / x


def test_no_grad():
    x = Parameter(np.ones((1, 1, 2, 2)), name='x')
    with no_grad():
        y = (x * 2.).sum()
    assert not y.requires_grad
    assert y.is_leaf


def test_channels_and_clamp():
    x = Tensor(np.linspace(-1, 2, 12).reshape(1, 3, 2, 2), requires_grad=True)
    backward(x.channels(1, 3).clamp(0., 1.).sum())
    assert_allclose(x.grad[:, 0], 0.)
    inside = ((x.data[:, 1:] >= 0) & (x.data[:, 1:] <= 1)).astype(np.float32)
    assert_allclose(x.grad[:, 1:], inside)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_mean_is_linear(a, b):
    rng = np.random.default_rng(0)
    with float64_mode():
        x = Tensor(rng.standard_normal((2, 2, 3, 3)))
        y = Tensor(rng.standard_normal((2, 2, 3, 3)))
        combined = (x * a + y * b).mean().item()
        assert combined == pytest.approx(a * x.mean().item() + b * y.mean().item(), abs=1e-9)
