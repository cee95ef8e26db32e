import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weightshare import autodiff as ad
from weightshare.autodiff import ParameterRegistry, Tape, Tensor, backward, grad_check
from weightshare.errors import ShapeError, WeightShareError
from weightshare.layers import zeros

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


def test_product_gradient_matches_hand_derivation():
    x = Tensor([2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = ad.sum_(ad.mul(x, x))
    backward(tape, y)
    np.testing.assert_allclose(x.grad, [4.0, 6.0])


def test_fan_out_gradients_are_summed():
    x = Tensor(1.5, requires_grad=True)
    with Tape() as tape:
        y = ad.add(ad.mul(x, 3.0), ad.mul(x, x))
    backward(tape, y)
    assert x.grad == pytest.approx(3.0 + 2 * 1.5)


def test_backward_needs_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, 2.0)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_unreachable_parameter_gets_zero_gradient(registry):
    used = registry.create("used", (3,), lambda rng, shape: np.ones(shape))
    unused = registry.create("unused", (2,), zeros)
    with Tape() as tape:
        loss = ad.sum_(used.tensor)
    grads = backward(tape, loss, [used, unused])
    np.testing.assert_array_equal(grads["unused"], np.zeros(2))
    np.testing.assert_array_equal(grads["used"], np.ones(3))


def test_frozen_parameter_is_left_out_of_gradient_map(registry):
    param = registry.create("frozen", (2,), zeros)
    param.trainable = False
    with Tape() as tape:
        loss = ad.sum_(param.tensor)
    assert backward(tape, loss, [param]) == {}


def test_operations_outside_a_tape_are_not_recorded():
    x = Tensor([1.0], requires_grad=True)
    y = ad.mul(x, 2.0)
    with Tape() as tape:
        pass
    assert len(tape) == 0
    np.testing.assert_array_equal(y.values, [2.0])


def test_broadcast_mismatch_names_the_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(np.zeros(2), np.zeros(3))


def test_matmul_rejects_mismatched_inner_dimension():
    with pytest.raises(ShapeError):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_max_routes_gradient_to_first_maximum():
    x = Tensor([[1.0, 4.0, 4.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        y = ad.sum_(ad.max_(x, axis=1))
    backward(tape, y)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])


def test_unknown_primitive():
    with pytest.raises(WeightShareError):
        ad.forward_primitive("conv2d", np.zeros(2))


def test_forward_primitive_dispatches():
    out = ad.forward_primitive("pad", np.ones((2,)), pad_width=[(1, 2)])
    np.testing.assert_array_equal(out.values, [0.0, 1.0, 1.0, 0.0, 0.0])


def test_registry_reuses_ids_and_rejects_shape_conflicts():
    registry = ParameterRegistry(seed=3)
    a = registry.get_or_create("w", (2, 2), zeros)
    assert registry.get_or_create("w", (2, 2), zeros) is a
    with pytest.raises(ShapeError):
        registry.get_or_create("w", (3, 2), zeros)
    with pytest.raises(WeightShareError):
        registry.create("w", (2, 2), zeros)


def test_registry_assign_keeps_identity():
    registry = ParameterRegistry()
    param = registry.create("w", (2,), zeros)
    before = param.values
    registry.assign({"w": np.array([1.0, 2.0])})
    assert param.values is before
    np.testing.assert_array_equal(param.values, [1.0, 2.0])


@given(arrays(np.float64, st.integers(2, 6), elements=finite))
def test_smooth_composite_passes_gradient_check(x):
    def f(t):
        return ad.sum_(ad.div(ad.mul(t, t), ad.add(ad.mul(t, t), 1.0)))

    assert grad_check(f, x) < 1e-4


@given(arrays(np.float64, (3, 4), elements=finite))
def test_reshape_transpose_slice_gradients(x):
    def f(t):
        moved = ad.transpose(ad.reshape(t, (4, 3)), (1, 0))
        return ad.sum_(ad.mul(ad.slice_(moved, (slice(None), slice(1, 3))), 2.0))

    assert grad_check(f, x) < 1e-4


@given(arrays(np.float64, (2, 7, 3), elements=finite))
def test_unfold_gradient(x):
    weights = np.random.default_rng(0).normal(size=(2, 5, 3, 3))

    def f(t):
        return ad.sum_(ad.mul(ad.unfold1d(t, 3), weights))

    assert grad_check(f, x) < 1e-4


def test_sqrt_mean_abs_gradient():
    point = np.array([[0.5, -1.5], [2.0, -0.25]])

    def f(t):
        return ad.sum_(ad.sqrt(ad.mean(ad.abs_(t), axis=0)))

    assert grad_check(f, point) < 1e-6
