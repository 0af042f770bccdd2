import numpy as np
import pytest

from semoran.nn import (
    AdamaxHyper,
    AdamaxState,
    DenseLayer,
    DenseStack,
    GradientTape,
    NonFiniteError,
    ShapeError,
    TapeError,
    adamax_step,
    adamax_update_,
    backward,
    dense_forward,
    finite_difference_grad,
)


def _stack(widths, seed=0, act="tanh"):
    rng = np.random.default_rng(seed)
    return DenseStack.build(widths, rng, hidden_activation=act, dtype=np.float64)


def test_dense_forward_matches_formula():
    w = np.array([[1.0, -2.0], [0.5, 0.0]])
    layer = DenseLayer(w, np.array([0.1, -1.0]), "relu")
    out = dense_forward(layer, np.array([2.0, 1.0]))
    np.testing.assert_allclose(out, [0.1, 0.0])


def test_shape_mismatch_raises():
    layer = DenseLayer(np.zeros((3, 4)), np.zeros(3))
    with pytest.raises(ShapeError):
        dense_forward(layer, np.zeros(5))
    with pytest.raises(ShapeError):
        DenseLayer(np.zeros((3, 4)), np.zeros(4))
    with pytest.raises(ShapeError):
        DenseStack([DenseLayer(np.zeros((3, 4)), np.zeros(3)), DenseLayer(np.zeros((2, 5)), np.zeros(2))])


def test_single_row_equals_batch_row():
    stack = DenseStack.build((40, 16, 3), np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal((7, 40)).astype(np.float32)
    one = stack(x[3])
    assert one.shape == (3,)
    assert np.array_equal(one, stack(x[3:4])[0])
    np.testing.assert_allclose(stack(x)[3], one, rtol=1e-5)


def test_backward_matches_finite_differences_for_weights_and_input():
    stack = _stack((4, 5, 3, 2), seed=3)
    x = np.random.default_rng(4).standard_normal((3, 4))
    target = np.random.default_rng(5).standard_normal((3, 2))

    def loss_of_input(xx):
        return 0.5 * np.sum((stack(xx) - target) ** 2)

    tape = GradientTape()
    out = stack.forward(x, tape)
    grads, dx = backward(tape, out - target)
    np.testing.assert_allclose(dx, finite_difference_grad(loss_of_input, x), rtol=1e-6, atol=1e-9)

    w = stack.layers[1].weights

    def loss_of_w(ww):
        saved = w.copy()
        w[...] = ww
        try:
            return loss_of_input(x)
        finally:
            w[...] = saved

    np.testing.assert_allclose(grads[1][0], finite_difference_grad(loss_of_w, w.copy()), rtol=1e-6, atol=1e-9)


def test_tape_is_single_use():
    stack = _stack((2, 2))
    tape = GradientTape()
    out = stack.forward(np.ones((1, 2)), tape)
    backward(tape, np.ones_like(out))
    with pytest.raises(TapeError):
        backward(tape, np.ones_like(out))
    with pytest.raises(TapeError):
        backward(GradientTape(), np.ones(2))


def test_backward_rejects_wrong_gradient_shape():
    stack = _stack((2, 3))
    tape = GradientTape()
    stack.forward(np.ones((2, 2)), tape)
    with pytest.raises(ShapeError):
        backward(tape, np.ones((2, 2)))


def test_finite_difference_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        finite_difference_grad(lambda x: float(np.log(x[0])), np.array([0.0]), eps=1e-3)


def test_adamax_hand_example():
    hyper = AdamaxHyper(alpha=0.002, beta1=0.9, beta2=0.999, epsilon=0.0)
    new, state = adamax_step(np.array([1.0]), np.array([0.5]), AdamaxState(0, [], [], hyper))
    assert new[0] == 0.998
    assert state.m[0][0] == pytest.approx(0.05) and state.u[0][0] == 0.5
    assert state.t == 1


def test_adamax_step_leaves_inputs_alone():
    p = np.array([1.0, 2.0])
    st = AdamaxState.zeros_like([p])
    adamax_step(p, np.array([0.1, -0.1]), st)
    assert st.t == 0 and np.all(st.m[0] == 0)
    assert np.array_equal(p, [1.0, 2.0])


def test_adamax_rejects_nonfinite_and_mismatched():
    p = [np.zeros(2)]
    st = AdamaxState.zeros_like(p)
    with pytest.raises(NonFiniteError):
        adamax_update_(p, [np.array([np.nan, 0.0])], st)
    with pytest.raises(ShapeError):
        adamax_update_(p, [np.zeros(3)], st)
    assert st.t == 0


def test_adamax_minimizes_quadratic():
    p = [np.array([3.0, -2.0])]
    st = AdamaxState.zeros_like(p, AdamaxHyper(alpha=0.05))
    for _ in range(500):
        adamax_update_(p, [2 * p[0]], st)
    assert np.all(np.abs(p[0]) < 0.1)


def test_named_arrays_roundtrip():
    stack = _stack((3, 4, 2))
    again = DenseStack.from_named_arrays(stack.named_arrays("enc"), "enc", stack.activations)
    x = np.ones((1, 3))
    assert np.array_equal(stack(x), again(x))
