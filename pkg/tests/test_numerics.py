import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from citilab import numerics as nx
from citilab.errors import ContractError, NumericFault, ShapeError
from citilab.numerics import Adam, Parameter, Tape, Tensor, backward, evaluate, finite_diff_check

from gradcases import primitive_cases


def f64(name, data):
    return Parameter(name, np.asarray(data, dtype=np.float64), dtype=np.float64)


def test_softmax_of_equal_logits_is_uniform():
    out = nx.softmax(Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.full(4, 0.25, dtype=out.dtype))


def test_matmul_with_identity_is_noop():
    x = np.random.default_rng(0).standard_normal((3, 5))
    out = nx.matmul(Tensor(np.eye(3)), Tensor(x))
    np.testing.assert_array_equal(out.data, x.astype(out.dtype))


def test_cross_entropy_of_certain_correct_prediction_is_zero():
    logits = Tensor(np.array([[0.0, 800.0, 0.0]]), dtype=np.float64)
    assert nx.cross_entropy(logits, np.array([1])).item() == 0.0


def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(ShapeError) as err:
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    assert err.value.primitive == "matmul"
    assert (2, 3) in err.value.shapes and (4, 2) in err.value.shapes


def test_non_finite_intermediate_raises_numeric_fault():
    with pytest.raises(NumericFault):
        nx.log(Tensor(np.array([0.0, 1.0])))


def test_grad_of_sum_of_squares():
    x = f64("x", [1.0, 2.0])
    loss = evaluate(lambda: nx.tsum(x * x))
    backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_unreachable_parameter_keeps_no_grad():
    x, p = f64("x", [1.0, 2.0]), f64("p", [3.0])
    backward(evaluate(lambda: nx.tsum(x * x)))
    assert p.grad is None


def test_two_backward_calls_double_the_gradient():
    x = f64("x", [0.5, -1.5, 2.0])
    tape = Tape()
    with tape:
        loss = nx.tsum(nx.exp(x) * x)
    tape.backward(loss)
    once = x.grad.copy()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * once)


def test_backward_rejects_non_scalar_loss():
    x = f64("x", [1.0, 2.0])
    tape = Tape()
    with tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_frozen_parameter_gets_no_gradient():
    x = f64("x", [1.0, 2.0])
    x.trainable = False
    tape = Tape()
    with tape:
        loss = nx.tsum(x * x)
    assert len(tape) == 0
    assert loss._tape is None


def test_finite_diff_quadratic_form():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((5, 5))
    x = f64("x", rng.standard_normal((5, 1)))
    expr = lambda: nx.tsum(nx.matmul(nx.transpose(x), nx.matmul(Tensor(a, dtype=np.float64), x)))
    assert finite_diff_check(expr, [x], eps=1e-5) < 1e-6
    backward(evaluate(expr))
    np.testing.assert_allclose(x.grad, (a + a.T) @ x.data, rtol=1e-12)


def test_finite_diff_constant_expression_is_zero():
    x = f64("x", [1.0, 2.0])
    assert finite_diff_check(lambda: Tensor(np.array(3.0), dtype=np.float64), [x]) == 0.0


def test_finite_diff_softmax_cross_entropy_layer():
    rng = np.random.default_rng(4)
    w = f64("w", rng.standard_normal((6, 8)))
    x = Tensor(rng.standard_normal((10, 8)), dtype=np.float64)
    y = rng.integers(0, 6, size=10)
    assert finite_diff_check(lambda: nx.cross_entropy(nx.linear(x, w), y), [w], eps=1e-5) < 1e-4


def test_finite_diff_rejects_nondeterministic_expression():
    x = f64("x", [1.0])
    calls = iter(range(100))
    with pytest.raises(ContractError):
        finite_diff_check(lambda: nx.tsum(x * float(next(calls))), [x])


def test_finite_diff_requires_float64():
    x = Parameter("x", np.ones(2, dtype=np.float32))
    with pytest.raises(ContractError):
        finite_diff_check(lambda: nx.tsum(x * x), [x])


@pytest.mark.parametrize("name", sorted(primitive_cases()))
def test_every_primitive_matches_central_differences(name):
    expr, params = primitive_cases()[name]
    assert finite_diff_check(expr, params, eps=1e-6, coords_per_param=64) < 1e-4


def test_forward_is_bit_reproducible():
    expr, params = primitive_cases()["rms_norm"]
    assert expr().data.tobytes() == expr().data.tobytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_gradient_is_linear_in_the_loss(u, v):
    x = f64("x", np.linspace(-1, 1, 12).reshape(3, 4))
    f = lambda: nx.tsum(nx.silu(x) * Tensor(u, dtype=np.float64))
    g = lambda: nx.tsum(nx.exp(x * 0.3) * Tensor(v, dtype=np.float64))
    backward(evaluate(f))
    backward(evaluate(g))
    separate = x.grad.copy()
    x.grad = None
    backward(evaluate(lambda: f() + g()))
    np.testing.assert_allclose(x.grad, separate, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_are_distributions_and_shift_invariant(logits, c):
    p = nx.softmax(Tensor(logits, dtype=np.float64)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
    q = nx.softmax(Tensor(logits + c, dtype=np.float64)).data
    np.testing.assert_allclose(p, q, atol=1e-12)


def test_adam_moves_only_trainable_parameters_with_grads():
    a, b, c = f64("a", [1.0, 1.0]), f64("b", [1.0]), f64("c", [1.0])
    b.trainable = False
    backward(evaluate(lambda: nx.tsum(a * a) + nx.tsum(c)))
    c.grad = None
    before = {p.name: p.data.copy() for p in (a, b, c)}
    Adam([a, b, c], lr=0.1).step()
    assert not np.array_equal(a.data, before["a"])
    assert np.array_equal(b.data, before["b"]) and np.array_equal(c.data, before["c"])


def test_adam_with_zero_lr_leaves_weights_unchanged():
    a = f64("a", [1.0, -2.0])
    backward(evaluate(lambda: nx.tsum(a * a)))
    opt = Adam([a], lr=0.0)
    opt.step()
    np.testing.assert_array_equal(a.data, [1.0, -2.0])


def test_rng_streams_are_reproducible_and_separate():
    assert nx.rng_for(3, "init").random() == nx.rng_for(3, "init").random()
    assert nx.rng_for(3, "init").random() != nx.rng_for(3, "sampling").random()
