import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from volperceiver import tensor as T
from volperceiver.gradchecks import OP_CASES, OP_TOLERANCE, run_scope
from volperceiver.tensor import NonFiniteError, Tape, Tensor, backward, default_dtype, gradcheck, no_grad


@pytest.mark.parametrize("scope", sorted(OP_CASES) + ["attention"])
def test_op_gradients(scope):
    (result,) = run_scope(scope)
    assert result.max_rel_error < OP_TOLERANCE, result.line()


def test_broadcast_gradient_sums_over_expanded_axes():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    backward(T.sum_(T.mul(a, b)))
    np.testing.assert_array_equal(a.grad, np.tile(np.arange(4.0), (3, 1)))
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_gradients_accumulate_across_uses():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0
    backward(y.sum())
    np.testing.assert_allclose(x.grad, [7.0])


def test_backward_returns_leaf_gradients_only():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    c = Tensor(np.array([5.0, 5.0]))
    h = x * 2.0
    grads = backward((h * c).sum())
    assert set(grads) == {x.node_id}
    np.testing.assert_array_equal(grads[x.node_id].data, [10.0, 10.0])


def test_backward_needs_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_graph_freed_after_backward():
    x = Tensor(np.ones(2), requires_grad=True)
    y = (x * 2.0).sum()
    backward(y)
    with pytest.raises(RuntimeError):
        backward(y)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_non_finite_forward_is_reported():
    big = Tensor(np.array([1000.0]))
    with pytest.raises(NonFiniteError):
        T.exp(big * 1000.0)
    with T.finite_checks(False):
        assert np.isinf(T.exp(big).data).all()


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        T.log(Tensor(np.array([0.0, 1.0])))


def test_tape_records_ops_in_order():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        y = T.relu(x * 2.0)
        T.sum_(y)
    assert [e[0] for e in tape.entries] == ["mul", "relu", "sum"]
    assert tape.activation_elements(["relu"]) == 6


def test_default_dtype_context():
    with default_dtype(np.float64):
        assert T.zeros((2,)).dtype == np.float64
    assert T.zeros((2,)).dtype == np.float32


def test_factories_are_seeded():
    np.testing.assert_array_equal(T.uniform((3,), seed=4).data, T.uniform((3,), seed=4).data)
    with pytest.raises(ValueError):
        T.zeros((0, 2))


def test_shape_errors():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ValueError):
        T.reshape(Tensor(np.ones(6)), (4, 2))
    with pytest.raises(ZeroDivisionError):
        T.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = T.softmax(Tensor(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-10, 10)))
def test_layer_norm_standardises(x):
    x = x + np.linspace(0, 1, 6)  # avoid constant rows
    y = T.layer_norm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    var = x.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-5), rtol=1e-6)


def test_gelu_closed_form_points():
    y = T.gelu(Tensor(np.array([0.0, 10.0, -10.0]))).data
    np.testing.assert_allclose(y, [0.0, 10.0, 0.0], atol=1e-12)


def test_gradcheck_detects_wrong_gradient():
    def bad_square(t):
        out = T.make_result("bad", t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2
        return out.sum()

    assert gradcheck(bad_square, np.array([1.0, 2.0])) > 0.4
