import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvc import diffcore as dc
from uvc.diffcore import Tensor
from uvc.gradcheck import check_gradients

rng = np.random.default_rng(0)
TOL = 1e-5


def rand(*shape):
    return rng.standard_normal(shape)


CASES = {
    "add_broadcast": (lambda t: dc.add(t[0], t[1]), [rand(3, 4), rand(4)]),
    "sub": (lambda t: dc.sub(t[0], t[1]), [rand(2, 3), rand(2, 1)]),
    "mul": (lambda t: dc.mul(t[0], t[1]), [rand(3, 4), rand(1, 4)]),
    "scale": (lambda t: dc.scale(t[0], -2.5), [rand(5)]),
    "gelu": (lambda t: dc.gelu(t[0]), [rand(4, 5) * 2]),
    "sum_all": (lambda t: dc.sum_all(t[0]), [rand(3, 2)]),
    "sum_axis": (lambda t: dc.sum_axis(t[0], 1), [rand(3, 4, 2)]),
    "mean_all": (lambda t: dc.mean_all(t[0]), [rand(3, 3)]),
    "sum_sq": (lambda t: dc.sum_sq(t[0]), [rand(4, 2)]),
    "matmul": (lambda t: dc.matmul(t[0], t[1]), [rand(3, 4), rand(4, 2)]),
    "matmul_batched": (lambda t: dc.matmul(t[0], t[1]), [rand(2, 3, 4), rand(2, 4, 5)]),
    "linear": (lambda t: dc.linear(t[0], t[1], t[2]), [rand(2, 3, 4), rand(5, 4), rand(5)]),
    "reshape": (lambda t: dc.reshape(t[0], (6, 2)), [rand(3, 4)]),
    "transpose": (lambda t: dc.transpose(t[0], (2, 0, 1)), [rand(2, 3, 4)]),
    "broadcast_to": (lambda t: dc.broadcast_to(t[0], (3, 2, 4)), [rand(1, 1, 4)]),
    "getitem": (lambda t: t[0][:, 1], [rand(3, 4, 2)]),
    "slice_columns": (lambda t: dc.slice_columns(t[0], [2, 0, 2]), [rand(3, 4)]),
    "concat": (lambda t: dc.concat([t[0], t[1]], axis=1), [rand(2, 3), rand(2, 2)]),
    "softmax_rows": (lambda t: dc.softmax_rows(t[0]), [rand(3, 5)]),
    "layernorm": (lambda t: dc.layernorm(t[0], t[1], t[2]), [rand(2, 3, 6), rand(6), rand(6)]),
    "cross_entropy": (lambda t: dc.cross_entropy(t[0], np.array([0, 2, 1])), [rand(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradient_matches_finite_differences(name):
    build, arrays = CASES[name]
    errors = check_gradients(build, arrays)
    assert max(errors) < TOL, errors


def test_ste_ceil_forward_and_straight_through_gradient():
    x = Tensor(np.array([2.3, 2.0, -0.4]))
    y = dc.ste_ceil(x)
    assert y.values.tolist() == [3.0, 2.0, -0.0]
    dc.backward(dc.sum_all(y))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_shared_subexpression_gradient_accumulates():
    x = Tensor(np.array([1.5, -2.0]))
    y = dc.mul(x, x)
    z = dc.add(y, y)  # 2 x^2
    dc.backward(dc.sum_all(z))
    np.testing.assert_allclose(x.grad, 4 * x.values)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3))
    with dc.no_grad():
        y = dc.scale(x, 2.0)
    assert y.backward_fn is None and y.parents == ()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_slice_columns_out_of_range():
    with pytest.raises(IndexError):
        dc.slice_columns(Tensor(np.ones((2, 3))), [3])


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        dc.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_backward_needs_seed_for_nonscalar():
    with pytest.raises(dc.ShapeError):
        dc.backward(Tensor(np.ones(3)) * 2.0)


def test_float32_graph_stays_float32():
    x = Tensor(np.ones((2, 2), np.float32))
    y = dc.gelu(dc.add(dc.mul(x, 0.5), 1.0))
    assert y.dtype == np.float32


def test_softmax_extreme_inputs_stable():
    y = dc.softmax_rows(Tensor(np.array([[1000.0, 0.0, -1000.0]])))
    assert np.all(np.isfinite(y.values))
    np.testing.assert_allclose(y.values.sum(), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_softmax_rows_is_a_distribution(vals):
    y = dc.softmax_rows(Tensor(np.array([vals])))
    assert np.all(y.values >= 0)
    assert abs(y.values.sum() - 1.0) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_gradient_property(m, k, n, seed):
    r = np.random.default_rng(seed)
    errors = check_gradients(lambda t: dc.matmul(t[0], t[1]), [r.standard_normal((m, k)), r.standard_normal((k, n))])
    assert max(errors) < TOL
