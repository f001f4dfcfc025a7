import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ugn import tensor as T
from ugn.tensor import DomainError, ShapeError, Tensor

pytestmark = pytest.mark.usefixtures("f64")


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def grads_of(loss, *xs):
    T.backward(loss)
    return [x.grad for x in xs]


class TestElementwise:
    def test_add_broadcast_channel(self):
        a = leaf(np.arange(12.0).reshape(1, 3, 2, 2))
        b = leaf([[[[1.0]], [[2.0]], [[3.0]]]])
        out = a + b
        np.testing.assert_array_equal(out.data, a.data + b.data)
        ga, gb = grads_of(T.sum(out), a, b)
        np.testing.assert_array_equal(ga, np.ones((1, 3, 2, 2)))
        np.testing.assert_array_equal(gb, np.full((1, 3, 1, 1), 4.0))

    def test_rank_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.add(leaf(np.ones((2, 3))), leaf(np.ones(3)))

    def test_incompatible_extent_raises(self):
        with pytest.raises(ShapeError):
            T.mul(leaf(np.ones((2, 3))), leaf(np.ones((2, 4))))

    def test_mul_div_grads(self):
        a, b = leaf([2.0, -3.0]), leaf([4.0, 0.5])
        ga, gb = grads_of(T.sum(T.div(T.mul(a, a), b)), a, b)
        np.testing.assert_allclose(ga, 2 * a.data / b.data)
        np.testing.assert_allclose(gb, -a.data**2 / b.data**2)

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            T.div(leaf([1.0]), leaf([0.0]))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(leaf([1.0, 0.0]))

    def test_exp_log_values(self):
        x = leaf([0.5, 2.0])
        np.testing.assert_allclose(T.log(T.exp(x)).data, x.data)

    def test_relu_grad_zero_at_origin(self):
        x = leaf([-1.0, 0.0, 2.0])
        (g,) = grads_of(T.sum(T.relu(x)), x)
        np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])

    def test_operators(self):
        x = leaf([1.0, 2.0])
        y = 3 - x * 2 + x / 4 - (-x)
        np.testing.assert_allclose(y.data, 3 - 2 * x.data + x.data / 4 + x.data)


class TestReductions:
    def test_sum_mean_axes(self):
        x = leaf(np.arange(24.0).reshape(2, 3, 4))
        np.testing.assert_array_equal(T.sum(x, axes=(0, 2)).data, x.data.sum(axis=(0, 2)))
        np.testing.assert_allclose(T.mean(x, axes=1, keepdims=True).data, x.data.mean(axis=1, keepdims=True))
        (g,) = grads_of(T.mean(x), x)
        np.testing.assert_allclose(g, np.full(x.shape, 1 / 24))

    def test_max_routes_to_first_maximum(self):
        x = leaf([[1.0, 5.0, 5.0], [2.0, 2.0, 0.0]])
        out = T.max(x, axes=1)
        np.testing.assert_array_equal(out.data, [5.0, 2.0])
        (g,) = grads_of(T.sum(out), x)
        np.testing.assert_array_equal(g, [[0, 1, 0], [1, 0, 0]])

    def test_empty_reduction(self):
        with pytest.raises(DomainError):
            T.sum(leaf(np.zeros((0, 3))), axes=0)

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            T.sum(leaf(np.ones((2, 2))), axes=2)

    def test_logsumexp_value(self):
        x = leaf([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(T.logsumexp(x, axis=1).data, [[3.40760596444438]], rtol=0, atol=1e-12)

    def test_logsumexp_large_inputs_stay_finite(self):
        x = leaf([[1000.0, 1000.0]])
        np.testing.assert_allclose(T.logsumexp(x, axis=1).data, [[1000.0 + np.log(2)]])


class TestGraph:
    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            T.backward(leaf([1.0, 2.0]) * 2.0)

    def test_grads_accumulate_across_calls(self):
        x = leaf([3.0])
        T.backward(T.sum(x * x))
        T.backward(T.sum(x * x))
        np.testing.assert_allclose(x.grad, [12.0])

    def test_shared_subexpression(self):
        x = leaf([2.0])
        y = T.exp(x)
        (g,) = grads_of(T.sum(y * y + y), x)
        np.testing.assert_allclose(g, 2 * np.exp(4.0) + np.exp(2.0))

    def test_tape_is_topological(self):
        x = leaf([1.0])
        loss = T.sum(T.exp(x) * x)
        ids = [n._id for n in T.tape(loss)]
        assert ids == sorted(ids)
        assert T.tape(loss)[-1] is loss

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = T.exp(x)
        assert not y.requires_grad and y._parents == ()

    def test_default_dtype_switch(self):
        with T.precision(np.float32):
            assert Tensor([1, 2]).dtype == np.float32
        assert Tensor([1, 2]).dtype == np.float64


class TestStopGradient:
    def test_forward_identity(self):
        x = leaf([1.5, -2.0])
        np.testing.assert_array_equal(T.stop_gradient(x).data, x.data)

    def test_blocked_ancestor_gets_zero_grad(self):
        x = leaf([1.5, -2.0])
        (g,) = grads_of(T.sum(T.stop_gradient(x) * 3.0), x)
        np.testing.assert_array_equal(g, np.zeros(2))

    def test_partial_blocking(self):
        x = leaf([2.0])
        (g,) = grads_of(T.sum(T.stop_gradient(x) * x), x)
        np.testing.assert_allclose(g, [2.0])


class TestGradientCheck:
    def test_detects_wrong_gradient(self):
        def bad(x):
            return Tensor._make(x.data**2, (x,), lambda g: (g * x.data,), "bad")

        assert T.gradient_check(bad, [leaf([1.0, 2.0])]) > 0.1

    def test_freezing_matches_surrogate(self):
        # d/dx [sg(x) * x] = x under the surrogate, 2x without freezing
        f = lambda x: T.stop_gradient(x) * x
        assert T.gradient_check(f, [leaf([1.0, 3.0])]) < 1e-8
        assert T.gradient_check(f, [leaf([1.0, 3.0])], freeze_stops=False) > 0.1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_point(self):
        with pytest.raises(T.GradcheckError):
            T.gradient_check(lambda x: T.exp(x * 1000.0), [leaf([1.0])])


finite = st.floats(-5, 5, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (2, 3, 2), elements=finite), hnp.arrays(np.float64, (2, 1, 2), elements=finite))
def test_broadcast_arith_gradients(a, b):
    with T.precision(np.float64):
        f = lambda x, y: T.mul(T.add(x, y), T.sub(x, y))
        assert T.gradient_check(f, [leaf(a), leaf(b)]) < 1e-6


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=finite), st.sampled_from([0, 1]))
def test_logsumexp_matches_scipy(a, axis):
    from scipy.special import logsumexp as ref

    with T.precision(np.float64):
        np.testing.assert_allclose(T.logsumexp(leaf(a), axis=axis, keepdims=False).data, ref(a, axis=axis), atol=1e-12)
        assert T.gradient_check(lambda x: T.logsumexp(x, axis=axis), [leaf(a)]) < 1e-6
