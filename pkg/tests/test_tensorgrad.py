import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcases import PRIMITIVES
from nspad.tensorgrad import DomainError, Graph, NonFiniteError, ShapeError, finite_diff_check


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_matches_central_differences(self, name):
        for seed in range(10):
            f, params = PRIMITIVES[name](np.random.default_rng(seed))
            assert finite_diff_check(f, params) < 1e-4, (name, seed)

    def test_power_subgradient_at_zero(self):
        g = Graph()
        x = g.parameter(np.array([0.0, 4.0]))
        grads = g.backward(g.sum(g.power(x, 0.5)))
        np.testing.assert_allclose(grads[x.id], [0.0, 0.25])

    def test_max_routes_to_first_argmax(self):
        g = Graph()
        x = g.parameter(np.array([[1.0, 3.0, 3.0]]))
        grads = g.backward(g.sum(g.max(x, axis=1)))
        np.testing.assert_array_equal(grads[x.id], [[0.0, 1.0, 0.0]])

    def test_gradient_accumulates_over_reuse(self):
        g = Graph()
        x = g.parameter(np.array(3.0))
        y = g.multiply(x, x) + x
        np.testing.assert_allclose(g.backward(y)[x.id], 7.0)

    def test_unreachable_parameter_gets_zero(self):
        g = Graph()
        x = g.parameter(np.ones(3))
        unused = g.parameter(np.ones((2, 2)))
        grads = g.backward(g.sum(x))
        np.testing.assert_array_equal(grads[unused.id], np.zeros((2, 2)))


class TestValuesAndErrors:
    def test_softmax_rows_sum_to_one(self):
        g = Graph()
        out = g.softmax(g.constant(np.array([[1000.0, 0.0], [-5.0, 5.0]])), axis=1)
        np.testing.assert_allclose(out.value.sum(axis=1), [1.0, 1.0])

    def test_sigmoid_is_stable_for_large_inputs(self):
        g = Graph()
        out = g.sigmoid(g.constant(np.array([-800.0, 0.0, 800.0])))
        np.testing.assert_allclose(out.value, [0.0, 0.5, 1.0])

    def test_matmul_shape_error(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3))))

    def test_broadcast_shape_error(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.add(g.constant(np.ones(3)), g.constant(np.ones(4)))

    def test_domain_errors(self):
        g = Graph()
        with pytest.raises(DomainError):
            g.log(g.constant(np.array([0.0])))
        with pytest.raises(DomainError):
            g.power(g.constant(np.array([-1.0])), 2.0)

    def test_non_finite_detected(self):
        g = Graph()
        with pytest.raises(NonFiniteError):
            g.exp(g.constant(np.array([1000.0])))

    def test_backward_needs_scalar(self):
        g = Graph()
        with pytest.raises(ValueError):
            g.backward(g.constant(np.ones(2)))

    def test_scalar_operators(self):
        g = Graph()
        x = g.constant(np.array([1.0, 2.0]))
        np.testing.assert_allclose((1.0 - x).value, [0.0, -1.0])
        np.testing.assert_allclose((2.0 * x + 1.0).value, [3.0, 5.0])


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)), arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
    def test_linear_ops_exact_gradients(self, a, b):
        g = Graph()
        x, y = g.parameter(a), g.parameter(b)
        grads = g.backward(g.sum(g.multiply(x, g.constant(np.full((2, 3), 2.0))) - y))
        np.testing.assert_allclose(grads[x.id], 2.0)
        np.testing.assert_allclose(grads[y.id], -1.0)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
    def test_softmax_is_a_distribution(self, a):
        g = Graph()
        out = g.softmax(g.constant(a), axis=-1).value
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_mean_equals_scaled_sum(self, seed):
        x = np.random.default_rng(seed).normal(size=(4, 5))
        g = Graph()
        np.testing.assert_allclose(g.mean(g.constant(x), axis=1).value, g.sum(g.constant(x), axis=1).value / 5)
