import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prunematch.errors import DimensionError, NonFiniteError
from prunematch.tensor import (
    Tensor,
    clamp,
    concat,
    elu_plus_one,
    exp,
    find_non_finite,
    grad_check,
    layer_norm,
    log,
    matmul,
    relu,
    scatter_rows,
    sigmoid,
    softmax,
    sqrt,
    straight_through,
    take,
    where,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i, j in itertools.product(range(m), range(n)):
        for t in range(k):
            out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        out = matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_selector_row(self):
        assert matmul([[1.0, 0.0]], [[2.0], [5.0]]).data.tolist() == [[2.0]]

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(matmul(a, b).data, triple_loop(a, b), rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_backward_formula(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        matmul(a, b).backward(g)
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-14)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-14)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]).data, [0.5, 0.5])

    def test_analytic(self):
        np.testing.assert_allclose(softmax([np.log(1.0), np.log(3.0)]).data, [0.25, 0.75], atol=1e-15)

    def test_large_logit_against_mpmath(self):
        out = softmax([1000.0, 0.0]).data
        mpmath.mp.dps = 50
        e = mpmath.exp(-1000)
        expected = [float(1 / (1 + e)), float(e / (1 + e))]
        assert np.all(np.isfinite(out))
        assert out[0] == expected[0]
        assert out[1] == pytest.approx(expected[1], rel=1e-12, abs=0)

    @given(arrays(np.float64, (4, 5), elements=st.floats(-700, 700)), st.sampled_from([0, 1]))
    def test_sums_to_one(self, x, axis):
        out = softmax(x, axis=axis).data
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-12)
        assert np.all(out >= 0)


class TestEluPlusOne:
    def test_values(self):
        out = elu_plus_one([0.0, 1.0, -20.0]).data
        assert out[0] == 1.0 and out[1] == 2.0
        assert out[2] == pytest.approx(np.exp(-20.0), rel=1e-15)
        assert out[2] > 0

    def test_derivative_continuous_at_zero(self):
        for x0 in (-1e-12, 0.0, 1e-12):
            x = Tensor(np.array([x0]), requires_grad=True)
            elu_plus_one(x).sum().backward()
            assert x.grad[0] == pytest.approx(1.0, abs=1e-11)

    @given(arrays(np.float64, 20, elements=finite))
    def test_monotone_positive(self, x):
        x = np.sort(x)
        out = elu_plus_one(x).data
        assert np.all(out > 0)
        assert np.all(np.diff(out) >= 0)


class TestLayerNorm:
    def test_constant_vector(self):
        np.testing.assert_array_equal(layer_norm(np.full(6, 3.5)).data, 0.0)

    def test_two_values(self):
        eps = 1e-5
        np.testing.assert_allclose(layer_norm([1.0, -1.0], eps=eps).data, np.array([1.0, -1.0]) / np.sqrt(1 + eps),
                                   atol=1e-15)

    def test_random_moments(self):
        x = np.random.default_rng(5).normal(3.0, 7.0, size=257)
        out = layer_norm(x, eps=1e-6).data
        assert abs(out.mean()) < 1e-10
        assert abs(out.var() - 1.0) < 1e-6

    def test_gradient(self):
        x = np.random.default_rng(1).normal(size=(3, 5))
        w = np.random.default_rng(2).normal(size=(3, 5))
        assert grad_check(lambda t: (layer_norm(t, axis=1) * w).sum(), [x]).passed


class TestGradCheck:
    def test_square(self):
        rep = grad_check(lambda x: x * x, [np.array(3.0)])
        assert rep.max_rel_err < 1e-8
        assert rep.worst[2] == pytest.approx(6.0)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            grad_check(lambda x: x * x, [np.array(1.0)], h=0.1)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_operation(self):
        with pytest.raises(NonFiniteError) as info:
            grad_check(lambda x: log(x - 5.0).sum(), [np.array([1.0, 2.0])])
        assert info.value.op == "log"

    def test_detects_wrong_gradient(self):
        def bad(x):
            return straight_through(x.data**3, x * 0.0).sum()

        assert not grad_check(bad, [np.array([1.0, 2.0])]).passed

    @pytest.mark.parametrize("op", [exp, sigmoid, relu, elu_plus_one, lambda t: sqrt(t * t + 1.0),
                                    lambda t: clamp(t, -0.5, 0.5), lambda t: softmax(t, axis=1)])
    def test_elementwise_ops(self, op):
        x = np.random.default_rng(11).normal(size=(3, 4)) + 0.013
        w = np.random.default_rng(12).normal(size=(3, 4))
        assert grad_check(lambda t: (op(t) * w).sum(), [x]).passed

    def test_composed_graph_with_reuse(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 4))

        def f(x, y):
            z = x @ y
            return (softmax(z, axis=0) * z).sum() + (x * x).mean() + (y / (1.0 + y * y)).sum()

        rep = grad_check(f, [a, b], h=1e-5)
        assert rep.max_rel_err < 1e-4

    def test_gather_scatter_concat_where(self):
        rng = np.random.default_rng(8)
        x, carry = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
        idx = np.array([4, 0, 0, 2])
        w = rng.normal(size=(6, 6))

        def f(x, c):
            g = take(x, idx)
            s = scatter_rows(c, [1, 3, 5, 0], g * 2.0)
            cat = concat([s, c], axis=1)
            return (where(w > 0, cat, -cat) * w).sum() + (x[1:3, ::2] ** 3).sum()

        assert grad_check(f, [x, carry]).passed


class TestTape:
    def test_grad_accumulates_on_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        (x * x + x).sum().backward()
        assert x.grad[0] == pytest.approx(5.0)
        (x * 3.0).sum().backward()
        assert x.grad[0] == pytest.approx(8.0)

    def test_constants_record_nothing(self):
        out = sigmoid(Tensor(np.ones((1, 3))) @ Tensor(np.ones((3, 2))))
        assert not out.requires_grad and out._parents == ()

    def test_grad_shape_matches_data(self):
        x = Tensor(np.ones((3, 1)), requires_grad=True)
        (x + np.ones((3, 4))).sum().backward()
        assert x.grad.shape == x.shape
        np.testing.assert_array_equal(x.grad, 4.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_find_non_finite(self):
        x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
        y = log(x) * 2.0
        assert find_non_finite(y).op == "log"

    def test_straight_through_forward_exact(self):
        soft = Tensor(np.array([0.2, 0.9]), requires_grad=True)
        hard = straight_through([0.0, 1.0], soft)
        np.testing.assert_array_equal(hard.data, [0.0, 1.0])
        (hard * np.array([3.0, 5.0])).sum().backward()
        np.testing.assert_array_equal(soft.grad, [3.0, 5.0])

    @settings(max_examples=30)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
    def test_chain_rule_property(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        rep = grad_check(lambda x, y: (sigmoid(x @ y) * elu_plus_one(x @ y)).sum(), [a, b])
        assert rep.max_rel_err < 1e-4
