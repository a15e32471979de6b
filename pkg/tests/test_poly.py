import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from narxdecouple.errors import DimensionMismatch, RankDeficient
from narxdecouple.poly import (MultiPoly, UnivariatePoly, basis_enumerate, fit_multipoly,
                               fit_univariate, poly_eval, poly_gradient, poly_hessian,
                               vandermonde)


def test_reference_basis_has_55_monomials():
    assert len(basis_enumerate(5, 3)) == 55
    assert len(basis_enumerate(5, 3, include_constant=True)) == 56


def test_graded_lex_order_for_two_variables():
    exps = basis_enumerate(2, 2).exponents.tolist()
    assert exps == [[1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]


def test_constant_comes_first():
    b = basis_enumerate(3, 2, include_constant=True)
    assert b.exponents[0].tolist() == [0, 0, 0]


def test_eval_of_known_polynomial():
    b = basis_enumerate(2, 2)
    p = MultiPoly(b, [1.0, 0.0, 0.0, 2.0, 0.0])      # x1 + 2 x1 x2
    assert poly_eval(p, [3.0, 4.0]) == pytest.approx(3.0 + 24.0)
    np.testing.assert_allclose(p(np.array([[1.0, 1.0], [0.0, 5.0]])), [3.0, 0.0])


def _random_cubic(rng, n=4):
    b = basis_enumerate(n, 3, include_constant=True)
    return MultiPoly(b, rng.standard_normal(len(b)))


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        p = _random_cubic(rng)
        x = rng.standard_normal(4)
        h = 1e-5
        fd = np.array([(poly_eval(p, x + h * e) - poly_eval(p, x - h * e)) / (2 * h)
                       for e in np.eye(4)])
        worst = max(worst, _rel(poly_gradient(p, x), fd))
    assert worst < 1e-6


def test_hessian_matches_central_differences_of_the_gradient():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        p = _random_cubic(rng)
        x = rng.standard_normal(4)
        h = 1e-5
        fd = np.column_stack([(poly_gradient(p, x + h * e) - poly_gradient(p, x - h * e)) / (2 * h)
                              for e in np.eye(4)])
        H = poly_hessian(p, x)
        np.testing.assert_array_equal(H, H.T)
        worst = max(worst, _rel(H, fd))
    assert worst < 1e-5


def test_batched_derivatives_match_single_points():
    rng = np.random.default_rng(3)
    p = _random_cubic(rng, 3)
    X = rng.standard_normal((6, 3))
    G, H = poly_gradient(p, X), poly_hessian(p, X)
    assert G.shape == (6, 3) and H.shape == (6, 3, 3)
    for k in range(6):
        np.testing.assert_allclose(G[k], poly_gradient(p, X[k]))
        np.testing.assert_allclose(H[k], poly_hessian(p, X[k]))


def test_linear_polynomial_has_zero_hessian():
    p = MultiPoly(basis_enumerate(3, 1), [1.0, -2.0, 0.5])
    assert np.all(poly_hessian(p, np.ones((4, 3))) == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_fit_recovers_exact_polynomial(seed):
    rng = np.random.default_rng(seed)
    p = _random_cubic(rng, 3)
    X = rng.standard_normal((60, 3))
    q = fit_multipoly(X, p(X), 3, include_constant=True)
    np.testing.assert_allclose(q.coeffs, p.coeffs, atol=1e-8)


def test_dimension_checks():
    p = MultiPoly(basis_enumerate(2, 1), [1.0, 1.0])
    with pytest.raises(DimensionMismatch):
        p(np.ones(3))
    with pytest.raises(DimensionMismatch):
        MultiPoly(basis_enumerate(2, 1), [1.0])


def test_dict_round_trip():
    p = _random_cubic(np.random.default_rng(0), 2)
    q = MultiPoly.from_dict(p.to_dict())
    assert np.array_equal(q.coeffs, p.coeffs)


def test_univariate_fit_and_derivative():
    z = np.linspace(-3, 5, 20)
    g = UnivariatePoly([1.0, -2.0, 0.5, 0.25])
    fit = fit_univariate(z, g(z), 3)
    np.testing.assert_allclose(fit.coeffs, g.coeffs, atol=1e-10)
    np.testing.assert_allclose(g.derivative().coeffs, [-2.0, 1.0, 0.75])
    assert g.derivative(5).coeffs.tolist() == [0.0]


def test_univariate_fit_needs_enough_distinct_points():
    with pytest.raises(RankDeficient):
        fit_univariate([1.0, 1.0, 2.0], [0.0, 0.0, 1.0], 2)


def test_vandermonde_without_constant():
    np.testing.assert_array_equal(vandermonde([2.0], 3, include_constant=False), [[2.0, 4.0, 8.0]])
