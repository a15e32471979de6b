"""Polynomial algebra in the monomial basis.

Monomials are ordered graded-lexicographically: first by total degree, then
lexicographically with ``x1`` as the most significant variable.  For two
variables and degree 2 the order is ``x1, x2, x1^2, x1 x2, x2^2``.  The
constant monomial, when present, comes first.
"""

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb

import numpy as np

from .errors import DimensionMismatch, RankDeficient


@dataclass(frozen=True)
class MonomialBasis:
    n_vars: int
    degree: int
    include_constant: bool
    exponents: np.ndarray  # (n_terms, n_vars) int

    def __len__(self):
        return self.exponents.shape[0]

    def design_matrix(self, x):
        """Evaluate every monomial at the rows of ``x`` (shape ``(N, n_vars)``)."""
        x = _check_points(x, self.n_vars)
        return _monomials(x, self.exponents)


def basis_enumerate(n_vars, degree, include_constant=False):
    if n_vars < 1 or degree < 1:
        raise ValueError("n_vars and degree must be >= 1")
    rows = []
    if include_constant:
        rows.append((0,) * n_vars)
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n_vars), deg):
            e = [0] * n_vars
            for k in combo:
                e[k] += 1
            rows.append(tuple(e))
    exps = np.array(rows, dtype=np.int64).reshape(len(rows), n_vars)
    assert len(rows) == comb(n_vars + degree, degree) - (0 if include_constant else 1)
    exps.setflags(write=False)
    return MonomialBasis(n_vars, degree, include_constant, exps)


def _check_points(x, n_vars):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[-1] != n_vars:
        raise DimensionMismatch(f"expected {n_vars} variables, got {x.shape[-1]}")
    return x


def _monomials(x, exps, factors=None):
    out = np.prod(x[:, None, :] ** exps[None, :, :], axis=2)
    if factors is not None:
        out = out * factors
    return out


class MultiPoly:
    """Scalar multivariate polynomial ``sum_j coeffs[j] * x**exponents[j]``."""

    def __init__(self, basis, coeffs):
        coeffs = np.array(coeffs, dtype=float).ravel()
        if coeffs.shape[0] != len(basis):
            raise DimensionMismatch(
                f"{coeffs.shape[0]} coefficients for a basis of {len(basis)} terms")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficients must be finite")
        coeffs.setflags(write=False)
        self.basis = basis
        self.coeffs = coeffs

    @property
    def n_vars(self):
        return self.basis.n_vars

    def __call__(self, x):
        return poly_eval(self, x)

    def __repr__(self):
        return (f"MultiPoly(n_vars={self.n_vars}, degree={self.basis.degree}, "
                f"terms={len(self.basis)})")

    def to_dict(self):
        return {
            "n_vars": self.n_vars,
            "degree": self.basis.degree,
            "include_constant": self.basis.include_constant,
            "coeffs": [float(c) for c in self.coeffs],
        }

    @classmethod
    def from_dict(cls, d):
        basis = basis_enumerate(int(d["n_vars"]), int(d["degree"]),
                                bool(d.get("include_constant", False)))
        return cls(basis, d["coeffs"])


def poly_eval(p, x):
    """Evaluate ``p`` at a point (returns float) or at the rows of a matrix."""
    single = np.ndim(x) == 1
    pts = _check_points(x, p.n_vars)
    vals = _monomials(pts, p.basis.exponents) @ p.coeffs
    return float(vals[0]) if single else vals


def poly_gradient(p, x):
    """Analytic gradient; shape ``(n_vars,)`` for a point, ``(N, n_vars)`` for rows."""
    single = np.ndim(x) == 1
    pts = _check_points(x, p.n_vars)
    exps = p.basis.exponents
    out = np.empty((pts.shape[0], p.n_vars))
    for k in range(p.n_vars):
        e = exps.copy()
        fac = e[:, k].astype(float)
        e[:, k] = np.maximum(e[:, k] - 1, 0)
        out[:, k] = _monomials(pts, e, fac) @ p.coeffs
    return out[0] if single else out


def poly_hessian(p, x):
    """Analytic Hessian; shape ``(n, n)`` for a point, ``(N, n, n)`` for rows."""
    single = np.ndim(x) == 1
    pts = _check_points(x, p.n_vars)
    exps = p.basis.exponents
    n = p.n_vars
    out = np.empty((pts.shape[0], n, n))
    for j in range(n):
        for k in range(j, n):
            e = exps.copy()
            if j == k:
                fac = (e[:, j] * (e[:, j] - 1)).astype(float)
                e[:, j] = np.maximum(e[:, j] - 2, 0)
            else:
                fac = (e[:, j] * e[:, k]).astype(float)
                e[:, j] = np.maximum(e[:, j] - 1, 0)
                e[:, k] = np.maximum(e[:, k] - 1, 0)
            out[:, j, k] = out[:, k, j] = _monomials(pts, e, fac) @ p.coeffs
    return out[0] if single else out


def fit_multipoly(x, y, degree, include_constant=False):
    """Least-squares fit of a multivariate polynomial to samples ``y`` at rows ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    basis = basis_enumerate(x.shape[1], degree, include_constant)
    phi = basis.design_matrix(x)
    coeffs, *_ = np.linalg.lstsq(phi, np.asarray(y, dtype=float), rcond=None)
    return MultiPoly(basis, coeffs)


class UnivariatePoly:
    """``g(z) = c_0 + c_1 z + ... + c_d z^d``."""

    def __init__(self, coeffs):
        coeffs = np.array(coeffs, dtype=float).ravel()
        if coeffs.size == 0:
            raise ValueError("at least one coefficient is required")
        coeffs.setflags(write=False)
        self.coeffs = coeffs

    @property
    def degree(self):
        return self.coeffs.size - 1

    def __call__(self, z):
        return np.polynomial.polynomial.polyval(z, self.coeffs)

    def derivative(self, order=1):
        if order > self.degree:
            return UnivariatePoly([0.0])
        return UnivariatePoly(np.polynomial.polynomial.polyder(self.coeffs, order))

    def __repr__(self):
        return f"UnivariatePoly({list(self.coeffs)})"


def vandermonde(z, degree, include_constant=True):
    """Rows ``(1, z_k, ..., z_k**degree)``; the leading 1 is dropped without a constant."""
    if degree < 1:
        raise ValueError("degree must be >= 1")
    v = np.vander(np.asarray(z, dtype=float).ravel(), degree + 1, increasing=True)
    return v if include_constant else v[:, 1:]


def fit_univariate(z, samples, degree):
    """Least-squares polynomial of the given degree through ``(z, samples)``."""
    z = np.asarray(z, dtype=float).ravel()
    samples = np.asarray(samples, dtype=float).ravel()
    if z.shape != samples.shape:
        raise DimensionMismatch("z and samples must have equal length")
    if np.unique(z).size < degree + 1:
        raise RankDeficient(
            f"{np.unique(z).size} distinct abscissae cannot determine a degree-{degree} fit")
    # centre and scale the abscissae for conditioning, then map back
    shift = 0.5 * (z.max() + z.min())
    scale = 0.5 * (z.max() - z.min())
    t = (z - shift) / scale
    c_t, *_ = np.linalg.lstsq(vandermonde(t, degree), samples, rcond=None)
    coef = np.polynomial.Polynomial(
        c_t, domain=[shift - scale, shift + scale], window=[-1, 1]).convert().coef
    return UnivariatePoly(np.pad(coef, (0, degree + 1 - coef.size)))
