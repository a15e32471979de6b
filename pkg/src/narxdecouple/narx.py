"""NARX regressors, equation-error P-NARX identification, free-run simulation
and the two relative error metrics.

The regressor at time ``t`` is::

    x(t) = [u(t), u(t-1), ..., u(t-n_u), y(t-1), ..., y(t-n_y)]

Rows start at ``t0 = max(n_u, n_y)`` so a record of length ``L`` yields
``L - t0`` rows.  Free-run simulation copies the first ``t0`` measured outputs
and recurses from there; error metrics computed on simulations skip that
initialisation window.
"""

import json
from dataclasses import dataclass
from math import factorial

import numpy as np
from numba import njit

from .errors import Diverged, DimensionMismatch, RankDeficient, TooShort, ZeroReference
from .poly import MultiPoly, UnivariatePoly, basis_enumerate

DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class NarxStructure:
    n_u: int = 1
    n_y: int = 3
    degree: int = 3

    def __post_init__(self):
        if self.n_u < 0 or self.n_y < 1 or self.degree < 1:
            raise ValueError(f"invalid NARX structure {self}")

    @property
    def n_vars(self):
        return self.n_u + self.n_y + 1

    @property
    def max_lag(self):
        return max(self.n_u, self.n_y)

    def to_dict(self):
        return {"n_u": self.n_u, "n_y": self.n_y, "d": self.degree}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n_u"]), int(d["n_y"]), int(d.get("d", d.get("degree"))))


def _as_records(u, y):
    """Normalise ``(u, y)`` to equal-length lists of 1-D arrays."""
    if isinstance(u, np.ndarray) or np.isscalar(u[0]):
        u, y = [u], [y]
    us = [np.asarray(a, dtype=float).ravel() for a in u]
    ys = [np.asarray(a, dtype=float).ravel() for a in y]
    if len(us) != len(ys):
        raise DimensionMismatch("different number of input and output records")
    for a, b in zip(us, ys):
        if a.shape != b.shape:
            raise DimensionMismatch(f"input length {a.size} != output length {b.size}")
    return us, ys


def build_regressors(u, y, s):
    """Regressor matrix and targets for one record (or a list of records).

    Returns ``(X, targets)`` with ``X`` of shape ``(rows, n_u + n_y + 1)``.
    For several records the per-record blocks are stacked, so no regressor
    straddles a record boundary.
    """
    us, ys = _as_records(u, y)
    t0 = s.max_lag
    blocks, targets = [], []
    for uu, yy in zip(us, ys):
        L = uu.size
        if L <= t0:
            raise TooShort(f"record of length {L} needs more than {t0} samples")
        cols = [uu[t0 - j:L - j] for j in range(s.n_u + 1)]
        cols += [yy[t0 - j:L - j] for j in range(1, s.n_y + 1)]
        blocks.append(np.column_stack(cols))
        targets.append(yy[t0:])
    return np.vstack(blocks), np.concatenate(targets)


class PNarxModel:
    """Polynomial NARX model ``y(t) = f(x(t))``."""

    kind = "pnarx"

    def __init__(self, structure, f):
        if f.n_vars != structure.n_vars:
            raise DimensionMismatch(
                f"polynomial has {f.n_vars} variables, structure needs {structure.n_vars}")
        self.structure = structure
        self.f = f

    @property
    def n_params(self):
        return len(self.f.coeffs)

    def __call__(self, x):
        return self.f(x)

    def to_dict(self):
        return {
            "type": self.kind,
            "structure": self.structure.to_dict(),
            "include_constant": self.f.basis.include_constant,
            "coeffs": [float(c) for c in self.f.coeffs],
        }

    @classmethod
    def from_dict(cls, d):
        s = NarxStructure.from_dict(d["structure"])
        basis = basis_enumerate(s.n_vars, s.degree, bool(d.get("include_constant", False)))
        return cls(s, MultiPoly(basis, d["coeffs"]))


class DecoupledNarxModel:
    """Decoupled NARX model ``y(t) = sum_i g_i(v_i^T x(t))``.

    ``V`` has unit-norm columns; the output weights are absorbed into the
    branch coefficients ``coeffs[i] = (c_0, c_1, ..., c_d)`` of branch ``i``.
    """

    kind = "decoupled"

    def __init__(self, structure, V, coeffs):
        V = np.array(V, dtype=float, ndmin=2)
        coeffs = np.array(coeffs, dtype=float, ndmin=2)
        if V.shape[0] != structure.n_vars:
            raise DimensionMismatch(f"V has {V.shape[0]} rows, expected {structure.n_vars}")
        if coeffs.shape[0] != V.shape[1]:
            raise DimensionMismatch("one coefficient row per branch is required")
        if not (np.all(np.isfinite(V)) and np.all(np.isfinite(coeffs))):
            raise ValueError("non-finite model parameters")
        if not np.allclose(np.linalg.norm(V, axis=0), 1.0, atol=1e-9):
            raise ValueError("columns of V must have unit norm; use from_raw()")
        V.setflags(write=False)
        coeffs.setflags(write=False)
        self.structure = structure
        self.V = V
        self.coeffs = coeffs

    @classmethod
    def from_raw(cls, structure, V, coeffs):
        """Build from unnormalised ``V``, rescaling ``c_j`` by ``|v_i|**j``."""
        V = np.array(V, dtype=float, ndmin=2)
        coeffs = np.array(coeffs, dtype=float, ndmin=2)
        norms = np.linalg.norm(V, axis=0)
        norms[norms == 0] = 1.0
        powers = norms[:, None] ** np.arange(coeffs.shape[1])[None, :]
        return cls(structure, V / norms, coeffs * powers)

    @property
    def r(self):
        return self.V.shape[1]

    @property
    def degree(self):
        return self.coeffs.shape[1] - 1

    @property
    def n_params(self):
        return self.V.size + self.coeffs.size

    @property
    def branches(self):
        return [UnivariatePoly(c) for c in self.coeffs]

    def __call__(self, x):
        single = np.ndim(x) == 1
        z = np.atleast_2d(np.asarray(x, dtype=float)) @ self.V
        powers = z[:, :, None] ** np.arange(self.degree + 1)
        out = np.einsum("nij,ij->n", powers, self.coeffs)
        return float(out[0]) if single else out

    def to_multipoly(self):
        """Expand into the monomial basis (constant included)."""
        n, d = self.structure.n_vars, self.degree
        basis = basis_enumerate(n, d, include_constant=True)
        out = np.zeros(len(basis))
        for row, alpha in enumerate(basis.exponents):
            j = int(alpha.sum())
            multinom = factorial(j) / np.prod([factorial(int(a)) for a in alpha])
            out[row] = multinom * np.sum(self.coeffs[:, j] * np.prod(self.V.T ** alpha, axis=1))
        return MultiPoly(basis, out)

    def to_dict(self):
        return {
            "type": self.kind,
            "structure": self.structure.to_dict(),
            "V": self.V.tolist(),
            "branches": self.coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(NarxStructure.from_dict(d["structure"]), d["V"], d["branches"])


def model_from_dict(d):
    kinds = {"pnarx": PNarxModel, "decoupled": DecoupledNarxModel}
    try:
        return kinds[d["type"]].from_dict(d)
    except KeyError as exc:
        raise ValueError(f"unknown or malformed model document: {exc}") from None


def dumps_json(obj):
    """Deterministic JSON text (sorted keys, shortest round-trip floats)."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def save_model(model, path):
    with open(path, "w") as fh:
        fh.write(dumps_json(model.to_dict()))


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def fit_pnarx(u, y, s=NarxStructure()):
    """Equation-error least-squares P-NARX estimate (constant term excluded)."""
    X, t = build_regressors(u, y, s)
    basis = basis_enumerate(s.n_vars, s.degree, include_constant=False)
    phi = basis.design_matrix(X)
    if phi.shape[0] < phi.shape[1]:
        raise RankDeficient(f"{phi.shape[0]} rows for {phi.shape[1]} coefficients")
    if not np.any(t):
        return PNarxModel(s, MultiPoly(basis, np.zeros(len(basis))))
    scale = np.linalg.norm(phi, axis=0)
    scale[scale == 0] = 1.0
    coef, _, rank, sv = np.linalg.lstsq(phi / scale, t, rcond=None)
    cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
    if rank < phi.shape[1] or cond > 1e12:
        raise RankDeficient(f"regression matrix is rank deficient (condition {cond:.3g})")
    return PNarxModel(s, MultiPoly(basis, coef / scale))


@njit(cache=True)
def _sim_pnarx(u, out, t0, n_u, n_y, exps, coeffs, bound):
    nv = n_u + n_y + 1
    x = np.empty(nv)
    for t in range(t0, u.shape[0]):
        for j in range(n_u + 1):
            x[j] = u[t - j]
        for j in range(n_y):
            x[n_u + 1 + j] = out[t - 1 - j]
        acc = 0.0
        for p in range(exps.shape[0]):
            m = coeffs[p]
            for k in range(nv):
                for _ in range(exps[p, k]):
                    m *= x[k]
            acc += m
        if not abs(acc) <= bound:
            return t
        out[t] = acc
    return -1


@njit(cache=True)
def _sim_decoupled(u, out, t0, n_u, n_y, V, C, bound):
    nv = n_u + n_y + 1
    r, d1 = C.shape
    x = np.empty(nv)
    for t in range(t0, u.shape[0]):
        for j in range(n_u + 1):
            x[j] = u[t - j]
        for j in range(n_y):
            x[n_u + 1 + j] = out[t - 1 - j]
        acc = 0.0
        for i in range(r):
            z = 0.0
            for k in range(nv):
                z += V[k, i] * x[k]
            g = C[i, d1 - 1]
            for j in range(d1 - 2, -1, -1):
                g = g * z + C[i, j]
            acc += g
        if not abs(acc) <= bound:
            return t
        out[t] = acc
    return -1


def simulate(model, u, y_init, bound=None):
    """Free-run simulation of a P-NARX or decoupled model.

    The first ``max_lag`` samples of ``y_init`` are copied to the output.
    ``y_init`` may be the full measured output; its RMS (times 1e6) sets the
    divergence bound unless ``bound`` is given.
    """
    s = model.structure
    u = np.ascontiguousarray(u, dtype=float).ravel()
    y_init = np.asarray(y_init, dtype=float).ravel()
    t0 = s.max_lag
    if y_init.size < t0:
        raise TooShort(f"need {t0} initial outputs, got {y_init.size}")
    if u.size < t0:
        raise TooShort(f"input of length {u.size} is shorter than the lag window {t0}")
    if bound is None:
        ref = np.sqrt(np.mean(y_init ** 2)) if y_init.size else 0.0
        bound = DIVERGENCE_FACTOR * (ref if ref > 0 else 1.0)
    out = np.zeros(u.size)
    out[:t0] = y_init[:t0]
    if isinstance(model, PNarxModel):
        exps = np.ascontiguousarray(model.f.basis.exponents, dtype=np.int64)
        status = _sim_pnarx(u, out, t0, s.n_u, s.n_y, exps,
                            np.ascontiguousarray(model.f.coeffs), float(bound))
    else:
        status = _sim_decoupled(u, out, t0, s.n_u, s.n_y,
                                np.ascontiguousarray(model.V),
                                np.ascontiguousarray(model.coeffs), float(bound))
    if status >= 0:
        raise Diverged(f"simulation exceeded |y| <= {bound:.3g} at sample {status}", status)
    return out


def e_rms(y, y_s, skip=0):
    """Relative RMS simulation error in percent, ignoring the first ``skip`` samples."""
    y = np.asarray(y, dtype=float).ravel()[skip:]
    y_s = np.asarray(y_s, dtype=float).ravel()[skip:]
    if y.shape != y_s.shape:
        raise DimensionMismatch("signals must have equal length")
    den = np.sqrt(np.mean(y ** 2)) if y.size else 0.0
    if den == 0:
        raise ZeroReference("reference output is identically zero")
    return float(100.0 * np.sqrt(np.mean((y - y_s) ** 2)) / den)


def simulation_error(model, records):
    """``e_rms`` of free-run simulations over one or more records (``u``, ``y`` pairs).

    Initialisation windows are excluded; errors of all records are pooled.
    A single record is accepted as well.
    """
    if hasattr(records, "u"):
        records = [records]
    us, ys = _as_records(*records) if isinstance(records, tuple) else _as_records(
        [r.u for r in records], [r.y for r in records])
    t0 = model.structure.max_lag
    y_all = np.concatenate([y[t0:] for y in ys])
    ys_all = np.concatenate([simulate(model, u, y)[t0:] for u, y in zip(us, ys)])
    return e_rms(y_all, ys_all)


def e_f(f, f_d, X_o):
    """Relative RMS function-approximation error (percent) over operating points."""
    X_o = np.atleast_2d(np.asarray(X_o, dtype=float))
    if X_o.shape[0] == 0:
        raise ValueError("no operating points")
    ref = np.asarray(f(X_o), dtype=float)
    return e_rms(ref, f_d(X_o))
