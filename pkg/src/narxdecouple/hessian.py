"""Decoupling from second derivatives.

The Hessians of the known function at the operating points are stacked into
an ``n x n x N`` tensor and fitted by a symmetric CPD ``[[V, V, G'']]`` whose
third factor is constrained to the second derivatives of degree-``d``
polynomial branches.  Curvature carries no information on the affine part of
the branches, so it is recovered afterwards by a linear fit to function
values, before optional output-error refinement.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, RankDeficient
from .finetune import DEFAULT_OPTIONS, finetune_sim
from .lm import LmOptions, levenberg_marquardt
from .narx import DecoupledNarxModel, NarxStructure, PNarxModel
from .poly import poly_hessian
from .tensor import matricize


@dataclass
class HessianFactors:
    """``V`` (unit-norm columns) and ``c = [c_0, c_11 .. c_d1, ..., c_dr]``."""

    V: np.ndarray
    c: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.V = np.atleast_2d(np.asarray(self.V, dtype=float))
        self.c = np.asarray(self.c, dtype=float).ravel()
        r = self.V.shape[1]
        if (self.c.size - 1) % r:
            raise DimensionMismatch(f"{self.c.size} coefficients do not fit 1 + r*d with r = {r}")

    @property
    def r(self):
        return self.V.shape[1]

    @property
    def d(self):
        return (self.c.size - 1) // self.r

    def branch_coeffs(self):
        """``(r, d)`` array of ``c_{j,i}`` for ``j = 1..d`` (row ``i``)."""
        return self.c[1:].reshape(self.r, self.d)

    def to_model(self, structure):
        C = np.zeros((self.r, self.d + 1))
        C[:, 1:] = self.branch_coeffs()
        C[:, 0] = self.c[0] / self.r
        return DecoupledNarxModel(structure, self.V, C)


def _poly_of(f):
    return f.f if isinstance(f, PNarxModel) else f


def build_hessian_tensor(f, X_o):
    """Slice ``l`` of the result is the Hessian of ``f`` at ``X_o[l]``."""
    poly = _poly_of(f)
    X_o = np.atleast_2d(np.asarray(X_o, dtype=float))
    if X_o.shape[1] != poly.n_vars:
        raise DimensionMismatch(f"points have {X_o.shape[1]} coordinates, f has {poly.n_vars}")
    return np.ascontiguousarray(poly_hessian(poly, X_o).transpose(1, 2, 0))


class _CurvatureModel:
    """Residual of the upper-triangle-weighted Hessian fit for a given ``V``."""

    def __init__(self, H, X_o, r, d):
        n, _, N = H.shape
        self.a, self.b = np.triu_indices(n)
        self.wt = np.where(self.a == self.b, 1.0, np.sqrt(2.0))
        self.y = (H[self.a, self.b, :].T * self.wt).ravel()       # (point, pair)
        self.X, self.n, self.r, self.d = X_o, n, r, d
        self.jj = np.arange(2, d + 1)

    def design(self, V):
        Z = self.X @ V
        cols = []
        for i in range(self.r):
            pair = self.wt * V[self.a, i] * V[self.b, i]
            for j in self.jj:
                cols.append(np.outer(j * (j - 1) * Z[:, i] ** (j - 2), pair).ravel())
        return np.column_stack(cols) if cols else np.zeros((self.y.size, 0))

    def solve(self, V):
        P = self.design(V)
        if P.shape[1] == 0:
            return np.zeros(0), self.y.copy()
        coef = np.linalg.lstsq(P, self.y, rcond=None)[0]
        return coef, self.y - P @ coef


def _unit(V):
    nrm = np.linalg.norm(V, axis=0)
    nrm[nrm == 0] = 1.0
    return V / nrm


def structured_hessian_decouple(H, r, d, X_o, seed=0, restarts=5, opts=LmOptions(max_iters=100)):
    """Fit ``H`` by a symmetric CPD with polynomially constrained curvature.

    For fixed ``V`` the coefficients ``c_{j,i}`` (``j >= 2``) enter linearly and
    are eliminated by least squares; ``V`` is found by damped Gauss-Newton
    from ``restarts`` seeded starts, each a random rotation of the dominant
    ``r``-dimensional subspace of the unfolded tensor (Gaussian columns when
    ``r > n``).  The best start is returned.

    Entries ``c_0`` and ``c_{1,i}`` are left at zero; see
    :func:`recover_linear_part`.  ``flags`` records the relative objective and
    ``no_descent`` (no start accepted a single step on a nonzero residual).
    With ``d < 2`` or an all-zero tensor the directions stay at their starting
    values and ``curvature_uninformative`` is set.
    """
    H = np.asarray(H, dtype=float)
    X_o = np.atleast_2d(np.asarray(X_o, dtype=float))
    if H.ndim != 3 or H.shape[0] != H.shape[1]:
        raise DimensionMismatch(f"expected an n x n x N tensor, got shape {H.shape}")
    n, _, N = H.shape
    if X_o.shape != (N, n):
        raise DimensionMismatch(f"expected {N} points of dimension {n}, got {X_o.shape}")
    if N < d + 1:
        raise ValueError(f"N = {N} points cannot determine degree-{d} branches")
    if not np.allclose(H, H.transpose(1, 0, 2), rtol=1e-10, atol=1e-12 * max(np.abs(H).max(), 1)):
        raise ValueError("Hessian slices must be symmetric")
    cm = _CurvatureModel(H, X_o, r, d)
    rng = np.random.default_rng(seed)
    U = np.linalg.svd(matricize(H, 1), full_matrices=False)[0]

    def fun(p):
        return cm.solve(_unit(p.reshape(n, r)))[1]

    best = None
    for _ in range(restarts):
        if r <= n:
            V0 = U[:, :r] @ np.linalg.qr(rng.standard_normal((r, r)))[0]
        else:
            V0 = rng.standard_normal((n, r))
        res = levenberg_marquardt(fun, V0.ravel(), opts)
        if best is None or res.sse < best.sse:
            best = res
    V = _unit(best.x.reshape(n, r))
    coef, resid = cm.solve(V)
    c = np.zeros((r, d))
    if d >= 2:
        c[:, 1:] = coef.reshape(r, d - 1)
    total = float(cm.y @ cm.y)
    flags = {
        "objective": float(resid @ resid),
        "relative_objective": float(resid @ resid) / total if total > 0 else 0.0,
        "no_descent": best.status == "no_progress" and total > 0,
        "lm_status": best.status,
        "curvature_uninformative": d < 2 or total == 0,
    }
    return HessianFactors(V, np.concatenate([[0.0], c.ravel()]), flags)


def recover_linear_part(f, factors, X_o):
    """Fill ``c_0`` and ``c_{1,i}`` by least squares on function values.

    The target is ``f(X_o)`` minus the degree >= 2 part of the decoupled
    model; the regressors are ``1, z_1, ..., z_r``.  Collinear projections
    give the minimum-norm solution, a ``RuntimeWarning`` and
    ``flags["linear_rank_deficient"] = True``.
    """
    poly = _poly_of(f)
    X_o = np.atleast_2d(np.asarray(X_o, dtype=float))
    V, r, d = factors.V, factors.r, factors.d
    Z = X_o @ V
    C = factors.branch_coeffs().copy()
    higher = sum(Z[:, [i]] ** np.arange(2, d + 1) @ C[i, 1:] for i in range(r)) if d >= 2 else 0.0
    target = poly(X_o) - higher
    A = np.column_stack([np.ones(len(X_o)), Z])
    sol, _, rank, _ = np.linalg.lstsq(A, target, rcond=None)
    flags = dict(factors.flags)
    flags["linear_rank_deficient"] = bool(rank < A.shape[1])
    if flags["linear_rank_deficient"]:
        warnings.warn(str(RankDeficient(
            f"projections are collinear (rank {rank} of {A.shape[1]}); "
            "using the minimum-norm linear part")), RuntimeWarning, stacklevel=2)
    C[:, 0] = sol[1:]
    return HessianFactors(V, np.concatenate([[sol[0]], C.ravel()]), flags)


@dataclass
class HessianResult:
    model: DecoupledNarxModel
    raw_model: DecoupledNarxModel
    factors: HessianFactors
    finetune: object = None

    def diagnostics(self, **extra):
        out = {"method": "hessian", "r": self.factors.r, "d": self.factors.d}
        out.update({k: v for k, v in self.factors.flags.items()})
        if self.finetune is not None:
            out["finetune_trace"] = self.finetune.trace
            out["finetune_status"] = self.finetune.status
        out.update(extra)
        return out


def hessian_pipeline(f, X_o, r, d, training=None, opts=DEFAULT_OPTIONS, seed=0,
                     structure=None, restarts=5):
    """Curvature fit, linear-part recovery and (optional) output-error refinement.

    ``f`` is a :class:`PNarxModel` or a :class:`MultiPoly`; the model structure
    is taken from ``f`` unless given.  With ``training=None`` the refinement
    step is skipped and ``model`` equals ``raw_model``.
    """
    if structure is None:
        structure = getattr(f, "structure", None)
    X_o = np.atleast_2d(np.asarray(X_o, dtype=float))
    if structure is None:
        structure = NarxStructure(0, X_o.shape[1] - 1, d)
    H = build_hessian_tensor(f, X_o)
    factors = structured_hessian_decouple(H, r, d, X_o, seed=seed, restarts=restarts)
    factors = recover_linear_part(f, factors, X_o)
    raw = factors.to_model(structure)
    if training is None:
        return HessianResult(raw, raw, factors)
    ft = finetune_sim(raw, training, opts)
    return HessianResult(ft.model, raw, factors, ft)
