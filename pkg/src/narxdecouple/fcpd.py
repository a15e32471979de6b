"""Filtered CPD decoupling of a known multivariate function.

The Jacobian tensor ``J`` (outputs x inputs x operating points) of the known
function is approximated by the diagonal decomposition
``[[W, V, F_C(V) o G]]`` where column ``i`` of ``G`` holds samples of the
branch function ``g_i`` at the operating points and ``F_C(V)`` is a
finite-difference filter on the (non-uniform) grid ``z_i = X_o @ v_i``.  A
penalty on the mismatch between left and right one-sided differences keeps
the samples smooth.

Finite-difference filters
-------------------------
For branch ``i`` the operating points are sorted by ``z_i``.  Every filter
row ``k`` is the derivative at ``z[k]`` of a polynomial fitted to the samples
on a small set of neighbouring sorted nodes (interpolation when the node
count is one more than the degree, least squares otherwise).  Near the ends
of the grid the node set is shifted inwards so it never leaves the grid.

==========  ====================================  ============================
stencil     central rows                          left / right rows
==========  ====================================  ============================
lsq         nodes ``k-3 .. k+3``, degree 4        ``k-5 .. k`` / ``k .. k+5``,
                                                  degree 3
lagrange    nodes ``k-2 .. k+2``, degree 4        ``k-3 .. k`` / ``k .. k+3``,
                                                  degree 3
secant      ``(g[k+1] - g[k-1]) /``               ``k-1, k`` / ``k, k+1``
            ``(z[k+1] - z[k-1])``
==========  ====================================  ============================

With ``"lsq"`` (the default) and ``"lagrange"`` the central filter is exact
for quartic branches and both one-sided filters are exact for cubics, so
their mismatch (the smoothness penalty) vanishes on cubic branches and grows
with roughness.  The least-squares weights stay bounded when two nodes nearly
coincide, which keeps the V update well behaved.  ``"secant"`` is the classical three-point scheme with one-sided
differences at the first and last rows.  Filters are stored with the sort
permutation so they consume and produce vectors in operating-point order.
"""

import hashlib
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import DegenerateGrid, DimensionMismatch, RankDeficient
from .lm import LmOptions, levenberg_marquardt
from .narx import DecoupledNarxModel, NarxStructure, PNarxModel, build_regressors, simulate
from .poly import fit_univariate, poly_gradient
from .tensor import cpd_reconstruct, fold, khatri_rao, matricize

INITS = ("warm", "identity")
EXACT_FIT = 1e-20
GAP_TOL = 1e-12
JITTER = 1e-9


# ---------------------------------------------------------------- data types

@dataclass
class OperatingPointSet:
    X: np.ndarray
    seed: int = None
    source: str = ""
    diagonal_fallback: bool = False

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if not np.all(np.isfinite(self.X)):
            raise ValueError("operating points must be finite")

    def __len__(self):
        return self.X.shape[0]


@dataclass(frozen=True)
class FcpdConfig:
    r: int
    lam: float = 1.0
    max_sweeps: int = 200
    tol: float = 1e-4
    inner: LmOptions = LmOptions(max_iters=5)
    seed: int = 0
    stencil: str = "lsq"
    init: str = "warm"
    n_starts: int = 5
    warm_degree: int = 3

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.n_starts < 1 or self.warm_degree < 0:
            raise ValueError("n_starts must be >= 1 and warm_degree >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.stencil not in STENCILS:
            raise ValueError(f"stencil must be one of {STENCILS}")


@dataclass
class FcpdFactors:
    W: np.ndarray
    V: np.ndarray
    G: np.ndarray

    @property
    def r(self):
        return self.V.shape[1]


@dataclass
class FcpdResult:
    factors: FcpdFactors
    objective_trace: list
    tensor_residual: float
    sweeps: int
    update_log: list = field(default_factory=list)
    v_rejections: int = 0

    def diagnostics(self, cfg, **extra):
        out = {
            "r": cfg.r, "lambda": cfg.lam, "seed": cfg.seed, "sweeps": self.sweeps,
            "objective_trace": [float(v) for v in self.objective_trace],
            "tensor_residual": float(self.tensor_residual),
        }
        out.update(extra)
        return out


# ---------------------------------------------------------------- filters

# per stencil and filter kind: (node offsets around row k, polynomial degree)
_STENCILS = {
    "lsq": {"central": ((-3, -2, -1, 0, 1, 2, 3), 4),
            "left": ((-5, -4, -3, -2, -1, 0), 3),
            "right": ((0, 1, 2, 3, 4, 5), 3)},
    "lagrange": {"central": ((-2, -1, 0, 1, 2), 4),
                 "left": ((-3, -2, -1, 0), 3),
                 "right": ((0, 1, 2, 3), 3)},
    "secant": {"central": ((-1, 1), 1), "left": ((-1, 0), 1), "right": ((0, 1), 1)},
}
STENCILS = tuple(_STENCILS)


def stencil_size(stencil):
    return max(len(o) for o, _ in _STENCILS[stencil].values()) + (stencil == "secant")


def _nodes(kind, N, stencil):
    """``(N, p)`` sorted-grid node indices and the fit degree for one filter."""
    if stencil not in _STENCILS:
        raise ValueError(f"unknown stencil {stencil!r}")
    if kind not in ("left", "right", "central"):
        raise ValueError(f"unknown filter {kind!r}")
    off, deg = _STENCILS[stencil][kind]
    off = np.array(off)
    k = np.arange(N)[:, None]
    if 0 not in off:
        # secant centre: fall back to a one-sided pair at the ends
        idx = k + off
        idx[0], idx[-1] = (0, 1), (N - 2, N - 1)
        return idx, deg
    if off.size > N:
        # short grids: use every node, lowering the degree if needed
        return np.broadcast_to(np.arange(N), (N, N)), min(deg, N - 1)
    start = np.clip(k[:, 0] + off[0], 0, N - off.size)
    return start[:, None] + np.arange(off.size), deg


def _weights(zs, idx, deg):
    """Derivative weights at ``zs[k]`` of the degree-``deg`` least-squares fit on ``idx[k]``.

    With ``deg + 1`` nodes this is the interpolating polynomial.  Returns the
    scaled weights ``what`` (true weights are ``what / s``), the scaled node
    offsets ``t = (zs[idx] - zs[k]) / s``, the row scale ``s``, the
    Vandermonde rows ``T`` and their pseudo-inverse.
    """
    d = zs[idx] - zs[:, None]
    s = np.max(np.abs(d), axis=1)
    t = d / s[:, None]
    T = t[..., None] ** np.arange(deg + 1)                     # (N, p, deg+1)
    pinv = np.linalg.pinv(T)                                    # (N, deg+1, p)
    return pinv[:, 1, :], t, s, T, pinv


def _filter_sorted(kind, zs, gs, stencil):
    idx, deg = _nodes(kind, zs.size, stencil)
    what, _, s, _, _ = _weights(zs, idx, deg)
    return np.einsum("kj,kj->k", what, gs[idx]) / s


def _filter_sorted_jac(kind, zs, gs, Xs, stencil):
    """Filter output and its derivative w.r.t. the projection direction.

    ``Xs`` holds the sorted points; returns ``(h, dh)`` with ``dh`` of shape
    ``(N, n)`` such that ``dh[k] = d h[k] / d u`` for ``z = Xs @ u``.
    """
    idx, deg = _nodes(kind, zs.size, stencil)
    what, t, s, T, pinv = _weights(zs, idx, deg)
    gk = gs[idx]
    h = np.einsum("kj,kj->k", what, gk) / s
    a = np.einsum("kqj,kj->kq", pinv, what)                    # (T^T T)^-1 e_1
    c = np.einsum("kqj,kj->kq", pinv, gk)
    res = gk - np.einsum("kjq,kq->kj", T, c)
    dT = np.zeros_like(T)
    q = np.arange(1, deg + 1)
    dT[..., 1:] = q * t[..., None] ** (q - 1)
    # least-squares fit derivative w.r.t. a node: residual term minus weight * P'(t_j);
    # only the differences z_j - z_k matter
    grad = (res * np.einsum("kjq,kq->kj", dT, a)
            - what * np.einsum("kjq,kq->kj", dT, c)) / s[:, None] ** 2
    dh = np.einsum("kj,kjn->kn", grad, Xs[idx] - Xs[:, None, :])
    return h, dh


@dataclass
class BranchFilter:
    """Filters of one branch: sort order plus slope stencils on the sorted grid."""

    order: np.ndarray
    z_sorted: np.ndarray
    stencil: str = "lsq"

    @property
    def N(self):
        return self.order.size

    def matrix(self, kind):
        """Sparse ``N x N`` filter acting on vectors in operating-point order."""
        N = self.N
        idx, deg = _nodes(kind, N, self.stencil)
        what, _, s, _, _ = _weights(self.z_sorted, idx, deg)
        rows = np.repeat(np.arange(N), idx.shape[1])
        o = self.order
        return sp.csr_matrix(((what / s[:, None]).ravel(), (o[rows], o[idx.ravel()])),
                             shape=(N, N))

    def apply(self, kind, g):
        gs = np.asarray(g, dtype=float)[self.order]
        out = np.empty(self.N)
        out[self.order] = _filter_sorted(kind, self.z_sorted, gs, self.stencil)
        return out


class FilterSet:
    """Per-branch left/right/central finite-difference filters for a given ``V``."""

    def __init__(self, branches):
        self.branches = list(branches)
        self._cache = {}

    @property
    def r(self):
        return len(self.branches)

    @property
    def stencil(self):
        return self.branches[0].stencil

    def matrix(self, kind, i):
        key = (kind, i)
        if key not in self._cache:
            self._cache[key] = self.branches[i].matrix(kind)
        return self._cache[key]

    def smooth_matrix(self, i):
        """``F_L - F_R`` for branch ``i``."""
        return self.matrix("left", i) - self.matrix("right", i)

    def apply(self, kind, G):
        G = np.atleast_2d(np.asarray(G, dtype=float))
        return np.column_stack([b.apply(kind, G[:, i]) for i, b in enumerate(self.branches)])


def _branch_filter(z, stencil="lsq"):
    z = np.asarray(z, dtype=float)
    N = z.size
    need = stencil_size(stencil)
    if N < need:
        raise DegenerateGrid(f"at least {need} points are needed, got {N}")
    order = np.argsort(z, kind="stable")
    zs = z[order].copy()
    span = zs[-1] - zs[0]
    if not span > 0:
        raise DegenerateGrid("all projections coincide")
    if np.any(np.diff(zs) <= GAP_TOL * span):
        warnings.warn("near-coincident projections; spreading them by a jitter of "
                      f"{JITTER:g} x range", RuntimeWarning, stacklevel=3)
        for k in range(1, N):
            zs[k] = max(zs[k], zs[k - 1] + JITTER * span)
    return BranchFilter(order, zs, stencil)


def build_fd_filters(V, X_o, stencil="lsq"):
    V = np.atleast_2d(np.asarray(V, dtype=float))
    X_o = np.atleast_2d(np.asarray(X_o, dtype=float))
    if V.shape[0] != X_o.shape[1]:
        raise DimensionMismatch("V rows must match the point dimension")
    Z = X_o @ V
    return FilterSet(_branch_filter(Z[:, i], stencil) for i in range(V.shape[1]))


# ---------------------------------------------------------------- tensor construction

def build_jacobian_tensor(f, X_o):
    """Jacobian tensor of shape ``(1, n, N)`` for a scalar polynomial ``f``."""
    f = f.f if isinstance(f, PNarxModel) else f
    X_o = np.atleast_2d(np.asarray(X_o, dtype=float))
    if X_o.shape[1] != f.n_vars:
        raise DimensionMismatch(f"points have {X_o.shape[1]} coordinates, f has {f.n_vars}")
    return poly_gradient(f, X_o).T[None, :, :]


def sample_operating_points(model, training, N=200, seed=0):
    """Draw ``N`` points from a normal fitted to simulated training regressors.

    The P-NARX model is simulated on every training record (measured outputs
    seed the lag window); the regressors built from the input and the simulated
    output define the mean and covariance.  A singular covariance falls back to
    its diagonal and sets ``diagonal_fallback``.
    """
    records = training if isinstance(training, (list, tuple)) else [training]
    s = model.structure
    us, ys = [], []
    for rec in records:
        us.append(rec.u)
        ys.append(simulate(model, rec.u, rec.y))
    X_T, _ = build_regressors(us, ys, s)
    mean = X_T.mean(axis=0)
    cov = np.atleast_2d(np.cov(X_T, rowvar=False))
    eig = np.linalg.eigvalsh(cov)
    fallback = not eig[0] > 1e-12 * max(eig[-1], 1e-300)
    if fallback:
        warnings.warn("singular regressor covariance; using its diagonal", RuntimeWarning,
                      stacklevel=2)
        L = np.diag(np.sqrt(np.clip(np.diag(cov), 0.0, None)))
    else:
        L = np.linalg.cholesky(cov)
    Z = np.random.default_rng(seed).standard_normal((N, s.n_vars))
    return OperatingPointSet(mean + Z @ L.T, seed,
                             f"normal fit to {X_T.shape[0]} simulated training regressors",
                             fallback)


# ---------------------------------------------------------------- objectives

def tensor_objective(J, W, V, G, filters):
    H = filters.apply("central", G)
    return float(np.sum((J - cpd_reconstruct(W, V, H)) ** 2))


def smoothness_penalty(G, filters):
    return float(np.sum((filters.apply("left", G) - filters.apply("right", G)) ** 2))


def joint_objective(J, W, V, G, filters, lam):
    return tensor_objective(J, W, V, G, filters) + lam * smoothness_penalty(G, filters)


# ---------------------------------------------------------------- ALS updates

def update_W(J1, V, G, filters):
    """Closed-form least-squares update of ``W`` from the mode-1 unfolding."""
    H = filters.apply("central", G)
    K = khatri_rao(H, V)
    sol, _, rank, _ = np.linalg.lstsq(K, np.asarray(J1, dtype=float).T, rcond=None)
    if rank < K.shape[1]:
        warnings.warn("rank-deficient W update; minimum-norm solution used",
                      RuntimeWarning, stacklevel=2)
    return sol.T


def _g_operator(W, U, filters, lam):
    """Sparse ``A`` with stacked residual ``b - A g`` for branch-major ``g``.

    Rows follow :func:`_v_residual_parts`: the raveled ``(m, n, N)`` tensor
    residual, then per branch the penalty in sorted order.
    """
    r = U.shape[1]
    blocks = []
    for i in range(r):
        wu = np.kron(W[:, i], U[:, i])[:, None]
        blocks.append(sp.kron(sp.csr_matrix(wu), filters.matrix("central", i)))
    top = sp.hstack(blocks)
    pen = sp.block_diag([-np.sqrt(lam) * filters.smooth_matrix(i)[filters.branches[i].order]
                         for i in range(r)])
    return sp.vstack([top, pen]).tocsr()


class _GSolver:
    """Least-squares solver for the G subproblem ``min ||A g - b||``.

    The problem is often badly conditioned (close grid points give large
    filter weights), so a plain normal-equation solve loses most digits.  The
    solver uses corrected semi-normal equations: with an upper-triangular
    ``R`` satisfying ``R^T R ~ A^T A`` (Jacobi-scaled, per-branch constant
    nullspace pinned), each refinement step recomputes the residual through
    the sparse ``A``.  ``R`` comes from a Cholesky factorisation when that is
    accurate enough for the refinement to converge, otherwise from a
    Householder QR of ``A``, which is stable up to condition numbers near
    ``1 / eps``.  When a condition estimate flags ``R`` as numerically
    singular (for example two branches sharing a direction) it is recomputed with
    a tiny ridge on the scaled columns; the refinement still targets the
    unregularised problem and leaves the null space untouched.
    """

    RCOND = 1e-14
    RIDGE = 1e-8

    REFINE = 6

    LEVELS = ("cholesky", "qr", "ridge")

    def __init__(self, A, r, start="cholesky"):
        self.A = A
        self.r = r
        n = A.shape[1]
        self.N = n // r
        M = (A.T @ A).toarray()
        d = np.sqrt(np.diag(M))
        d[d == 0] = 1.0
        self.d = d
        # pin rows: one per branch, scaled like the columns
        pin = np.zeros((r, n))
        for i in range(r):
            si = slice(i * self.N, (i + 1) * self.N)
            pin[i, si] = 1.0 / (np.sqrt(self.N) * d[si])
        self._pin = pin
        Ms = M / np.outer(d, d) + pin.T @ pin
        self.R = None
        self.method = "cholesky"
        if start == "qr":
            self._use_qr()
            return
        if start == "ridge":
            self._use_ridge()
            return
        try:
            R = scipy.linalg.cholesky(Ms, lower=False, check_finite=False)
            if np.all(np.isfinite(R)):
                self.R = R
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            pass
        if self.R is None:
            self._use_qr()

    def _use_qr(self):
        As = self.A.toarray() / self.d
        self.R = scipy.linalg.qr(np.vstack([As, self._pin]), mode="r",
                                 check_finite=False)[0][:As.shape[1]]
        self.method = "qr"
        rcond, info = scipy.linalg.lapack.dtrcon(self.R, norm="1", uplo="U")
        if info != 0 or not rcond > self.RCOND:
            self._use_ridge()

    def _use_ridge(self):
        As = self.A.toarray() / self.d
        n = As.shape[1]
        self.R = scipy.linalg.qr(np.vstack([As, self._pin, self.RIDGE * np.eye(n)]), mode="r",
                                 check_finite=False)[0][:n]
        self.method = "ridge"

    def _center(self, g):
        g = g.reshape(self.r, self.N)
        return (g - g.mean(axis=1, keepdims=True)).T

    def normal_solve(self, Z):
        """Pinned ``(A^T A)^+ Z`` for a vector or a matrix of right-hand sides."""
        d = self.d if Z.ndim == 1 else self.d[:, None]
        tri = scipy.linalg.solve_triangular
        y = tri(self.R, Z / d, trans="T", check_finite=False)
        return tri(self.R, y, check_finite=False) / d

    def _refine(self, b):
        A = self.A
        g = self.normal_solve(A.T @ b)
        prev = np.inf
        for _ in range(self.REFINE):
            dg = self.normal_solve(A.T @ (b - A @ g))
            g += dg
            step = np.linalg.norm(dg)
            if step <= 1e-12 * np.linalg.norm(g):
                return g, True
            if not step < 0.5 * prev:
                return g, False
            prev = step
        return g, False

    def solve(self, b):
        """Minimum-norm minimiser, returned as an ``(N, r)`` array."""
        with np.errstate(all="ignore"):
            g, ok = self._refine(b)
        if not ok and self.method == "cholesky":
            self._use_qr()
            with np.errstate(all="ignore"):
                g, ok = self._refine(b)
        if not np.all(np.isfinite(g)):
            raise RankDeficient("G subproblem could not be solved")
        return self._center(g)


def _stacked_target(J, r, N):
    return np.concatenate([np.asarray(J, dtype=float).ravel(), np.zeros(r * N)])


def _solver(A, r, hint):
    """``_GSolver`` starting at the most robust level recorded in ``hint``."""
    if hint is None:
        return _GSolver(A, r)
    return _GSolver(A, r, hint.get("level", "cholesky"))


def _remember(hint, solver):
    if hint is not None:
        levels = _GSolver.LEVELS
        if levels.index(solver.method) > levels.index(hint.get("level", "cholesky")):
            hint["level"] = solver.method


def update_G(J3, W, V, filters, lam, hint=None):
    """Exact minimiser over ``G`` of the tensor fit plus ``lam`` times the penalty.

    ``G`` enters linearly, so this is a sparse linear least-squares problem.
    The filters annihilate per-column constants; the minimum-norm solution
    (zero column means) is returned.

    ``hint`` is an optional dict shared by the solves of one decomposition:
    once a solve needed a more robust factorisation, later ones start there.
    """
    J3 = np.asarray(J3, dtype=float)
    m, (n, r) = W.shape[0], V.shape
    N = J3.shape[0]
    J = fold(J3, 3, (m, n, N))
    solver = _solver(_g_operator(W, V, filters, lam), r, hint)
    G = solver.solve(_stacked_target(J, r, N))
    _remember(hint, solver)
    return G


def _v_residual_parts(V_raw, X, orders, G, W, J, lam, stencil, need_jac):
    """Residual (and optional Jacobian) of the V objective with frozen sort orders.

    ``V_raw`` is normalised column-wise inside, so the objective is invariant to
    column scaling of the parameters.
    """
    n, r = V_raw.shape
    N = X.shape[0]
    norms = np.linalg.norm(V_raw, axis=0)
    U = V_raw / norms
    H = np.empty((N, r))
    pen, dH, dP = [], [], []
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for i in range(r):
            o = orders[i]
            Xs = X[o]
            zs = Xs @ U[:, i]
            gs = G[o, i]
            if need_jac:
                hc, dhc = _filter_sorted_jac("central", zs, gs, Xs, stencil)
                hl, dhl = _filter_sorted_jac("left", zs, gs, Xs, stencil)
                hr, dhr = _filter_sorted_jac("right", zs, gs, Xs, stencil)
                tmp = np.empty((N, n))
                tmp[o] = dhc
                dH.append(tmp)
                dP.append(dhl - dhr)
            else:
                hc = _filter_sorted("central", zs, gs, stencil)
                hl = _filter_sorted("left", zs, gs, stencil)
                hr = _filter_sorted("right", zs, gs, stencil)
            H[o, i] = hc
            pen.append(hl - hr)
        model = np.einsum("si,ki,li->skl", W, U, H)
        res = np.concatenate([(J - model).ravel(), np.sqrt(lam) * np.concatenate(pen)])
    if not need_jac:
        return res, None
    m = W.shape[0]
    n_t = m * n * N
    jac = np.zeros((n_t + r * N, n * r))
    eye = np.eye(n)
    for i in range(r):
        proj = (eye - np.outer(U[:, i], U[:, i])) / norms[i]     # d u / d v
        # d model[s,k,l] / d u_q = w_s (delta_kq h_l + u_k dH[l,q])
        dm = (W[:, i][:, None, None, None]
              * (eye[None, :, None, :] * H[:, i][None, None, :, None]
                 + U[:, i][None, :, None, None] * dH[i][None, None, :, :]))
        jac[:n_t, i * n:(i + 1) * n] = -(dm.reshape(n_t, n) @ proj)
        jac[n_t + i * N:n_t + (i + 1) * N, i * n:(i + 1) * n] = np.sqrt(lam) * (dP[i] @ proj)
    return res, jac


def _frozen_filters(U, X, orders, stencil):
    return FilterSet(BranchFilter(o, X[o] @ U[:, i], stencil) for i, o in enumerate(orders))


def update_V(J, W, V, G, X_o, lam, inner=LmOptions(max_iters=5), filters=None,
             stencil="lsq", hint=None):
    """Damped Gauss-Newton update of ``V`` on the joint objective.

    ``G`` enters the objective linearly, so it is eliminated: each trial ``V``
    is scored with the optimal ``G`` for that ``V`` (variable projection, with
    the usual projected Jacobian).  Sort orders are frozen at the current ``V``
    during the inner solve.  The candidate is accepted only if the joint
    objective, re-evaluated with freshly sorted filters and the matching ``G``,
    does not exceed the value at entry.  Columns are returned with unit norm.

    Returns ``(V, G, accepted)``; on rejection the inputs come back unchanged.
    ``hint`` is passed on to the G solves (see :func:`update_G`).
    """
    J = np.asarray(J, dtype=float)
    X_o = np.asarray(X_o, dtype=float)
    n, r = V.shape
    if filters is None:
        filters = build_fd_filters(V, X_o, stencil)
    stencil = filters.stencil
    orders = [b.order for b in filters.branches]
    J3 = matricize(J, 3)
    target = _stacked_target(J, r, X_o.shape[0])
    before = joint_objective(J, W, V, G, filters, lam)
    last = {}

    def inner_solution(p):
        if last.get("key") != p.tobytes():
            V_raw = p.reshape(r, n).T
            U = V_raw / np.linalg.norm(V_raw, axis=0)
            fs = _frozen_filters(U, X_o, orders, stencil)
            A = _g_operator(W, U, fs, lam)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                solver = _solver(A, r, hint)
                G_p = solver.solve(target)
                _remember(hint, solver)
            last.update(key=p.tobytes(), V_raw=V_raw, G=G_p, A=A, solver=solver)
        return last

    def fun(p):
        s_ = inner_solution(p)
        return _v_residual_parts(s_["V_raw"], X_o, orders, s_["G"], W, J, lam, stencil, False)[0]

    def jac(p):
        s_ = inner_solution(p)
        jf = _v_residual_parts(s_["V_raw"], X_o, orders, s_["G"], W, J, lam, stencil, True)[1]
        A = s_["A"]
        return jf - A @ s_["solver"].normal_solve(np.asarray(A.T @ jf))

    with np.errstate(all="ignore"):
        res = levenberg_marquardt(fun, V.T.ravel(), inner, jac=jac)
    if res.n_accepted == 0:
        return V, G, False
    step = res.x.reshape(r, n).T - V
    # the inner solve used frozen orders; shorten the step if re-sorting spoils it
    for alpha in (1.0, 0.5, 0.25, 0.125):
        V_new = V + alpha * step
        V_new = V_new / np.linalg.norm(V_new, axis=0)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                new_filters = build_fd_filters(V_new, X_o, stencil)
                G_new = update_G(J3, W, V_new, new_filters, lam, hint)
        except DegenerateGrid:
            continue
        if joint_objective(J, W, V_new, G_new, new_filters, lam) <= before:
            return V_new, G_new, True
    return V, G, False


# ---------------------------------------------------------------- driver

def _initial_V(n, r, rng):
    A = rng.standard_normal((n, r))
    if r <= n:
        A = np.linalg.qr(A)[0]
    return A / np.linalg.norm(A, axis=0)


def warm_start(J, X_o, r, rng, n_starts=5, degree=3, opts=LmOptions(max_iters=60)):
    """Directions and branch samples from a parametric fit of the Jacobian tensor.

    Every branch derivative is modelled as a polynomial of degree ``degree`` in
    ``z_i``, so for fixed ``V`` the tensor is linear in the coefficients and
    these are eliminated by least squares.  The remaining problem in ``V`` is
    solved by Levenberg-Marquardt from ``n_starts`` random rotations of the
    dominant left singular subspace of the mode-2 unfolding of ``J`` (plain
    Gaussian columns when ``r`` exceeds the input dimension).

    Returns
    -------
    V : ndarray, shape (n, r)
        Unit-norm columns of the best start.
    G : ndarray, shape (N, r)
        Antiderivatives of the fitted branch derivatives at the operating
        points (first output; column means removed).
    rel : float
        Relative squared residual of the parametric fit.
    """
    m, n, N = J.shape
    y = J.transpose(0, 2, 1).ravel()          # (output, point, input) order
    scale = max(float(np.std(X_o)), 1e-300)
    eye = np.eye(m)
    powers = np.arange(degree + 1)

    def design(p):
        V = p.reshape(n, r)
        V = V / np.linalg.norm(V, axis=0)
        Z = X_o @ V / scale
        blk = (Z[:, None, :, None] ** powers * V[None, :, :, None]).reshape(N * n, -1)
        return (np.kron(eye, blk) if m > 1 else blk), V, Z

    def residual(p):
        P = design(p)[0]
        return y - P @ np.linalg.lstsq(P, y, rcond=None)[0]

    U = np.linalg.svd(matricize(J, 2), full_matrices=False)[0]
    best = None
    for _ in range(n_starts):
        if r <= n:
            V0 = U[:, :r] @ np.linalg.qr(rng.standard_normal((r, r)))[0]
        else:
            V0 = rng.standard_normal((n, r))
        res = levenberg_marquardt(residual, V0.ravel(), opts)
        if best is None or res.sse < best.sse:
            best = res
    P, V, Z = design(best.x)
    coef = np.linalg.lstsq(P, y, rcond=None)[0].reshape(m, r, degree + 1)[0]
    G = scale * np.einsum("lik,ik->li", Z[:, :, None] ** (powers + 1) / (powers + 1), coef)
    return V, G - G.mean(axis=0), best.sse / max(float(y @ y), 1e-300)


_WARM_CACHE = OrderedDict()


def _cached_warm_start(J, X_o, cfg):
    """:func:`warm_start` memoised on its inputs (a scan reuses it for every lambda)."""
    h = hashlib.sha1(np.ascontiguousarray(J).tobytes())
    h.update(np.ascontiguousarray(X_o).tobytes())
    key = (h.hexdigest(), J.shape, X_o.shape, cfg.r, cfg.seed, cfg.n_starts, cfg.warm_degree)
    if key not in _WARM_CACHE:
        rng = np.random.default_rng(cfg.seed)
        V, G, _ = warm_start(J, X_o, cfg.r, rng, cfg.n_starts, cfg.warm_degree)
        _WARM_CACHE[key] = (V, G)
        while len(_WARM_CACHE) > 16:
            _WARM_CACHE.popitem(last=False)
    _WARM_CACHE.move_to_end(key)
    V, G = _WARM_CACHE[key]
    return V.copy(), G.copy()


def _normalise_W(W, G):
    """Give every column of ``W`` unit norm, moving the scale into ``G``."""
    s = np.linalg.norm(W, axis=0)
    s[s == 0] = 1.0
    return W / s, G * s


def fcpd_decompose(J, X_o, cfg):
    """Alternating least squares for the filtered CPD.

    Initialisation (seeded by ``cfg.seed``): with ``cfg.init == "warm"``,
    ``V`` and ``G`` come from :func:`warm_start`; with ``"identity"``, ``V``
    has orthonormalised Gaussian columns and ``G = X_o @ V``.  ``W`` then
    follows from its closed-form update.
    Each sweep updates ``W``, ``V`` and ``G`` in turn and stops once the joint
    objective changes by less than ``cfg.tol`` relative, drops below
    ``EXACT_FIT`` times ``||J||^2``, or after ``cfg.max_sweeps`` sweeps.
    """
    J = np.asarray(J, dtype=float)
    X_o = np.atleast_2d(np.asarray(X_o, dtype=float))
    m, n, N = J.shape
    if X_o.shape != (N, n):
        raise DimensionMismatch(f"expected {N} points of dimension {n}, got {X_o.shape}")
    if N < 2 * cfg.r + 1:
        raise ValueError(f"N = {N} points are too few for r = {cfg.r}")
    rng = np.random.default_rng(cfg.seed)
    J1, J3 = matricize(J, 1), matricize(J, 3)
    if cfg.init == "warm":
        V, G = _cached_warm_start(J, X_o, cfg)
    else:
        V = _initial_V(n, cfg.r, rng)
        G = X_o @ V
    filters = build_fd_filters(V, X_o, cfg.stencil)
    W, G = _normalise_W(update_W(J1, V, G, filters), G)
    trace = [joint_objective(J, W, V, G, filters, cfg.lam)]
    log = []
    hint = {}
    floor = EXACT_FIT * float(np.sum(J ** 2))
    rejected = 0
    sweeps = 0
    for sweeps in range(1, cfg.max_sweeps + 1):
        entry = {}
        w_before = tensor_objective(J, W, V, G, filters)
        W = update_W(J1, V, G, filters)
        entry["W"] = (w_before, tensor_objective(J, W, V, G, filters))
        W, G = _normalise_W(W, G)
        v_before = joint_objective(J, W, V, G, filters, cfg.lam)
        V, G, ok = update_V(J, W, V, G, X_o, cfg.lam, cfg.inner, filters, hint=hint)
        rejected += not ok
        if ok:
            filters = build_fd_filters(V, X_o, cfg.stencil)
        entry["V"] = (v_before, joint_objective(J, W, V, G, filters, cfg.lam), ok)
        G_new = update_G(J3, W, V, filters, cfg.lam, hint)
        g_after = joint_objective(J, W, V, G_new, filters, cfg.lam)
        if g_after <= entry["V"][1]:
            G = G_new
        else:       # numerically failed solve: keep the previous samples
            g_after = entry["V"][1]
        entry["G"] = (entry["V"][1], g_after)
        log.append(entry)
        trace.append(g_after)
        if abs(trace[-2] - trace[-1]) <= cfg.tol * max(trace[-2], 1e-300):
            break
        if trace[-1] <= floor:      # fit exact to rounding; further sweeps only add noise
            break
    factors = FcpdFactors(W, V, G)
    return FcpdResult(factors, trace, np.sqrt(tensor_objective(J, W, V, G, filters)),
                      sweeps, log, rejected)


def parameterize(factors, X_o, d, f, structure=None):
    """Turn non-parametric branch samples into a :class:`DecoupledNarxModel`.

    Each column of ``G`` is fitted by a degree-``d`` polynomial in its
    projection ``z_i``; ``W`` (one output) is absorbed into the coefficients.
    Finally the constant left undetermined by the filters is fitted to
    ``f(X_o)`` and shared equally among the branch constants.
    """
    if structure is None:
        structure = getattr(f, "structure", None)
    poly = f.f if isinstance(f, PNarxModel) else f
    X_o = np.atleast_2d(np.asarray(X_o, dtype=float))
    if structure is None:
        structure = NarxStructure(0, X_o.shape[1] - 1, d)
    W, V, G = factors.W, factors.V, factors.G
    if W.shape[0] != 1:
        raise DimensionMismatch("only single-output decompositions can be parameterised")
    Z = X_o @ V
    C = np.zeros((V.shape[1], d + 1))
    for i in range(V.shape[1]):
        if np.ptp(G[:, i]) == 0:
            C[i, 0] = G[0, i]
        else:
            C[i] = fit_univariate(Z[:, i], G[:, i], d).coeffs
        C[i] *= W[0, i]
    model = DecoupledNarxModel.from_raw(structure, V, C)
    offset = float(np.mean(poly(X_o) - model(X_o)))
    C = model.coeffs.copy()
    C[:, 0] += offset / model.r
    return DecoupledNarxModel(structure, model.V, C)
