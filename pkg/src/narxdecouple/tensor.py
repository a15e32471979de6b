"""Dense third-order tensor kernel.

Tensors are stored as ``numpy`` arrays of shape ``(m, n, N)``: axis 0 is the
output index, axis 1 the input index and axis 2 the operating point.  The
unfoldings follow the convention in which the remaining indices are flattened
with the earlier one varying fastest, so that for a diagonal (CPD) tensor
built from factors ``W, V, H``::

    matricize(T, 1) == W @ khatri_rao(H, V).T
    matricize(T, 2) == V @ khatri_rao(H, W).T
    matricize(T, 3) == H @ khatri_rao(V, W).T
"""

import numpy as np

from .errors import ColumnMismatch

# order of the remaining axes after moving the unfolded one to the front
_UNFOLD_AXES = {1: (0, 2, 1), 2: (1, 2, 0), 3: (2, 1, 0)}


def _as_tensor3(t):
    t = np.asarray(t, dtype=float)
    if t.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got shape {t.shape}")
    return t


def khatri_rao(a, b):
    """Column-wise Kronecker product of ``a`` (p x r) and ``b`` (q x r).

    Column ``i`` of the result is ``np.kron(a[:, i], b[:, i])``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ColumnMismatch(f"column counts differ: {a.shape[1]} != {b.shape[1]}")
    return np.einsum("ir,jr->ijr", a, b).reshape(-1, a.shape[1])


def matricize(t, mode):
    """Mode-``mode`` unfolding of a third-order tensor (``mode`` in 1, 2, 3)."""
    if mode not in _UNFOLD_AXES:
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    t = _as_tensor3(t)
    axes = _UNFOLD_AXES[mode]
    return t.transpose(axes).reshape(t.shape[axes[0]], -1)


def fold(mat, mode, shape):
    """Inverse of :func:`matricize` for a tensor of the given ``shape``."""
    if mode not in _UNFOLD_AXES:
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    axes = _UNFOLD_AXES[mode]
    permuted = tuple(shape[a] for a in axes)
    return np.asarray(mat, dtype=float).reshape(permuted).transpose(np.argsort(axes))


def cpd_reconstruct(w, v, h):
    """Tensor with entries ``sum_i w[s, i] * v[k, i] * h[l, i]``."""
    w, v, h = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (w, v, h))
    if not w.shape[1] == v.shape[1] == h.shape[1]:
        raise ColumnMismatch(
            f"factor column counts differ: {w.shape[1]}, {v.shape[1]}, {h.shape[1]}")
    return np.einsum("si,ki,li->skl", w, v, h)


def frob_norm(t):
    return float(np.sqrt(np.sum(np.square(np.asarray(t, dtype=float)))))
