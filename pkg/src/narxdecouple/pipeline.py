"""One decoupling run: operating points, decomposition, refinement, metrics.

Shared by the command-line front-end, the demos and the acceptance tests so
every path computes the numbers the same way.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import Diverged, NarxDecoupleError, NoProgress
from .fcpd import (FcpdConfig, build_jacobian_tensor, fcpd_decompose, parameterize,
                   sample_operating_points)
from .finetune import DEFAULT_OPTIONS, finetune_sim
from .hessian import hessian_pipeline
from .narx import e_f, simulation_error

METHODS = ("fcpd", "hessian")
DEFAULT_R = (1, 2, 3, 4, 5, 6)
DEFAULT_LAMBDAS = tuple(10.0 ** k for k in range(-1, 6))


@dataclass
class CellResult:
    r: int
    lam: float
    seed: int
    e_f: float = math.nan
    e_rms_val_pre: float = math.nan
    e_rms_val_post: float = math.nan
    status: str = "ok"
    model_pre: object = None
    model: object = None
    diagnostics: dict = field(default_factory=dict)

    def row(self):
        return {"r": self.r, "lambda": self.lam, "e_f": self.e_f,
                "e_rms_val_pre": self.e_rms_val_pre, "e_rms_val_post": self.e_rms_val_post,
                "seed": self.seed, "status": self.status}


def _val_error(model, validation):
    if validation is None:
        return math.nan
    try:
        return simulation_error(model, validation)
    except Diverged:
        return math.inf


def decouple_cell(reference, training, validation, r, lam=1.0, method="fcpd", n_points=200,
                  seed=0, finetune=True, ft_opts=DEFAULT_OPTIONS):
    """Decouple ``reference`` with ``r`` branches and report the standard metrics.

    ``e_f`` is measured on the operating points of the decomposition (before
    refinement).  Validation errors of a diverging model are ``inf``.
    Numerical failures never raise: they end up in ``status``
    (``"diverged"``, ``"no_progress"`` or ``"failed: <error>"``) with the
    metrics computed so far.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    cell = CellResult(int(r), float(lam), int(seed))
    ops = sample_operating_points(reference, training, n_points, seed)
    X = ops.X
    diag = {"method": method, "n_points": int(n_points),
            "diagonal_fallback": bool(ops.diagonal_fallback)}
    try:
        if method == "fcpd":
            cfg = FcpdConfig(r=int(r), lam=float(lam), seed=int(seed))
            res = fcpd_decompose(build_jacobian_tensor(reference.f, X), X, cfg)
            pre = parameterize(res.factors, X, reference.structure.degree, reference)
            diag.update(res.diagnostics(cfg, v_rejections=res.v_rejections))
        else:
            hr = hessian_pipeline(reference, X, int(r), reference.structure.degree, seed=int(seed))
            pre = hr.raw_model
            diag.update(hr.diagnostics(seed=int(seed)))
    except NarxDecoupleError as exc:
        cell.status = f"failed: {type(exc).__name__}"
        cell.diagnostics = diag
        return cell
    cell.model_pre = cell.model = pre
    cell.e_f = e_f(reference.f, pre, X)
    cell.e_rms_val_pre = _val_error(pre, validation)
    if finetune:
        try:
            ft = finetune_sim(pre, training, ft_opts)
            cell.model = ft.model
            diag["finetune_trace"] = ft.trace
            diag["finetune_status"] = ft.status
        except Diverged:
            cell.status = "diverged"
        except NoProgress:
            cell.status = "no_progress"
    cell.e_rms_val_post = _val_error(cell.model, validation)
    cell.diagnostics = diag
    return cell


def best_per_r(rows):
    """Row with the lowest finite ``e_f`` for every ``r`` (ties: smallest lambda)."""
    best = {}
    for row in rows:
        if not np.isfinite(row["e_f"]):
            continue
        cur = best.get(row["r"])
        if cur is None or row["e_f"] < cur["e_f"]:
            best[row["r"]] = row
    return [best[k] for k in sorted(best)]
