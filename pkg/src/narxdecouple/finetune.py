"""Output-error refinement of decoupled NARX models.

The free-run simulation error over one or more training records is minimised
by Levenberg-Marquardt over every entry of ``V`` and every branch coefficient.
Jacobians are forward differences of the simulated output.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import Diverged, NoProgress
from .lm import LmOptions, levenberg_marquardt
from .narx import DecoupledNarxModel, _as_records, simulate

DEFAULT_OPTIONS = LmOptions(max_iters=30)


@dataclass
class FinetuneResult:
    model: DecoupledNarxModel
    trace: list = field(default_factory=list)
    status: str = ""
    n_accepted: int = 0

    @property
    def sse(self):
        return self.trace[-1]["sse"]


def _records(training):
    if isinstance(training, tuple):
        return _as_records(*training)
    if not isinstance(training, (list, tuple)):
        training = [training]
    for rec in training:
        if rec.y is None:
            raise ValueError("fine-tuning needs records with measured outputs")
    return _as_records([r.u for r in training], [r.y for r in training])


def _unpack(structure, shape_v, shape_c, p):
    nv = shape_v[0] * shape_v[1]
    V = p[:nv].reshape(shape_v)
    C = p[nv:].reshape(shape_c)
    return DecoupledNarxModel.from_raw(structure, V, C)


def simulation_residual(model, us, ys):
    """Stacked ``y - y_s`` over all records, lag windows excluded."""
    t0 = model.structure.max_lag
    return np.concatenate([(y - simulate(model, u, y))[t0:] for u, y in zip(us, ys)])


def finetune_sim(model, training, opts=DEFAULT_OPTIONS):
    """Refine ``model`` on the simulated-output error of ``training``.

    Parameters
    ----------
    model : DecoupledNarxModel
        Starting point.  It must simulate every record without diverging.
    training : SignalRecord, list of SignalRecord or ``(u, y)`` tuple
        Records with measured outputs.
    opts : LmOptions
        Iteration budget, damping and tolerances.  ``opts.fd_step`` is the
        relative finite-difference step.

    Returns
    -------
    FinetuneResult
        The refined model (unit-norm ``V`` columns, scale moved into the
        coefficients) and the per-iteration trace ``{iter, sse, mu, accepted}``.

    Raises
    ------
    Diverged
        If the starting model diverges on a training record.
    NoProgress
        If the budget ran out without a single accepted step.
    """
    us, ys = _records(training)
    s = model.structure
    shape_v, shape_c = model.V.shape, model.coeffs.shape
    p0 = np.concatenate([model.V.ravel(), model.coeffs.ravel()])

    def fun(p):
        return simulation_residual(_unpack(s, shape_v, shape_c, p), us, ys)

    try:
        fun(p0)
    except Diverged as exc:
        raise Diverged(f"starting model diverges: {exc}", exc.index) from None
    res = levenberg_marquardt(fun, p0, opts)
    if res.status == "no_progress":
        raise NoProgress(f"no accepted step in {opts.max_iters} iterations "
                         f"(SSE {res.sse:.6g})")
    return FinetuneResult(_unpack(s, shape_v, shape_c, res.x), res.trace, res.status,
                          res.n_accepted)
