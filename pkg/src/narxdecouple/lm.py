"""Small Levenberg-Marquardt solver shared by the V update, the structured
Hessian fit and output-error fine-tuning."""

from dataclasses import dataclass, field

import numpy as np

from .errors import NarxDecoupleError


@dataclass(frozen=True)
class LmOptions:
    max_iters: int = 100
    mu0: float = 1e-3
    mu_up: float = 10.0
    mu_down: float = 0.3
    gtol: float = 1e-10
    xtol: float = 1e-12
    fd_step: float = 1e-6

    def __post_init__(self):
        for name in ("max_iters", "mu0", "mu_up", "mu_down", "gtol", "xtol", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"LmOptions.{name} must be positive")


@dataclass
class LmResult:
    x: np.ndarray
    sse: float
    status: str
    n_accepted: int
    trace: list = field(default_factory=list)


def fd_jacobian(fun, x, r0, step=1e-6):
    """Forward-difference Jacobian with per-parameter step ``step * (1 + |x_j|)``."""
    jac = np.empty((r0.size, x.size))
    for j in range(x.size):
        h = step * (1.0 + abs(x[j]))
        xp = x.copy()
        xp[j] += h
        jac[:, j] = (fun(xp) - r0) / h
    return jac


def _safe_residual(fun, x):
    try:
        r = fun(x)
    except (NarxDecoupleError, FloatingPointError, OverflowError):
        return None
    if not np.all(np.isfinite(r)):
        return None
    return r


def levenberg_marquardt(fun, x0, opts=LmOptions(), jac=None):
    """Minimise ``sum(fun(x)**2)``.

    Damping is Marquardt-scaled (``mu * diag(J^T J)``).  A step is accepted only
    if it strictly lowers the sum of squares; a residual evaluation that raises
    a package error or returns non-finite values counts as a rejected step.

    Returns an :class:`LmResult` whose ``status`` is ``"gtol"``, ``"xtol"``,
    ``"max_iters"`` or ``"no_progress"`` (no accepted step before the budget ran
    out).
    """
    x = np.array(x0, dtype=float)
    r = fun(x)
    sse = float(r @ r)
    mu = opts.mu0
    trace = [{"iter": 0, "sse": sse, "mu": mu, "accepted": True}]
    n_acc = 0
    status = "max_iters"
    need_jac = True
    for it in range(1, opts.max_iters + 1):
        if need_jac:
            J = jac(x) if jac is not None else fd_jacobian(fun, x, r, opts.fd_step)
            g = J.T @ r
            A = J.T @ J
            d = np.diag(A).copy()
            d = np.maximum(d, 1e-12 * max(d.max(initial=0.0), 1e-300))
            need_jac = False
        if np.max(np.abs(g), initial=0.0) <= opts.gtol * max(sse, 1e-300) ** 0.5 or sse == 0.0:
            status = "gtol"
            break
        try:
            step = np.linalg.solve(A + mu * np.diag(d), -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(A + mu * np.diag(d), -g, rcond=None)[0]
        x_new = x + step
        r_new = _safe_residual(fun, x_new)
        sse_new = float(r_new @ r_new) if r_new is not None else np.inf
        accepted = sse_new < sse
        if accepted:
            small = np.linalg.norm(step) <= opts.xtol * (np.linalg.norm(x) + opts.xtol)
            x, r, sse = x_new, r_new, sse_new
            mu = max(mu * opts.mu_down, 1e-15)
            n_acc += 1
            need_jac = True
        else:
            mu *= opts.mu_up
            small = mu > 1e16
        trace.append({"iter": it, "sse": sse, "mu": mu, "accepted": bool(accepted)})
        if small:
            status = "xtol"
            break
    if status == "max_iters" and n_acc == 0:
        status = "no_progress"
    return LmResult(x, sse, status, n_acc, trace)
