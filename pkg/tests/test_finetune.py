import numpy as np
import pytest

from narxdecouple.errors import Diverged, NoProgress
from narxdecouple.finetune import finetune_sim, simulation_residual
from narxdecouple.lm import LmOptions, fd_jacobian
from narxdecouple.narx import DecoupledNarxModel, NarxStructure, simulate
from narxdecouple.signals import SignalRecord

S = NarxStructure()


def _system():
    V = np.array([[1, 0.5, 0.3, 0, 0], [0.2, 0, 0.4, -0.3, 0.1]]).T
    C = np.array([[0, 1, 0.2, -0.1], [0, 0.8, -0.1, 0.05]])
    return DecoupledNarxModel.from_raw(S, V, C)


@pytest.fixture(scope="module")
def data():
    true = _system()
    u = 0.5 * np.random.default_rng(0).standard_normal(1000)
    return true, u, simulate(true, u, np.zeros(3))


def _perturb(model, rel, seed):
    rng = np.random.default_rng(seed)
    return DecoupledNarxModel.from_raw(
        S, model.V * (1 + rel * rng.standard_normal(model.V.shape)),
        model.coeffs * (1 + rel * rng.standard_normal(model.coeffs.shape)))


def _sse(model, u, y):
    r = simulation_residual(model, [u], [y])
    return float(r @ r)


@pytest.mark.parametrize("seed", range(3))
def test_small_perturbations_are_undone(data, seed):
    true, u, y = data
    start = _perturb(true, 0.01, seed)
    res = finetune_sim(start, (u, y))
    assert res.sse <= _sse(start, u, y) / 100
    np.testing.assert_allclose(np.linalg.norm(res.model.V, axis=0), 1.0)


def test_trace_is_monotone_and_consistent(data):
    true, u, y = data
    start = _perturb(true, 0.05, 7)
    res = finetune_sim(start, (u, y), LmOptions(max_iters=15))
    sse = [t["sse"] for t in res.trace]
    assert sse[0] == pytest.approx(_sse(start, u, y))
    assert all(b <= a for a, b in zip(sse, sse[1:]))
    assert res.sse == pytest.approx(_sse(res.model, u, y), rel=1e-9)
    assert res.n_accepted == sum(t["accepted"] for t in res.trace[1:])


def test_record_inputs_are_interchangeable(data):
    true, u, y = data
    start = _perturb(true, 0.01, 1)
    rec = SignalRecord(u=u, y=y, fs=1.0)
    opts = LmOptions(max_iters=3)
    a = finetune_sim(start, (u, y), opts)
    b = finetune_sim(start, [rec], opts)
    c = finetune_sim(start, rec, opts)
    assert a.sse == b.sse == c.sse


def test_branch_order_does_not_matter(data):
    true, u, y = data
    start = _perturb(true, 0.02, 3)
    swapped = DecoupledNarxModel(S, start.V[:, ::-1], start.coeffs[::-1])
    a = finetune_sim(start, (u, y), LmOptions(max_iters=8))
    b = finetune_sim(swapped, (u, y), LmOptions(max_iters=8))
    assert a.sse == pytest.approx(b.sse, rel=1e-6, abs=1e-20)


def test_finite_difference_jacobian_matches_central_differences(data):
    true, u, y = data
    start = _perturb(true, 0.02, 4)
    p = np.concatenate([start.V.ravel(), start.coeffs.ravel()])

    def fun(q):
        return simulation_residual(DecoupledNarxModel.from_raw(
            S, q[:10].reshape(5, 2), q[10:].reshape(2, 4)), [u], [y])

    J = fd_jacobian(fun, p, fun(p))
    for j in (0, 7, 12):
        h = 1e-5
        e = np.zeros_like(p)
        e[j] = h
        central = (fun(p + e) - fun(p - e)) / (2 * h)
        assert np.linalg.norm(J[:, j] - central) <= 1e-4 * np.linalg.norm(central)


def test_diverging_start_is_rejected(data):
    _, u, y = data
    bad = DecoupledNarxModel(S, np.eye(5)[:, [2]], [[0, 3.0, 0, 0]])
    with pytest.raises(Diverged):
        finetune_sim(bad, (u, y))


def test_no_accepted_step_raises(data, monkeypatch):
    import narxdecouple.finetune as ft
    from narxdecouple.lm import LmResult
    true, u, y = data
    start = _perturb(true, 0.01, 5)

    def stuck(fun, x0, opts):
        return LmResult(x0, 1.0, "no_progress", 0)

    monkeypatch.setattr(ft, "levenberg_marquardt", stuck)
    with pytest.raises(NoProgress):
        finetune_sim(start, (u, y))


def test_records_need_outputs(data):
    true, u, _ = data
    with pytest.raises(ValueError):
        finetune_sim(true, SignalRecord(u=u, y=None, fs=1.0))
