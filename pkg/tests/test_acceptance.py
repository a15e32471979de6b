"""End-to-end acceptance checks.

Each test carries a ``criterion`` mark; the terminal summary prints one
PASS/FAIL line per criterion.  The protocol fixture runs the complete
command-line pipeline (data, reference fit, 42-cell scan) once per session.
"""

import csv
import json
import os
import time

import numpy as np
import pytest

from conftest import random_decoupled
from narxdecouple.cli import main
from narxdecouple.fcpd import (STENCILS, FcpdConfig, build_fd_filters, build_jacobian_tensor,
                               fcpd_decompose, joint_objective, parameterize, stencil_size,
                               tensor_objective, update_G, update_V, update_W)
from narxdecouple.finetune import finetune_sim, simulation_residual
from narxdecouple.hessian import hessian_pipeline
from narxdecouple.lm import LmOptions
from narxdecouple.narx import DecoupledNarxModel, NarxStructure, e_f, load_model, simulate
from narxdecouple.pipeline import DEFAULT_LAMBDAS
from narxdecouple.poly import MultiPoly, basis_enumerate, poly_eval, poly_gradient, poly_hessian
from narxdecouple.signals import (DuffingParams, add_noise, duffing_simulate, multisine, odd_bins,
                                  realized_snr_db)
from narxdecouple.tensor import matricize

SCAN_BUDGET_S = 600.0


def _cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"command failed: {argv}"


def _files(path):
    out = {}
    for root, _, names in os.walk(path):
        for n in names:
            p = os.path.join(root, n)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, path)] = fh.read()
    return out


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def protocol(tmp_path_factory):
    base = tmp_path_factory.mktemp("protocol")
    _cli("generate-data", "--out", base / "data")
    _cli("fit-pnarx", "--data", base / "data", "--out", base / "ref")
    t0 = time.perf_counter()
    _cli("scan", "--model", base / "ref/pnarx.json", "--data", base / "data", "--out", base / "scan")
    elapsed = time.perf_counter() - t0
    report = json.loads((base / "ref/pnarx_report.json").read_text())
    return {"base": base, "scan_seconds": elapsed, "reference": report,
            "rows": _rows(base / "scan/scan.csv"), "best": _rows(base / "scan/scan_best.csv")}


def _oracle_cases():
    return [(r, seed) for r in (1, 2, 3) for seed in range(4)]


def _oracle(r, seed):
    true = random_decoupled(r, 100 * r + seed)
    X = np.random.default_rng(seed).standard_normal((200, 5))
    return true.to_multipoly(), X


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1, "exact-decoupling oracle, F-CPD e_f < 0.1% within 60 s per case")
def test_exact_decoupling_oracle(detail):
    worst, slowest = 0.0, 0.0
    for r, seed in _oracle_cases():
        f, X = _oracle(r, seed)
        t0 = time.perf_counter()
        J = build_jacobian_tensor(f, X)
        best = min(e_f(f, parameterize(fcpd_decompose(J, X, FcpdConfig(r=r, lam=lam)).factors,
                                       X, 3, f, NarxStructure()), X)
                   for lam in DEFAULT_LAMBDAS)
        slowest = max(slowest, time.perf_counter() - t0)
        worst = max(worst, best)
    detail(f"{len(_oracle_cases())} cases, worst best-lambda e_f {worst:.2e}%, "
           f"slowest case {slowest:.1f} s")
    assert worst < 0.1
    assert slowest < 60.0


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2, "synthetic protocol: r=4 within 2x of the reference, scan <= 10 min")
def test_synthetic_protocol(protocol, detail):
    ref_val = protocol["reference"]["e_rms_val"]
    r4 = next(b for b in protocol["best"] if b["r"] == "4")
    post = float(r4["e_rms_val_post"])
    detail(f"reference {ref_val:.3f}%, F-CPD r=4 {post:.3f}% (lambda {r4['lambda']}), "
           f"scan {protocol['scan_seconds']:.0f} s for {len(protocol['rows'])} cells")
    assert len(protocol["rows"]) == 42
    assert all(row["status"] == "ok" for row in protocol["rows"])
    assert post <= 2 * ref_val
    assert protocol["scan_seconds"] <= SCAN_BUDGET_S


def test_best_function_error_is_nested_in_r(protocol):
    best = [float(b["e_f"]) for b in sorted(protocol["best"], key=lambda b: int(b["r"]))]
    assert all(b <= 1.1 * a for a, b in zip(best, best[1:])), best


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3, "parameter counts: 55 reference monomials, 36 for r=4 and d=3")
def test_parameter_counts(protocol, detail):
    ref = load_model(str(protocol["base"] / "ref/pnarx.json"))
    model = DecoupledNarxModel(NarxStructure(), np.eye(5)[:, :4], np.zeros((4, 4)))
    detail(f"reference {ref.n_params}, decoupled {model.n_params}")
    assert len(basis_enumerate(5, 3)) == 55 and ref.n_params == 55
    assert model.n_params == 36


# ---------------------------------------------------------------- 4

def _als_instance(rng):
    r = int(rng.integers(1, 5))
    N = int(rng.integers(30, 80))
    lam = 10.0 ** rng.uniform(-1, 5)
    true = random_decoupled(r, int(rng.integers(1 << 30)))
    X = rng.standard_normal((N, 5))
    J = build_jacobian_tensor(true.to_multipoly(), X)
    J = J + 0.05 * np.abs(J).mean() * rng.standard_normal(J.shape)
    V = rng.standard_normal((5, r))
    V /= np.linalg.norm(V, axis=0)
    G = X @ V + 0.3 * rng.standard_normal((N, r))
    return J, X, V, G, lam


@pytest.mark.criterion(4, "ALS descent over 100 instances, zero violations")
def test_als_descent(detail):
    rng = np.random.default_rng(2024)
    violations = {"W": 0, "G": 0, "V": 0}

    def worse(after, before):
        return after > before * (1 + 1e-10) + 1e-300

    for _ in range(100):
        J, X, V, G, lam = _als_instance(rng)
        F = build_fd_filters(V, X)
        W = np.ones((1, V.shape[1]))
        before = tensor_objective(J, W, V, G, F)
        W = update_W(matricize(J, 1), V, G, F)
        violations["W"] += worse(tensor_objective(J, W, V, G, F), before)
        before = joint_objective(J, W, V, G, F, lam)
        G = update_G(matricize(J, 3), W, V, F, lam)
        violations["G"] += worse(joint_objective(J, W, V, G, F, lam), before)
        before = joint_objective(J, W, V, G, F, lam)
        V1, G1, ok = update_V(J, W, V, G, X, lam, filters=F)
        violations["V"] += worse(joint_objective(J, W, V1, G1, build_fd_filters(V1, X), lam),
                                 before)
    detail(", ".join(f"{k}: {v}" for k, v in violations.items()))
    assert sum(violations.values()) == 0


# ---------------------------------------------------------------- 5

def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.mark.criterion(5, "analytic gradient/Hessian vs central differences")
def test_derivative_oracles(detail):
    rng = np.random.default_rng(5)
    basis = basis_enumerate(5, 3, include_constant=True)
    h = 1e-5
    eye = np.eye(5)
    g_worst = h_worst = 0.0
    for _ in range(100):
        p = MultiPoly(basis, rng.standard_normal(len(basis)))
        x = rng.standard_normal(5)
        fd_g = np.array([(poly_eval(p, x + h * e) - poly_eval(p, x - h * e)) / (2 * h) for e in eye])
        fd_h = np.column_stack([(poly_gradient(p, x + h * e) - poly_gradient(p, x - h * e)) / (2 * h)
                                for e in eye])
        g_worst = max(g_worst, _rel(poly_gradient(p, x), fd_g))
        h_worst = max(h_worst, _rel(poly_hessian(p, x), fd_h))
    detail(f"gradient {g_worst:.1e}, Hessian {h_worst:.1e}")
    assert g_worst < 1e-6 and h_worst < 1e-5


# ---------------------------------------------------------------- 6

def _filter_1d(z, stencil):
    return build_fd_filters(np.ones((1, 1)), np.asarray(z, float)[:, None], stencil)


def _central_error(N, stencil):
    z = np.linspace(0, 2, N)
    h = _filter_1d(z, stencil).apply("central", np.sin(z)[:, None])[:, 0]
    inner = (z > 0.5) & (z < 1.5)
    return np.max(np.abs(h - np.cos(z))[inner])


@pytest.mark.criterion(6, "filters: affine and quadratic exactness, second-order convergence")
def test_filter_correctness(detail):
    rng = np.random.default_rng(6)
    affine = 0.0
    for stencil in STENCILS:
        for _ in range(20):
            z = rng.uniform(-2, 2, 40)
            a, b = rng.standard_normal(2)
            F = _filter_1d(z, stencil)
            for kind in ("left", "right", "central"):
                affine = max(affine, np.abs(F.apply(kind, (a * z + b)[:, None])[:, 0] - a).max())
    quad = 0.0
    z = np.linspace(-1, 2, 31)
    for stencil in STENCILS:
        w = stencil_size(stencil) // 2
        h = _filter_1d(z, stencil).apply("central", (z ** 2 - 3 * z)[:, None])[:, 0]
        quad = max(quad, np.abs(h - (2 * z - 3))[w:-w].max())
    ratio = _central_error(81, "secant") / _central_error(161, "secant")
    detail(f"affine {affine:.1e}, quadratic {quad:.1e}, secant refinement ratio {ratio:.2f}")
    assert affine < 1e-9 and quad < 1e-9
    assert 3.5 <= ratio <= 4.5


# ---------------------------------------------------------------- 7

@pytest.mark.criterion(7, "signal lab: clean multisine spectrum, exact SNR, RK4 vs cos(t)")
def test_signal_lab(detail):
    P = 8192
    bins = odd_bins(2684)
    u = multisine(2.0, P, bins, seed=7).u
    mag = np.abs(np.fft.rfft(u))
    off = np.ones(mag.size, dtype=bool)
    off[bins] = False
    leak = mag[off].max() / mag[bins].max()
    rng = np.random.default_rng(7)
    snr_err = 0.0
    for snr in (10.0, 40.0, 73.5):
        y = rng.standard_normal(4096)
        snr_err = max(snr_err, abs(realized_snr_db(y, add_noise(y, snr, seed=1)) - snr))
    fs = 1000.0
    t = np.arange(10001) / fs
    y = duffing_simulate(DuffingParams(m=1.0, c=0.0, alpha=1.0, beta=0.0), np.zeros(t.size), fs,
                         y0=1.0, v0=0.0)
    rk4 = np.max(np.abs(y - np.cos(t)))
    detail(f"leakage {leak:.1e}, SNR error {snr_err:.1e} dB, RK4 error {rk4:.1e}")
    assert leak < 1e-10 and snr_err < 1e-9 and rk4 < 1e-6


# ---------------------------------------------------------------- 8

def _stable_system(rng):
    V = np.array([[1, 0.5, 0.3, 0, 0], [0.2, 0, 0.4, -0.3, 0.1]]).T
    V = V + 0.05 * rng.standard_normal(V.shape)
    C = np.array([[0, 1, 0.2, -0.1], [0, 0.8, -0.1, 0.05]]) * (1 + 0.1 * rng.standard_normal((2, 4)))
    return DecoupledNarxModel.from_raw(NarxStructure(), V, C)


def _perturbed(model, rel, rng):
    return DecoupledNarxModel.from_raw(
        model.structure, model.V * (1 + rel * rng.standard_normal(model.V.shape)),
        model.coeffs * (1 + rel * rng.standard_normal(model.coeffs.shape)))


@pytest.mark.criterion(8, "fine-tune: monotone SSE traces, 1% perturbation recovered >= 100x")
def test_finetune_monotonicity(detail):
    rng = np.random.default_rng(8)
    bad_traces, worst_gain, trials = 0, np.inf, 0
    while trials < 100:
        true = _stable_system(rng)
        u = 0.5 * rng.standard_normal(400)
        try:
            y = simulate(true, u, np.zeros(3))
        except ArithmeticError:
            continue
        trials += 1
        start = _perturbed(true, 0.01 if trials % 2 else 0.05, rng)
        try:
            res = finetune_sim(start, (u, y), LmOptions(max_iters=10))
        except ArithmeticError:
            bad_traces += 1
            continue
        sse = [t["sse"] for t in res.trace if t["accepted"]]
        bad_traces += any(b > a for a, b in zip(sse, sse[1:]))
        if trials % 2:
            r0 = simulation_residual(start, [u], [y])
            worst_gain = min(worst_gain, float(r0 @ r0) / max(res.sse, 1e-300))
    detail(f"{trials} trials, {bad_traces} non-monotone, worst 1% recovery {worst_gain:.1e}x")
    assert bad_traces == 0
    assert worst_gain >= 100


# ---------------------------------------------------------------- 9

@pytest.mark.criterion(9, "Hessian parity: oracle e_f < 0.5%, protocol within 2.5x of F-CPD r=4")
def test_hessian_parity(protocol, detail, tmp_path):
    worst = 0.0
    for r, seed in _oracle_cases():
        f, X = _oracle(r, seed)
        res = hessian_pipeline(f, X, r, 3, structure=NarxStructure())
        worst = max(worst, e_f(f, res.model, X))
    base = protocol["base"]
    _cli("decouple", "--model", base / "ref/pnarx.json", "--data", base / "data",
         "--method", "hessian", "--r", "4", "--out", tmp_path / "hess")
    hess = json.loads((tmp_path / "hess/diagnostics.json").read_text())["e_rms_val_post"]
    fcpd = float(next(b for b in protocol["best"] if b["r"] == "4")["e_rms_val_post"])
    detail(f"oracle worst e_f {worst:.1e}%, protocol Hessian {hess:.3f}% vs F-CPD {fcpd:.3f}%")
    assert worst < 0.5
    assert hess <= 2.5 * fcpd


# ---------------------------------------------------------------- 10

@pytest.mark.criterion(10, "determinism: re-runs give byte-identical artifacts")
def test_determinism(protocol, detail, tmp_path):
    base = protocol["base"]
    model, data = base / "ref/pnarx.json", base / "data"
    commands = {
        "generate-data": lambda out: ("generate-data", "--seed", "0", "--out", out),
        "fit-pnarx": lambda out: ("fit-pnarx", "--data", data, "--out", out),
        "decouple fcpd": lambda out: ("decouple", "--model", model, "--data", data, "--r", "2",
                                      "--lambda", "10", "--out", out),
        "decouple hessian": lambda out: ("decouple", "--model", model, "--data", data,
                                         "--method", "hessian", "--r", "2", "--out", out),
        "scan": lambda out: ("scan", "--model", model, "--data", data, "--r", "1,2",
                             "--lambda", "1,1000", "--out", out),
        "evaluate": lambda out: ("evaluate", "--model", model, "--data", data, "--out", out,
                                 "--per-sample"),
    }
    differing = []
    for name, argv in commands.items():
        a, b = tmp_path / f"{name}-a", tmp_path / f"{name}-b"
        _cli(*argv(a))
        _cli(*argv(b))
        if _files(a) != _files(b) or not _files(a):
            differing.append(name)
    original = _files(data)
    if _files(tmp_path / "generate-data-a") != original:
        differing.append("generate-data vs protocol data")
    detail(f"{len(commands)} commands compared" + (f", differing: {differing}" if differing else ""))
    assert not differing
