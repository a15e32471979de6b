"""Command-line front-end.

Subcommands: ``generate-data``, ``fit-pnarx``, ``decouple``, ``scan`` and
``evaluate``.  Exit status is 0 on success, 2 for configuration or input
errors and 3 for numerical failures; on failure a JSON object
``{"error", "message", "field"}`` is printed to stderr.
"""

import argparse
import csv
import glob
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .errors import (ConfigError, Diverged, NarxDecoupleError, NonFinite, NoProgress,
                     RankDeficient)
from .narx import (NarxStructure, PNarxModel, dumps_json, fit_pnarx, load_model,
                   save_model, simulate, simulation_error)
from .pipeline import DEFAULT_LAMBDAS, DEFAULT_R, METHODS, best_per_r, decouple_cell
from .signals import LabConfig, csv_read, csv_write, generate_training, generate_validation

SCAN_HEADER = ["r", "lambda", "e_f", "e_rms_val_pre", "e_rms_val_post", "seed", "status"]
NUMERIC_ERRORS = (Diverged, NoProgress, NonFinite, RankDeficient)


class UsageError(Exception):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(dumps_json(_jsonable(obj)))


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "nan")
    return str(v)


def _write_rows(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in header])


def _float_list(text, name):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--{name} expects comma-separated numbers, got {text!r}", name) from None


def _int_list(text, name):
    vals = _float_list(text, name)
    if any(v != int(v) or v < 1 for v in vals):
        raise UsageError(f"--{name} expects positive integers, got {text!r}", name)
    return [int(v) for v in vals]


def load_data(path):
    """Training records and validation record (or ``None``) from ``path``.

    ``path`` is a directory written by ``generate-data`` (read through its
    ``manifest.json``), a directory holding ``train*.csv`` and ``val*.csv``
    files, or a single CSV file used for training only.
    """
    if os.path.isfile(path):
        return [csv_read(path)], None
    if not os.path.isdir(path):
        raise FileNotFoundError(f"no such data file or directory: {path}")
    manifest = os.path.join(path, "manifest.json")
    if os.path.exists(manifest):
        with open(manifest) as fh:
            m = json.load(fh)
        train = [os.path.join(path, e["file"]) for e in m["training"]]
        val = os.path.join(path, m["validation"]["file"]) if m.get("validation") else None
    else:
        train = sorted(glob.glob(os.path.join(path, "train*.csv")))
        vals = sorted(glob.glob(os.path.join(path, "val*.csv")))
        val = vals[0] if vals else None
    if not train:
        raise FileNotFoundError(f"no training records in {path}")
    return [csv_read(p) for p in train], (csv_read(val) if val else None)


def _load_reference(path):
    model = load_model(path)
    if not isinstance(model, PNarxModel):
        raise UsageError(f"{path} does not hold a P-NARX model", "model")
    return model


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------- commands

def cmd_generate_data(args):
    if args.config:
        with open(args.config) as fh:
            cfg = LabConfig.from_dict(json.load(fh))
    else:
        cfg = LabConfig()
    if args.seed is not None:
        cfg = LabConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    cfg.validate()
    out = _out_dir(args.out)
    training = generate_training(cfg)
    validation = generate_validation(cfg)
    entries = []
    for i, rec in enumerate(training):
        name = f"train_{i:02d}.csv"
        csv_write(rec, os.path.join(out, name))
        entries.append({"file": name, **rec.meta})
    csv_write(validation, os.path.join(out, "validation.csv"))
    _write_json(os.path.join(out, "manifest.json"), {
        "config": cfg.to_dict(), "training": entries,
        "validation": {"file": "validation.csv", **validation.meta},
        "version": __version__})
    print(f"wrote {len(training)} training records and 1 validation record to {out}")


def cmd_fit_pnarx(args):
    training, validation = load_data(args.data)
    s = NarxStructure(args.n_u, args.n_y, args.degree)
    model = fit_pnarx([r.u for r in training], [r.y for r in training], s)
    out = _out_dir(args.out)
    save_model(model, os.path.join(out, "pnarx.json"))
    report = {"n_params": model.n_params, "structure": s.to_dict(),
              "e_rms_train": simulation_error(model, training),
              "e_rms_val": simulation_error(model, [validation]) if validation else None}
    _write_json(os.path.join(out, "pnarx_report.json"), report)
    print(dumps_json(_jsonable(report)), end="")


def cmd_decouple(args):
    reference = _load_reference(args.model)
    training, validation = load_data(args.data)
    if args.r is None or len(args.r) != 1:
        raise UsageError("decouple needs a single --r value", "r")
    lam = args.lam[0] if args.lam else 1.0
    cell = decouple_cell(reference, training, [validation] if validation else None,
                         args.r[0], lam, args.method, args.n_points, args.seed,
                         finetune=not args.no_finetune)
    out = _out_dir(args.out)
    diag = {**cell.row(), "diagnostics": cell.diagnostics}
    _write_json(os.path.join(out, "diagnostics.json"), diag)
    if cell.model is None:
        raise NonFinite(f"decomposition failed ({cell.status})")
    save_model(cell.model_pre, os.path.join(out, "decoupled_pre.json"))
    save_model(cell.model, os.path.join(out, "decoupled.json"))
    print(dumps_json(_jsonable(cell.row())), end="")
    if cell.status != "ok":
        raise NoProgress(f"fine-tuning ended with status {cell.status!r}") \
            if cell.status == "no_progress" else Diverged(f"fine-tuning: {cell.status}")


def _scan_cell(job):
    reference, training, validation, r, lam, method, n_points, seed, finetune = job
    cell = decouple_cell(reference, training, validation, r, lam, method, n_points, seed,
                         finetune)
    return cell.row(), cell.diagnostics


def cmd_scan(args):
    reference = _load_reference(args.model)
    training, validation = load_data(args.data)
    rs = args.r or list(DEFAULT_R)
    lams = args.lam or list(DEFAULT_LAMBDAS)
    if not rs or not lams:
        raise UsageError("the scan grid is empty", "r" if not rs else "lambda")
    val = [validation] if validation else None
    jobs = [(reference, training, val, r, lam, args.method, args.n_points, args.seed,
             not args.no_finetune) for r in rs for lam in lams]
    n_jobs = args.jobs or os.cpu_count() or 1
    if n_jobs == 1:
        results = [_scan_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_scan_cell, jobs))
    out = _out_dir(args.out)
    rows = [row for row, _ in results]
    _write_rows(os.path.join(out, "scan.csv"), rows, SCAN_HEADER)
    _write_rows(os.path.join(out, "scan_best.csv"), best_per_r(rows), SCAN_HEADER)
    diag_dir = _out_dir(os.path.join(out, "cells"))
    cells = []
    for row, diag in results:
        name = f"r{row['r']}_lambda{row['lambda']:g}.json"
        _write_json(os.path.join(diag_dir, name), {**row, "diagnostics": diag})
        cells.append({"r": row["r"], "lambda": row["lambda"], "diagnostics": f"cells/{name}"})
    _write_json(os.path.join(out, "scan_manifest.json"), {
        "model": os.path.basename(args.model), "data": os.path.basename(os.path.normpath(args.data)),
        "method": args.method, "seed": args.seed, "n_points": args.n_points,
        "r": rs, "lambda": lams, "finetune": not args.no_finetune, "cells": cells,
        "version": __version__})
    print(f"scanned {len(rows)} cells; results in {os.path.join(out, 'scan.csv')}")


def cmd_evaluate(args):
    model = load_model(args.model)
    training, validation = load_data(args.data)
    metrics = {"model": model.kind, "n_params": model.n_params,
               "e_rms_train": simulation_error(model, training),
               "e_rms_val": simulation_error(model, [validation]) if validation else None}
    if args.out:
        out = _out_dir(args.out)
        _write_json(os.path.join(out, "metrics.json"), metrics)
        if args.per_sample:
            named = [("validation", validation)] if validation else \
                [(f"train_{i:02d}", r) for i, r in enumerate(training)]
            t0 = model.structure.max_lag
            rows = []
            for name, rec in named:
                ys = simulate(model, rec.u, rec.y)
                for k in range(t0, len(rec)):
                    rows.append({"record": name, "k": k, "y": float(rec.y[k]),
                                 "y_sim": float(ys[k]), "error": float(rec.y[k] - ys[k])})
            _write_rows(os.path.join(out, "per_sample.csv"), rows,
                        ["record", "k", "y", "y_sim", "error"])
    print(dumps_json(_jsonable(metrics)), end="")


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="narxdecouple", description="Decoupled polynomial NARX identification.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="simulate the forced-Duffing benchmark")
    g.add_argument("--config", help="JSON file with generator settings")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    f = sub.add_parser("fit-pnarx", help="equation-error polynomial NARX fit")
    f.add_argument("--data", required=True)
    f.add_argument("--n-u", type=int, default=1)
    f.add_argument("--n-y", type=int, default=3)
    f.add_argument("--degree", type=int, default=3)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit_pnarx)

    for name, func, helptext in (("decouple", cmd_decouple, "decouple one model"),
                                 ("scan", cmd_scan, "grid over branch count and lambda")):
        d = sub.add_parser(name, help=helptext)
        d.add_argument("--model", required=True, help="P-NARX model JSON")
        d.add_argument("--data", required=True)
        d.add_argument("--method", choices=METHODS, default="fcpd")
        d.add_argument("--r", type=lambda t: _int_list(t, "r"),
                       default=[4] if name == "decouple" else None)
        d.add_argument("--lambda", dest="lam", type=lambda t: _float_list(t, "lambda"))
        d.add_argument("--n-points", type=int, default=200)
        d.add_argument("--seed", type=int, default=0)
        d.add_argument("--no-finetune", action="store_true")
        d.add_argument("--out", required=True)
        if name == "scan":
            d.add_argument("--jobs", type=int, default=None,
                           help="worker processes (default: all cores)")
        d.set_defaults(func=func)

    e = sub.add_parser("evaluate", help="simulation errors of a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--per-sample", action="store_true")
    e.set_defaults(func=cmd_evaluate)
    return p


def _fail(code, exc, field=None):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "field": field}, sort_keys=True) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "n_points", 1) < 1 or (getattr(args, "jobs", None) or 1) < 1:
            raise UsageError("--n-points and --jobs must be positive")
        args.func(args)
    except UsageError as exc:
        return _fail(2, exc, exc.field)
    except ConfigError as exc:
        return _fail(2, exc, exc.field)
    except NUMERIC_ERRORS as exc:
        return _fail(3, exc)
    except (NarxDecoupleError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        return _fail(2, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
