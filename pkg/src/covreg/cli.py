"""Command-line front end: ``covreg fit | infer | simulate | report``.

Exit codes: 0 success, 2 input or configuration error, 3 solver failure,
4 replicate failure under ``--strict``. Errors print one line to stderr that
starts with ``E_INPUT``, ``E_CONFIG``, ``E_SOLVER`` or ``E_STRICT``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import kernels
from .data import DataValidationError, load_dataset
from .estimate import (ComponentSet, CVConfig, FitConfig, PenaltySpec, SolverError, load_d_matrix,
                       select_components)
from .infer import SplitPlan, infer
from .sim import load_scenario, run_replicates, sweep, sweep_csv

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_STRICT = 0, 2, 3, 4

DEFAULTS = {
    "lambda": None,
    "cv_folds": 5,
    "alpha": 0.05,
    "B": 200,
    "n1": None,
    "dfd_threshold": 2.0,
    "seed": 0,
    "threads": 1,
    "restarts": 5,
    "max_components": None,
    "component": 0,
    "targets": None,
    "replicates": None,
    "strict": False,
    "standardize": False,
    "d_matrix": None,
}


class CliError(Exception):
    def __init__(self, code: int, tag: str, message: str):
        super().__init__(message)
        self.code, self.tag = code, tag


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_INPUT, "E_CONFIG", message)


def _finite_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"must be finite, got {text!r}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # defaults are None so that a JSON config can fill the gaps
    common.add_argument("--out", help="output directory (created if missing)")
    common.add_argument("--config", help="JSON file with option values; flags take precedence")
    common.add_argument("--seed", type=int, help="master seed (falls back to $COVREG_SEED, then 0)")
    common.add_argument("--threads", type=int, help="worker threads for independent units")
    common.add_argument("--lambda", dest="lambda_", type=_finite_float, help="fixed penalty weight (default: CV)")
    common.add_argument("--cv-folds", type=int)
    common.add_argument("--alpha", type=_finite_float)
    common.add_argument("--B", dest="B", type=int, help="number of split rounds")
    common.add_argument("--n1", type=int, help="selection-half size (default floor(n/2))")
    common.add_argument("--dfd-threshold", type=_finite_float)
    common.add_argument("--restarts", type=int)
    common.add_argument("--max-components", type=int)
    common.add_argument("--d-matrix", help="CSV structure matrix D for the generalized lasso penalty")

    parser = _Parser(prog="covreg", description="Covariance-outcome regression with split-and-smooth inference.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", parents=[common], help="estimate projections and coefficients")
    p.add_argument("--data", help="dataset manifest JSON")
    p.add_argument("--standardize", action="store_true", default=None)

    p = sub.add_parser("infer", parents=[common], help="confidence intervals and p-values for one component")
    p.add_argument("--data", help="dataset manifest JSON")
    p.add_argument("--fit", help="fit.json from 'covreg fit' (default: <out>/fit.json)")
    p.add_argument("--component", type=int, help="0-based component index in the fit")
    p.add_argument("--targets", type=_int_list, help="comma-separated coefficient indices (default: all)")
    p.add_argument("--standardize", action="store_true", default=None)

    p = sub.add_parser("simulate", parents=[common], help="Monte-Carlo replicates of a scenario")
    p.add_argument("--scenario", help="bundled scenario name or JSON path")
    p.add_argument("--replicates", type=int, help="override the scenario replicate count")
    p.add_argument("--strict", action="store_true", default=None, help="exit 4 if any replicate fails")

    p = sub.add_parser("report", help="print a summary of a finished run directory")
    p.add_argument("--out", required=True, help="run directory written by another subcommand")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the JSON config over defaults; the seed falls back to $COVREG_SEED.

    ``cfg["_explicit"]`` lists the keys set by a flag, the config file or the
    environment, so scenario values are only overridden on request.
    """
    cfg = dict(DEFAULTS)
    explicit = set()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(EXIT_INPUT, "E_INPUT", f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_INPUT, "E_CONFIG", f"config file {path}: {exc}") from None
        unknown = set(file_cfg) - set(DEFAULTS) - {"data", "fit", "scenario", "out"}
        if unknown:
            raise CliError(EXIT_INPUT, "E_CONFIG", f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
        explicit |= set(file_cfg)
    if "seed" not in explicit and os.environ.get("COVREG_SEED"):
        try:
            cfg["seed"] = int(os.environ["COVREG_SEED"])
        except ValueError:
            raise CliError(EXIT_INPUT, "E_CONFIG", "COVREG_SEED must be an integer") from None
        explicit.add("seed")
    for key, value in vars(args).items():
        key = "lambda" if key == "lambda_" else key
        if key != "config" and value is not None:
            cfg[key] = value
            explicit.add(key)
    _validate(cfg)
    cfg["_explicit"] = sorted(explicit - {"command"})
    return cfg


def _validate(cfg: dict) -> None:
    def bad(msg):
        raise CliError(EXIT_INPUT, "E_CONFIG", msg)

    lam = cfg.get("lambda")
    if lam is not None and not (isinstance(lam, (int, float)) and math.isfinite(lam) and lam >= 0):
        bad(f"lambda must be finite and >= 0, got {lam!r}")
    if not 0 < cfg["alpha"] < 1:
        bad("alpha must lie in (0, 1)")
    if cfg["command"] in ("infer", "simulate") and int(cfg["B"]) < 2:
        bad("B>=2")
    if cfg["cv_folds"] < 2:
        bad("cv-folds>=2")
    if cfg["threads"] < 1:
        bad("threads>=1")
    if cfg["restarts"] < 1:
        bad("restarts>=1")
    if not cfg["dfd_threshold"] > 1:
        bad("dfd-threshold>1")
    if cfg.get("replicates") is not None and cfg["replicates"] < 1:
        bad("replicates>=1")


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise CliError(EXIT_INPUT, "E_CONFIG", f"--{key} is required for '{cfg['command']}'")
    return cfg[key]


def _out_dir(cfg: dict) -> Path:
    out = Path(_require(cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_bytes(text.encode("utf-8"))


def _write_json(path: Path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _write_metadata(out: Path, cfg: dict, extra: dict | None = None) -> None:
    meta = {"config": {k: v for k, v in sorted(cfg.items())},
            "seed": cfg["seed"], "backend": kernels.BACKEND,
            "versions": {"python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__}}
    meta.update(extra or {})
    _write_json(out / "metadata.json", meta)


def _base_penalty(cfg: dict) -> PenaltySpec:
    if not cfg.get("d_matrix"):
        return PenaltySpec()
    path = Path(cfg["d_matrix"])
    if not path.is_file():
        raise CliError(EXIT_INPUT, "E_INPUT", f"missing file {path}")
    return PenaltySpec(kind="generalized", d=load_d_matrix(path))


def _penalty(cfg: dict) -> tuple[PenaltySpec, CVConfig | None]:
    base = _base_penalty(cfg)
    if cfg["lambda"] is not None:
        return base.with_lambda(float(cfg["lambda"])), None
    return base, CVConfig(folds=int(cfg["cv_folds"]))


def _load(cfg: dict):
    return load_dataset(_require(cfg, "data"), standardize=bool(cfg["standardize"]))


def cmd_fit(cfg: dict) -> int:
    out = _out_dir(cfg)
    data = _load(cfg)
    penalty, cv = _penalty(cfg)
    config = FitConfig(restarts=int(cfg["restarts"]), rng_seed=int(cfg["seed"]), threads=int(cfg["threads"]))
    comps = select_components(data, penalty, config, float(cfg["dfd_threshold"]), cv, cfg["max_components"])
    _write_json(out / "fit.json", {**comps.to_dict(), "n": data.n, "p": data.p, "q": data.q})
    _write_metadata(out, cfg)
    print(f"fit: {len(comps.components)} component(s), DfD trace {[round(v, 4) for v in comps.dfd_values]}")
    return EXIT_OK


def cmd_infer(cfg: dict) -> int:
    out = _out_dir(cfg)
    data = _load(cfg)
    fit_path = Path(cfg.get("fit") or out / "fit.json")
    if not fit_path.is_file():
        raise CliError(EXIT_INPUT, "E_INPUT", f"fit file not found: {fit_path}")
    try:
        comps = ComponentSet.from_dict(json.loads(fit_path.read_text(encoding="utf-8")))
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(EXIT_INPUT, "E_INPUT", f"malformed fit file {fit_path}: {exc}") from None
    k = int(cfg["component"])
    if not 0 <= k < len(comps.components):
        raise CliError(EXIT_INPUT, "E_CONFIG", f"component {k} not in fit (has {len(comps.components)})")
    comp = comps.components[k]
    if comp.gamma.size != data.p:
        raise CliError(EXIT_INPUT, "E_INPUT", f"fit has p={comp.gamma.size} but data has p={data.p}")
    plan = SplitPlan.halves(data.n, int(cfg["B"]), int(cfg["seed"]), cfg["n1"])
    try:
        plan.validate(data.n)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, "E_CONFIG", str(exc)) from None
    lam = float(cfg["lambda"]) if cfg["lambda"] is not None else comp.lam
    targets = cfg["targets"]
    if targets is not None and any(not 0 <= j < data.q for j in targets):
        raise CliError(EXIT_INPUT, "E_CONFIG", f"targets must lie in [0, {data.q})")
    res, _, var = infer(data, comp.gamma, _base_penalty(cfg).with_lambda(lam), plan, float(cfg["alpha"]), targets,
                        int(cfg["threads"]))
    coords = sorted(set(targets)) if targets is not None else range(data.q)
    run = {"B": plan.b_splits, "n1": plan.n1, "n2": plan.n2, "lambda": lam, "alpha": float(cfg["alpha"]),
           "seed": int(cfg["seed"]), "component": k}
    rows = res.rows(coords)
    for row in rows:
        row["v_hat_unsquared"] = float(var.unsquared[row["j"]])
    _write_json(out / "inference.json", {"metadata": run, "coefficients": rows})
    _write(out / "inference.csv", res.to_csv(coords))
    _write_metadata(out, cfg, {"split_plan": run})
    print(f"infer: {len(rows)} coefficient(s), {int(np.sum(res.truncated))} truncated variance(s)")
    return EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    out = _out_dir(cfg)
    try:
        spec, grid = load_scenario(_require(cfg, "scenario"))
    except FileNotFoundError as exc:
        raise CliError(EXIT_INPUT, "E_INPUT", str(exc)) from None
    except (ValueError, TypeError, KeyError) as exc:
        raise CliError(EXIT_INPUT, "E_CONFIG", f"invalid scenario: {exc}") from None
    given = set(cfg["_explicit"])
    fields = {"seed": "rng_seed", "replicates": "replicate_count", "B": "b_splits", "lambda": "lam",
              "max_components": "max_components", "dfd_threshold": "dfd_threshold",
              "cv_folds": "cv_folds", "alpha": "alpha", "restarts": "restarts"}
    changes = {field: cfg[key] for key, field in fields.items() if key in given}
    spec = replace(spec, **changes)
    threads = int(cfg["threads"])
    if grid:
        reports = sweep(spec, grid, threads=threads)
        _write(out / "sweep.csv", sweep_csv(grid, reports))
        _write_json(out / "sim_report.json", {"grid": [list(c) for c in grid],
                                               "cells": [r.summary() for r in reports]})
        failures = sum(r.failures for r in reports)
        total = sum(r.replicate_count for r in reports)
    else:
        report = run_replicates(spec, threads=threads)
        _write(out / "sim_report.csv", report.to_csv())
        _write_json(out / "sim_report.json", {**report.summary(), "records": report.records})
        failures, total = report.failures, report.replicate_count
    _write_metadata(out, {**cfg, "seed": spec.rng_seed}, {"scenario": spec.to_dict(), "grid": grid})
    if failures:
        msg = f"{failures} of {total} replicate(s) failed"
        if cfg["strict"]:
            raise CliError(EXIT_STRICT, "E_STRICT", msg)
        print(f"warning: {msg}", file=sys.stderr)
    print(f"simulate: {total - failures}/{total} replicate(s) completed")
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    out = Path(cfg["out"])
    if not out.is_dir():
        raise CliError(EXIT_INPUT, "E_INPUT", f"run directory not found: {out}")
    shown = False
    for name in ("fit.json", "inference.csv", "sim_report.csv", "sweep.csv"):
        path = out / name
        if not path.is_file():
            continue
        shown = True
        print(f"== {name}")
        if name == "fit.json":
            d = json.loads(path.read_text(encoding="utf-8"))
            for k, comp in enumerate(d["components"]):
                nz = [j for j, b in enumerate(comp["beta"]) if j > 0 and b != 0]
                print(f"component {k}: lambda={comp['lambda']:.6g} gamma={np.round(comp['gamma'], 4).tolist()} "
                      f"nonzero={nz}")
            print(f"dfd: {d['dfd_values']}")
        else:
            sys.stdout.write(path.read_text(encoding="utf-8").replace("\r\n", "\n"))
    if not shown:
        raise CliError(EXIT_INPUT, "E_INPUT", f"no run outputs in {out}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "infer": cmd_infer, "simulate": cmd_simulate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command == "report":
            cfg = {"command": "report", "out": args.out}
        else:
            cfg = resolve(args)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return COMMANDS[cfg["command"]](cfg)
    except CliError as exc:
        print(f"{exc.tag} {exc}", file=sys.stderr)
        return exc.code
    except (DataValidationError, FileNotFoundError) as exc:
        print(f"E_INPUT {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print(f"E_SOLVER {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except np.linalg.LinAlgError as exc:
        print(f"E_SOLVER LinAlgError: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"E_CONFIG {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
