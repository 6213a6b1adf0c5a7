"""Command line entry point: adaptive and uniform runs, checks, rate fits.

Usage::

    amfem run|uniform|verify|rates --config CONFIG.json [--theta X] [--max-dofs N] [--out DIR]

Exit codes: 0 success, 2 invalid configuration, 3 a check failed,
1 any other error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .adapt import AfemConfig, AfemHistory, afem_run, uniform_run
from .problems import SOURCES
from .system import energy_error
from .verify import run_verification

__all__ = ["ConfigError", "RateFit", "RunConfig", "fit_rate", "main", "parse_config", "run_experiment"]

SUBCOMMANDS = ("run", "uniform", "verify", "rates")
REDUCTION_TOL = 1e-10


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Flat experiment configuration (JSON keys match the field names)."""

    problem: str
    domain: str
    subcommand: str = "run"
    family: str = "rt"
    order: int = 0
    theta: float = 0.3
    max_dofs: int = 100_000
    tol: float = 1e-8
    max_iter: int = 100
    source: str = "manufactured"
    initial_subdivisions: int = 2
    refinement: str = "bisec3"
    reference_error: bool = False
    verify_levels: int = 6
    out: str = "out"
    seed: int = 0

    def afem(self) -> AfemConfig:
        return AfemConfig(
            problem=self.problem, domain=self.domain, family=self.family, order=self.order,
            source=self.source, theta=self.theta, max_dofs=self.max_dofs, tol=self.tol,
            max_iter=self.max_iter, initial_subdivisions=self.initial_subdivisions,
            refinement=self.refinement, reference_error=self.reference_error)


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_REQUIRED = ("problem", "domain")


def _check_type(key: str, value, typ: str):
    if typ == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif typ == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif typ == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}")
    elif typ == "str" and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def parse_config(data: dict | str | Path, overrides: dict | None = None) -> RunConfig:
    """Validate a configuration mapping (or JSON file) and fill defaults.

    ``overrides`` (command-line flags) take precedence over file values.
    """
    if isinstance(data, (str, Path)):
        try:
            data = json.loads(Path(data).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {data}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    merged = dict(data)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(merged) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(map(repr, unknown))}")
    missing = [k for k in _REQUIRED if k not in merged]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    merged = {k: _check_type(k, v, _TYPES[k]) for k, v in merged.items()}
    cfg = RunConfig(**merged)
    if cfg.subcommand not in SUBCOMMANDS:
        raise ConfigError(f"subcommand: expected one of {SUBCOMMANDS}, got {cfg.subcommand!r}")
    if cfg.problem not in ("poisson", "stokes"):
        raise ConfigError(f"problem: expected poisson or stokes, got {cfg.problem!r}")
    if cfg.family not in ("rt", "bdm"):
        raise ConfigError(f"family: expected rt or bdm, got {cfg.family!r}")
    if cfg.order not in (0, 1):
        raise ConfigError(f"order: expected 0 or 1, got {cfg.order}")
    if not 0.0 < cfg.theta < 1.0:
        raise ConfigError(f"theta: must lie in (0, 1), got {cfg.theta}")
    if cfg.source not in SOURCES:
        raise ConfigError(f"source: expected one of {sorted(SOURCES)}, got {cfg.source!r}")
    if cfg.source == "rotational" and cfg.problem != "stokes":
        raise ConfigError("source: 'rotational' requires problem 'stokes'")
    if cfg.refinement not in ("nvb", "bisec3"):
        raise ConfigError(f"refinement: expected nvb or bisec3, got {cfg.refinement!r}")
    for key in ("max_dofs", "max_iter", "tol"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key}: must be nonnegative")
    if cfg.initial_subdivisions < 1 or cfg.verify_levels < 2:
        raise ConfigError("initial_subdivisions must be >= 1 and verify_levels >= 2")
    if cfg.domain not in ("unit_square", "lshape") and not Path(cfg.domain).is_file():
        raise ConfigError(f"domain: expected unit_square, lshape or a mesh JSON path, got {cfg.domain!r}")
    return cfg


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through (log N, log value)."""

    slope: float
    intercept: float
    residual: float
    points: int


def fit_rate(points) -> RateFit:
    pts = np.asarray(points, float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("rate fit needs at least 3 (N, value) points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise ValueError("rate fit needs positive finite N and values")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    A = np.column_stack([x, np.ones_like(x)])
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = float(np.linalg.norm(A @ [slope, icpt] - y))
    return RateFit(float(slope), float(icpt), res, len(pts))


def tail_points(n: int) -> int:
    """Number of trailing history points used for rate fits."""
    return max(3, math.ceil(n / 2))


def _history_rates(ndof, total, err) -> dict:
    out = {}
    m = tail_points(len(ndof))
    if len(ndof) >= 3:
        out["estimator"] = asdict(fit_rate(np.column_stack([ndof, total])[-m:]))
        e = np.asarray(err, float)
        if np.all(np.isfinite(e[-m:])) and np.all(e[-m:] > 0):
            out["energy_error"] = asdict(fit_rate(np.column_stack([ndof, e])[-m:]))
    return out


def _reduction_checks(hist: AfemHistory, uniform: bool) -> dict:
    recs = hist.records[:-1]
    checks = {}
    osc = [r.osc_reduction_slack for r in recs]
    scale = max([r.osc2 for r in hist.records] + [1e-300])
    checks["oscillation_reduction"] = {
        "min_slack": min(osc) if osc else 0.0,
        "passed": all(s >= -REDUCTION_TOL * max(scale, 1.0) for s in osc)}
    if not uniform:
        est = [r.est_reduction_slack for r in recs]
        checks["estimator_reduction"] = {
            "min_slack": min(est) if est else 0.0,
            "passed": all(s >= -REDUCTION_TOL for s in est)}
    return checks


def run_experiment(cfg: RunConfig) -> tuple[dict, bool]:
    """Execute a configuration and write its artifacts into ``cfg.out``.

    Returns the report dictionary and whether all checks passed.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = asdict(cfg)
    if cfg.subcommand != "rates":
        (out / "config.json").write_text(json.dumps(cfg_dict, indent=2))
    report: dict = {"config": cfg_dict}
    passed = True
    if cfg.subcommand in ("run", "uniform"):
        uniform = cfg.subcommand == "uniform"
        hist = (uniform_run if uniform else afem_run)(cfg.afem(), keep_fields=False)
        hist.config = cfg_dict
        hist.to_csv(out / "history.csv")
        hist.to_json(out / "history.json")
        for k, ind in enumerate(hist.indicators):
            ind.to_csv(out / f"indicators_{k}.csv")
        report["rates"] = _history_rates(hist.column("ndof"), hist.column("eta2") + hist.column("osc2"),
                                         hist.column("err_energy"))
        report["checks"] = _reduction_checks(hist, uniform)
        passed = all(c["passed"] for c in report["checks"].values())
    elif cfg.subcommand == "verify":
        acfg = cfg.afem()
        hist = afem_run(AfemConfig(**(asdict(acfg) | {"max_iter": cfg.verify_levels - 1})))
        problem = acfg.make_problem()
        errors = ([energy_error(f) for f in hist.fields] if problem.exact_sigma is not None else None)
        rep = run_verification(problem, hist.meshes, errors=errors)
        report["constants"] = rep.to_dict()
        passed = rep.passed
    else:
        path = out / "history.csv"
        if not path.is_file():
            raise ConfigError(f"rates: no history found at {path}")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        ndof = [float(r["ndof"]) for r in rows]
        total = [float(r["eta2"]) + float(r["osc2"]) for r in rows]
        err = [float(r["err_energy"]) for r in rows]
        if len(rows) < 3:
            raise ConfigError("rates: history has fewer than 3 records")
        report["rates"] = _history_rates(ndof, total, err)
        report["passed"] = passed
        (out / "rates.json").write_text(json.dumps(report, indent=2))
        return report, passed
    report["passed"] = passed
    (out / "report.json").write_text(json.dumps(report, indent=2, default=float))
    return report, passed


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amfem", description="Adaptive mixed finite element experiments.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--theta", type=float, help="bulk marking parameter in (0, 1)")
    p.add_argument("--max-dofs", type=int, dest="max_dofs", help="stop once this many dofs are reached")
    p.add_argument("--out", help="output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    overrides = {"subcommand": args.subcommand, "theta": args.theta,
                 "max_dofs": args.max_dofs, "out": args.out}
    try:
        cfg = parse_config(Path(args.config), overrides)
        report, passed = run_experiment(cfg)
    except ConfigError as exc:
        print(f"amfem: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"amfem: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    summary = {k: v for k, v in report.items() if k in ("rates", "checks", "passed")}
    print(json.dumps(summary, indent=2, default=float))
    return 0 if passed else 3


if __name__ == "__main__":
    sys.exit(main())
