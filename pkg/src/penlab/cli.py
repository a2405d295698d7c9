"""
penlab command line.

    penlab price       --config run.json --out results/
    penlab converge    --config run.json --out results/ [--parallel]
    penlab bounds      --config run.json --out results/
    penlab asymptotics --config run.json --out results/
    penlab extrapolate --config run.json --out results/

A config is a JSON object with blocks ``model``, ``payoff``, ``grid``,
``solver`` and an optional block named after the command. Missing fields
take their defaults; the fully resolved config is written into every output
file. Exit codes: 0 success, 1 config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, asymptotics
from .discretize import build_grid
from .model import MarketModel, payoff_from_dict
from .solve import SolverConfig, SolverError, delta, price

SCHEMA_VERSION = 1
COMMANDS = ("price", "converge", "bounds", "asymptotics", "extrapolate")

log = logging.getLogger("penlab")

GRID_DEFAULTS = {"N": 999, "M": 1000, "S_max": None, "T": 1.0, "theta": 0.5, "rannacher_steps": 2}
COMMAND_DEFAULTS = {
    "price": {},
    "converge": {"eps": [4e-4, 2e-4, 1e-4, 5e-5], "slices": [0.4, 0.9], "reference": {}},
    "bounds": {"eps": [4e-4, 1e-4, 2.5e-5], "tau": 1.0, "reference": {}},
    "asymptotics": {"eps": [1e-4], "tau": [1.0, 0.4], "K": None, "reference": {}},
    "extrapolate": {"N_finest": 1599, "eps_finest": 1e-4, "levels": 3, "tau": 1.0, "reference": {}},
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- #
#  Config
# --------------------------------------------------------------------------- #


def _merge(block: dict, defaults: dict, where: str) -> dict:
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(block) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {where} fields: {sorted(unknown)}")
    out = dict(defaults)
    out.update(block)
    return out


def _solver_fields(block: dict, where: str) -> dict:
    defaults = SolverConfig(mode="lcp").to_dict()
    out = _merge(block, defaults, where)
    try:
        SolverConfig(**out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return out


def resolve_config(raw: dict, command: str) -> dict:
    """Validate a raw config and fill every default; raises ConfigError."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    allowed = {"schema_version", "model", "payoff", "grid", "solver"} | set(COMMANDS)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level fields: {sorted(unknown)}")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
    for block in ("model", "payoff"):
        if block not in raw:
            raise ConfigError(f"missing {block} block")
    try:
        model = MarketModel.from_dict(raw["model"])
        payoff = payoff_from_dict(raw["payoff"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"model/payoff: {exc}") from None
    grid = _merge(raw.get("grid", {}), GRID_DEFAULTS, "grid")
    try:
        g = build_grid(payoff, **grid)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"grid: {exc}") from None
    grid["S_max"] = g.S_max
    solver = _solver_fields(raw.get("solver", {"mode": "lcp"}), "solver")
    cmd = _merge(raw.get(command, {}), COMMAND_DEFAULTS[command], command)
    if "reference" in cmd:
        cmd["reference"] = _solver_fields(dict({"mode": "lcp"}, **cmd["reference"]), f"{command}.reference")
        if cmd["reference"]["mode"] != "lcp":
            raise ConfigError(f"{command}.reference must use mode 'lcp'")
    if command in ("converge", "bounds", "asymptotics"):
        eps = cmd["eps"]
        if not eps or any(not (isinstance(e, (int, float)) and e > 0) for e in eps):
            raise ConfigError(f"{command}.eps must be a list of positive numbers")
    if command == "converge" and len(cmd["eps"]) < 4:
        raise ConfigError("converge needs at least 4 eps values")
    if command == "asymptotics" and cmd["K"] is None:
        if payoff.name != "put":
            raise ConfigError("asymptotics needs a put payoff or an explicit K")
        cmd["K"] = float(payoff.breakpoints[0])
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "model": model.to_dict(),
        "payoff": payoff.to_dict(),
        "grid": grid,
        "solver": solver,
        command: cmd,
    }


def _objects(cfg: dict):
    model = MarketModel.from_dict(cfg["model"])
    payoff = payoff_from_dict(cfg["payoff"])
    grid = build_grid(payoff, **cfg["grid"])
    return model, payoff, grid


# --------------------------------------------------------------------------- #
#  Output helpers
# --------------------------------------------------------------------------- #


def _fmt(x) -> str:
    return format(x, ".17g") if isinstance(x, float) else str(x)


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=float)


def _write_csv(path: Path, header: list, rows: list, cfg: dict) -> None:
    """CSV preceded by one comment line carrying the resolved config."""
    with open(path, "w", newline="") as fh:
        fh.write("# config: " + json.dumps(cfg, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _surface_csv(path: Path, surface, cfg: dict) -> None:
    d = delta(surface)
    rows = []
    for j, t in enumerate(surface.t):
        for i, s in enumerate(surface.S):
            rows.append([float(t), float(s), float(surface.values[i, j]), float(d.values[i, j])])
    _write_csv(path, ["t", "S", "value", "delta"], rows, cfg)


# --------------------------------------------------------------------------- #
#  Commands
# --------------------------------------------------------------------------- #


def cmd_price(cfg: dict, out: Path, parallel: bool = False) -> list[Path]:
    model, payoff, grid = _objects(cfg)
    surface = price(model, payoff, grid, SolverConfig(**cfg["solver"]))
    paths = [out / "surface.csv", out / "metadata.json"]
    _surface_csv(paths[0], surface, cfg)
    _write_json(paths[1], {"config": cfg, "meta": surface.meta})
    return paths


def cmd_converge(cfg: dict, out: Path, parallel: bool = False) -> list[Path]:
    model, payoff, grid = _objects(cfg)
    c = cfg["converge"]
    res = analysis.penalty_ladder(model, payoff, grid, c["eps"], slices=c["slices"],
                                  reference_config=SolverConfig(**c["reference"]), parallel=parallel)
    t = res.table
    paths = [out / "orders.csv", out / "errors.csv", out / "converge.json"]
    rows = t.to_rows()
    _write_csv(paths[0], rows[0], rows[1:], cfg)
    err_rows = []
    for k, e in enumerate(t.eps):
        row = [float(e)]
        row += [float(x) for x in t.errors["value"][k]] + [float(x) for x in t.errors["delta"][k]]
        row += [float(t.errors["l2"][k]), float(t.errors["h1"][k])]
        err_rows.append(row)
    header = (["eps"] + [f"value_{s}" for s in t.slices] + [f"delta_{s}" for s in t.slices] + ["l2", "h1"])
    _write_csv(paths[1], header, err_rows, cfg)
    _write_json(paths[2], {"config": cfg, "table": t.to_dict()})
    return paths


def cmd_bounds(cfg: dict, out: Path, parallel: bool = False) -> list[Path]:
    model, payoff, grid = _objects(cfg)
    c = cfg["bounds"]
    ref = price(model, payoff, grid, SolverConfig(**c["reference"]))
    j = ref.level(c["tau"])
    reports, paths = [], []
    for e in c["eps"]:
        pen = price(model, payoff, grid, SolverConfig.penalty(e))
        b = analysis.bounds(pen, payoff, model)
        lo, up = b.sandwich_gap(ref)
        reports.append(dict(b.to_dict(), epsilon=e, lower_gap=lo, upper_gap=up, holds=b.contains(ref)))
        rows = [[float(s), float(p), float(pen.values[i, j]), float(b.upper[i, j]), float(ref.values[i, j])]
                for i, (s, p) in enumerate(zip(grid.nodes, ref.payoff_values))]
        path = out / f"bounds_eps_{e:g}.csv"
        _write_csv(path, ["S", "payoff", "lower", "upper", "lcp"], rows, cfg)
        paths.append(path)
    path = out / "bounds.json"
    _write_json(path, {"config": cfg, "bounds": reports})
    return paths + [path]


def cmd_asymptotics(cfg: dict, out: Path, parallel: bool = False) -> list[Path]:
    model, payoff, grid = _objects(cfg)
    c = cfg["asymptotics"]
    ref = price(model, payoff, grid, SolverConfig(**c["reference"]))
    rows, corrections = [], []
    for e in c["eps"]:
        pen = price(model, payoff, grid, SolverConfig.penalty(e))
        for tau in c["tau"]:
            for r in asymptotics.put_comparison(model, c["K"], e, pen, ref, tau):
                rows.append(dict(r, epsilon=e))
        if not model.has_jumps:
            corrections.append(asymptotics.put_correction(model, c["K"], e).to_dict())
    paths = [out / "asymptotics.csv", out / "asymptotics.json"]
    header = ["epsilon", "tau", "quantity", "computed", "predicted", "relative_difference"]
    _write_csv(paths[0], header, [[r[h] for h in header] for r in rows], cfg)
    _write_json(paths[1], {"config": cfg, "rows": rows, "corrections": corrections})
    return paths


def cmd_extrapolate(cfg: dict, out: Path, parallel: bool = False) -> list[Path]:
    model, payoff, _ = _objects(cfg)
    c = cfg["extrapolate"]
    g = cfg["grid"]
    study = analysis.extrapolation_study(model, payoff, g["S_max"], c["N_finest"], g["M"], c["eps_finest"],
                                         levels=c["levels"], T=g["T"], tau=c["tau"], theta=g["theta"],
                                         reference_config=SolverConfig(**c["reference"]))
    paths = [out / "extrapolation.csv", out / "extrapolation.json"]
    rows = []
    for kind, errs in (("penalty", study.penalty_errors), ("extrapolated", study.extrapolated_errors)):
        for norm in ("value", "delta"):
            rows.append([kind, norm, float(study.orders[kind][norm].order)] + [float(x) for x in errs[norm]])
    header = ["kind", "norm", "order"] + [f"err_eps_{e:g}" for e in study.eps]
    _write_csv(paths[0], header, rows, cfg)
    _write_json(paths[1], {"config": cfg, "study": study.to_dict()})
    return paths


HANDLERS = {
    "price": cmd_price,
    "converge": cmd_converge,
    "bounds": cmd_bounds,
    "asymptotics": cmd_asymptotics,
    "extrapolate": cmd_extrapolate,
}


# --------------------------------------------------------------------------- #
#  Entry point
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="penlab", description="Penalty and LCP pricing of American options.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", default=".", help="output directory (created if missing)")
    ap.add_argument("--parallel", action="store_true", help="run independent ladder solves in threads")
    ap.add_argument("--quiet", action="store_true", help="only report errors")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(message)s")
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        cfg = resolve_config(raw, args.command)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        log.error("config error: %s", exc)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        paths = HANDLERS[args.command](cfg, out, parallel=args.parallel)
    except SolverError as exc:
        log.error("solver failure: %s (residual %.3e)", exc, exc.residual)
        return 2
    for p in paths:
        log.info("wrote %s", p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
