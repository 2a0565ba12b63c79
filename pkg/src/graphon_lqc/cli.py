"""Command-line entry point: ``graphon-lqc {solve,simulate,verify,presets}``.

Exit status is 0 on success, 1 for numerical or model failures (including a
failed verification) and 2 for usage or I/O problems.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import applications as apps
from .model import ModelError, ProblemSpec, spec_from_config, validate
from .riccati import RiccatiError, export_csv, load_solution, save_solution, solve_backward, value_function
from .simulator import (Feedback, SimulationError, estimate_cost, fundamental_relation_residual,
                        simulate_paths, trajectory_quantiles, write_report)

logger = logging.getLogger("graphon_lqc")

OUT_ENV = "GRAPHON_LQC_OUT"
DEFAULT_SIM = {"n_common": 2000, "n_idio": 20, "seed": 0, "eps": 0.1, "delta": 1.0}
SIMULATE_DEFAULTS = {"n_common": 100, "n_idio": 10}


class UsageError(Exception):
    """Bad arguments, missing files or malformed configuration."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def preset_names() -> list[str]:
    root = resources.files("graphon_lqc") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    if name not in preset_names():
        raise UsageError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    text = (resources.files("graphon_lqc") / "presets" / f"{name}.json").read_text()
    return json.loads(text)


def load_config(args) -> tuple[dict, Path]:
    if bool(args.preset) == bool(args.config):
        raise UsageError("give exactly one of --preset or --config")
    if args.preset:
        return load_preset(args.preset), Path(".")
    path = Path(args.config)
    try:
        return json.loads(path.read_text()), path.parent
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None


def apply_overrides(cfg: dict, args) -> dict:
    """Fold command-line flags into a copy of the configuration."""
    cfg = copy.deepcopy(cfg)
    sim = {**DEFAULT_SIM, **cfg.get("simulation", {})}
    for key in ("n_common", "n_idio", "seed", "eps"):
        val = getattr(args, key, None)
        if val is not None:
            sim[key] = val
    if sim["n_common"] <= 0 or sim["n_idio"] <= 0:
        raise UsageError("--n-common and --n-idio must be positive")
    if sim["eps"] < 0:
        raise UsageError("--eps must be non-negative")
    cfg["simulation"] = sim
    if args.dt is not None:
        if args.dt <= 0:
            raise UsageError("--dt must be positive")
        section = cfg["params"] if "application" in cfg else cfg["time"]
        span = float(section.get("T", 1.0)) - float(section.get("t0", 0.0))
        section["n_steps"] = max(1, int(round(span / args.dt)))
    if args.scheme is not None:
        cfg["scheme"] = args.scheme
    cfg.setdefault("scheme", "rk4")
    return cfg


def build_spec(cfg: dict, base_dir: Path) -> ProblemSpec:
    try:
        if "application" in cfg:
            name = cfg.get("name", cfg["application"])
            if cfg["application"] == "trading":
                return apps.build_trading(apps.TradingParams(**cfg.get("params", {})), name=name)
            if cfg["application"] == "systemic":
                return apps.build_systemic(apps.SystemicParams(**cfg.get("params", {})), name=name)
            raise UsageError(f"unknown application {cfg['application']!r}")
        spec = spec_from_config(cfg, base_dir)
        validate(spec)
        return spec
    except (KeyError, TypeError) as exc:
        raise UsageError(f"malformed configuration: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read file referenced by config: {exc}") from None


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def problem_hash(cfg: dict) -> str:
    """Hash of everything that determines the Riccati solution (simulation settings excluded)."""
    return config_hash({k: v for k, v in cfg.items() if k != "simulation"})


def out_dir(args, command: str, cfg: dict) -> Path:
    base = args.out or os.environ.get(OUT_ENV) or "runs"
    path = Path(base) if args.out else Path(base) / f"{command}-{cfg.get('name', 'custom')}"
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror or exc}") from None
    return path


def _delta(spec: ProblemSpec, raw) -> np.ndarray:
    delta = np.asarray(raw, dtype=float)
    return np.broadcast_to(delta, (spec.grid.n_labels, spec.m)).copy()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _solve(spec: ProblemSpec, cfg: dict):
    t0 = time.perf_counter()
    sol = solve_backward(spec, scheme=cfg["scheme"])
    logger.info("solved %s (%d steps, %s) in %.2fs", spec.name, spec.tgrid.n_steps,
                cfg["scheme"], time.perf_counter() - t0)
    return sol


def cmd_solve(args) -> int:
    cfg, base = load_config(args)
    cfg = apply_overrides(cfg, args)
    spec = build_spec(cfg, base)
    sol = _solve(spec, cfg)
    tag = config_hash(cfg)
    header = f"config_hash={tag} seed={cfg['simulation']['seed']}"
    out = out_dir(args, "solve", cfg)
    export_csv(sol, out, header)
    save_solution(sol, out / "riccati.npz", tag=problem_hash(cfg))
    V = value_function(sol, spec, 0)
    summary = {"name": spec.name, "config_hash": tag, "value": V,
               "max_opnorm_Kbar": float(sol.monitor["opnorm_Kbar"].max()),
               "min_eig_K": float(sol.monitor["min_eig_K"].min()),
               "min_eig_O": float(sol.monitor["min_eig_O"].min()),
               "n_steps": spec.tgrid.n_steps, "n_labels": spec.grid.n_labels, "scheme": sol.scheme}
    write_report(summary, out / "value.json")
    width = max(len(k) for k in summary)
    for key, val in summary.items():
        print(f"{key:<{width}}  {format(val, '.10g') if isinstance(val, float) else val}")
    print(f"artifacts written to {out}")
    return 0


def _write_quantiles(path: Path, rows, header: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "label", "variable", "mean", "q05", "q95"])
        for t, i, name, *vals in rows:
            w.writerow([format(float(t), ".17g"), i, name, *(format(float(v), ".17g") for v in vals)])


def cmd_simulate(args) -> int:
    cfg, base = load_config(args)
    cfg.setdefault("simulation", {})
    for key, val in SIMULATE_DEFAULTS.items():
        if getattr(args, key) is None:
            setattr(args, key, val)
    cfg = apply_overrides(cfg, args)
    spec = build_spec(cfg, base)
    sim = cfg["simulation"]
    sol = _solve(spec, cfg)
    ens = simulate_paths(spec, sol, Feedback(sol), sim["n_common"], sim["n_idio"], sim["seed"])
    est = estimate_cost(spec, ens)
    V = value_function(sol, spec, 0)
    tag = config_hash(cfg)
    header = f"config_hash={tag} seed={sim['seed']}"
    out = out_dir(args, "simulate", cfg)
    _write_quantiles(out / "trajectories.csv", trajectory_quantiles(ens), header)
    rep = {"J_hat": est.mean, "se": est.std_error, "n_samples": est.n_samples, "V": V,
           **{f"breakdown_{k}": v for k, v in est.breakdown.items()}}
    write_report(rep, out / "cost.json", {"config_hash": tag, "seed": sim["seed"]})
    within = abs(est.mean - V) <= 3 * est.std_error
    print(f"J_hat = {est.mean:.8g} +/- {est.std_error:.3g}   V = {V:.8g}   "
          f"{'within' if within else 'outside'} 3 SE")
    print(f"artifacts written to {out}")
    return 0


def cmd_verify(args) -> int:
    cfg, base = load_config(args)
    cfg = apply_overrides(cfg, args)
    spec = build_spec(cfg, base)
    sim = cfg["simulation"]
    if args.riccati_cache:
        sol = load_solution(args.riccati_cache, spec, tag=problem_hash(cfg))
    else:
        sol = _solve(spec, cfg)
    t0 = time.perf_counter()
    rep = fundamental_relation_residual(spec, sol, _delta(spec, sim["delta"]), float(sim["eps"]),
                                        int(sim["n_common"]), int(sim["n_idio"]), int(sim["seed"]))
    logger.info("fundamental relation estimated in %.1fs", time.perf_counter() - t0)
    out = out_dir(args, "verify", cfg)
    write_report(rep, out / "report.json", {"config_hash": config_hash(cfg)})
    for key in ("a", "b_crn", "c"):
        r, se = rep[f"residual_{key}"], rep[f"se_{key}"]
        print(f"residual ({key:5s}) {r:+.4e}   3*SE {3 * se:.4e}   {'ok' if abs(r) <= 3 * se else 'FAIL'}")
    print(f"report written to {out / 'report.json'}")
    return 0 if rep["passed"] else 1


def cmd_presets(args) -> int:
    for name in preset_names():
        print(f"{name:16s} {load_preset(name).get('description', '')}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphon-lqc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sim=True):
        p.add_argument("--preset", help="named preset (see 'presets list')")
        p.add_argument("--config", help="path to a JSON problem configuration")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
        p.add_argument("--dt", type=float, help="time step; overrides the configured grid")
        p.add_argument("--scheme", choices=("rk4", "euler"), help="Riccati time stepper")
        p.add_argument("--seed", type=int, help="random seed")
        if sim:
            p.add_argument("--n-common", dest="n_common", type=int, help="common-noise paths")
            p.add_argument("--n-idio", dest="n_idio", type=int, help="idiosyncratic paths per common path")
            p.add_argument("--eps", type=float, help="perturbation size for the optimality check")

    p = sub.add_parser("solve", help="integrate the Riccati system and export it")
    common(p, sim=False)
    p.set_defaults(func=cmd_solve)
    p = sub.add_parser("simulate", help="simulate the optimally controlled system")
    common(p)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("verify", help="Monte-Carlo check of the optimality identity")
    common(p)
    p.add_argument("--riccati-cache", dest="riccati_cache", help="reuse a riccati.npz written by 'solve'")
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("presets", help="inspect bundled presets")
    psub = p.add_subparsers(dest="action", required=True)
    psub.add_parser("list", help="list preset names").set_defaults(func=cmd_presets)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ModelError, RiccatiError, SimulationError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
