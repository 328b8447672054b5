"""
Command-line front end.

Every run writes its outputs plus ``manifest.json`` into ``--out``; the
manifest records the full argument list, a snapshot of the model config, the
seed and SHA-256 digests of the outputs, so ``blowup replay DIR`` can re-run it
and confirm the outputs are bitwise identical.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure (including
misaligned inputs to ``compare``), 3 a verification check failed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import re
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .expr import ExprError
from .feller import FellerQuad, feller_classify
from .model import ConfigError, dumps_config, load_config, make_fk
from .montecarlo import (check_martingale, estimate_feynman_kac, estimate_u,
                         estimates_to_json, write_estimates_csv)
from .oracles import catalog, catalog_entry
from .paths import SimConfig
from .pde import AlignmentError, PDEGrid, minimal_solution, solve_cauchy
from .verify import (ContinuityBoundParams, continuity_check, ito_residual, make_jet,
                     viscosity_residual)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# argument helpers


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _range(text: str) -> tuple[float, float]:
    parts = text.split(":")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}")
    return float(parts[0]), float(parts[1])


def _m_range(text: str) -> list[int]:
    parts = text.split(":")
    try:
        if len(parts) == 1:
            return [int(parts[0])]
        if len(parts) == 2:
            return list(range(int(parts[0]), int(parts[1]) + 1))
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"expected M or M1:M2, got {text!r}")


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blowup", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("--version", action="version", version=f"blowup {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    run = _Parser(add_help=False)
    run.add_argument("--out", default="blowup-out", help="output directory")
    run.add_argument("--seed", type=_seed, help="64-bit seed (generated and recorded if omitted)")
    run.add_argument("--workers", type=int, default=1)

    mdl = _Parser(add_help=False)
    mdl.add_argument("--model", help="catalog model name")
    mdl.add_argument("--config", help="TOML model config")
    mdl.add_argument("--f", dest="f_expr", help="override the payoff f")
    mdl.add_argument("--h", dest="h_expr", help="override the potential h")

    sim = _Parser(add_help=False)
    sim.add_argument("--x", type=_floats, required=True, help="start point, comma separated")
    sim.add_argument("--dt", type=float, default=1e-3)
    sim.add_argument("--m", type=int, help="truncation index")

    def mc(name, help_):
        s = sub.add_parser(name, parents=[run, mdl, sim], help=help_)
        s.add_argument("--t", type=_floats, required=True, help="times, comma separated")
        s.add_argument("--paths", type=int, default=10000)
        return s

    mc("estimate", "Monte Carlo estimate of P_x[S > t]")
    mc("fk", "Monte Carlo estimate of the Feynman-Kac functional")

    def pde(name, help_, theta, upwind):
        s = sub.add_parser(name, parents=[run, mdl], help=help_)
        s.add_argument("--dx", type=float, default=1e-2)
        s.add_argument("--dt", type=float, default=1e-3)
        s.add_argument("--t-max", type=float, required=True)
        s.add_argument("--theta", type=float, default=theta)
        s.add_argument("--upwind", action=argparse.BooleanOptionalAction, default=upwind)
        s.add_argument("--save-every", type=int, default=1)
        return s

    s = pde("solve", "solve the absorbed Cauchy problem on one truncation", 0.5, False)
    s.add_argument("--m", type=int, help="truncation index (omit for a bounded domain)")
    s.add_argument("--force", action="store_true", help="allow an unstable explicit step")
    s = pde("minimal", "monotone limit over truncations", 1.0, True)
    s.add_argument("--m-range", type=_m_range, required=True, help="M1:M2")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--window", type=_range, help="comparison window lo:hi (1D)")
    s.add_argument("--allow-degenerate", action="store_true")

    s = sub.add_parser("feller", parents=[run, mdl], help="Feller test for explosion")
    s.add_argument("--c", type=float, help="reference point")
    s.add_argument("--threshold", type=float, default=1e8)

    s = sub.add_parser("verify", parents=[run, mdl], help="Ito or viscosity residual check")
    s.add_argument("--check", choices=("ito", "viscosity"), required=True)
    s.add_argument("--x", type=_floats, help="start point (ito)")
    s.add_argument("--t-star", type=float, default=0.2)
    s.add_argument("--delta", type=float)
    s.add_argument("--paths", type=int, default=10000)
    s.add_argument("--phi", default="x^2")
    s.add_argument("--phi-t", default="0")
    s.add_argument("--grad", default="2*x", help="gradient, comma separated for n > 1")
    s.add_argument("--hess", default="2", help="Hessian rows separated by ';'")
    s.add_argument("--dt", type=float, default=1e-3)
    s.add_argument("--dx", type=float, default=2e-2)
    s.add_argument("--t-max", type=float, default=0.2)
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--t-window", type=_range)
    s.add_argument("--m", type=int)

    s = sub.add_parser("martingale", parents=[run, mdl, sim], help="nested martingale check")
    s.add_argument("--t-star", type=float, required=True)
    s.add_argument("--delta", type=float, required=True)
    s.add_argument("--outer", type=int, default=500)
    s.add_argument("--inner", type=int, default=500)

    s = sub.add_parser("continuity", parents=[run, mdl, sim], help="time-continuity modulus check")
    s.add_argument("--t", type=_floats, required=True)
    s.add_argument("--paths", type=int, default=10000)
    s.add_argument("--mode", choices=("smooth_f", "holder_f"), default="smooth_f")
    s.add_argument("--C0", type=float, required=True)
    s.add_argument("--C", type=float)
    s.add_argument("--C-alpha", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--C-prime", type=float)

    s = sub.add_parser("compare", parents=[run], help="align an MC run with a PDE run")
    s.add_argument("--mc", required=True, help="estimates CSV or its run directory")
    s.add_argument("--pde", required=True, help="solution CSV or its run directory")
    s.add_argument("--tol", type=float, default=0.0,
                   help="absolute agreement floor added to 3*std_error")

    s = sub.add_parser("catalog", parents=[run], help="list catalog models and emit configs")
    s.add_argument("--emit", action="store_true", help="write <name>.toml files into --out")

    s = sub.add_parser("replay", help="re-run a manifest and compare outputs")
    s.add_argument("manifest", help="manifest.json or the directory holding it")
    s.add_argument("--out", help="directory for the replayed outputs (default: temporary)")
    return p


# --------------------------------------------------------------------------
# shared pieces


def _load_model(args):
    if bool(args.model) == bool(args.config):
        raise UsageError("exactly one of --model or --config is required")
    if args.model:
        try:
            e = catalog_entry(args.model)
        except KeyError as exc:
            raise UsageError(exc.args[0]) from None
        model, fk = e.model, e.fk
    else:
        model, fk = load_config(args.config)
    if args.f_expr is not None or args.h_expr is not None:
        fk = make_fk(args.f_expr if args.f_expr is not None else fk.f.source,
                     args.h_expr if args.h_expr is not None else fk.h.source,
                     model.n, fk.c0)
    return model, fk


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and math.isinf(o):
        return "inf"
    raise TypeError(f"not serializable: {type(o)}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _sim_cfg(args, t_max):
    return SimConfig(args.dt, t_max, args.m, args.seed, 0)


# --------------------------------------------------------------------------
# commands; each returns (exit_code, payload) and writes into out


def _cmd_mc(args, out: Path, ctx):
    model, fk = ctx["model"], ctx["fk"]
    cfg = _sim_cfg(args, max(args.t))
    if args.command == "estimate":
        est = estimate_u(model, args.x, args.t, args.paths, cfg, workers=args.workers)
    else:
        est = estimate_feynman_kac(model, fk, args.x, args.t, args.paths, cfg,
                                   workers=args.workers)
    write_estimates_csv(est, out / "estimates.csv")
    (out / "estimates.json").write_text(estimates_to_json(
        est, quantity="U" if args.command == "estimate" else "feynman_kac",
        model=model.name, dt=args.dt, truncation_index=args.m) + "\n")
    return EXIT_OK, {"estimates": [e.as_dict() for e in est]}


def _cmd_solve(args, out: Path, ctx):
    grid = PDEGrid(args.dx, args.dt, args.t_max, args.theta, args.upwind, args.save_every)
    sol = solve_cauchy(ctx["model"], ctx["fk"], args.m, grid, force=args.force)
    sol.write(out / "solution")
    return EXIT_OK, {"nodes": len(sol.x), "times": len(sol.times)}


def _cmd_minimal(args, out: Path, ctx):
    grid = PDEGrid(args.dx, args.dt, args.t_max, args.theta, args.upwind, args.save_every)
    window = None if args.window is None else [args.window]
    res = minimal_solution(ctx["model"], ctx["fk"], grid, args.m_range, args.tol, window,
                           args.allow_degenerate)
    res.solution.write(out / "solution")
    _write_json(out / "convergence.json", res.as_dict())
    return EXIT_OK, res.as_dict()


def _cmd_feller(args, out: Path, ctx):
    rep = feller_classify(ctx["model"], args.c, FellerQuad(threshold=args.threshold))
    d = rep.as_dict()
    _write_json(out / "feller.json", d)
    print(json.dumps({k: d[k] for k in ("classification", "v_left", "v_right", "c")}, indent=2))
    return EXIT_OK, d


def _cmd_verify(args, out: Path, ctx):
    model, fk = ctx["model"], ctx["fk"]
    if args.check == "ito":
        if args.x is None:
            raise UsageError("--x is required for --check ito")
        grad = [g for g in args.grad.split(",")]
        hess = [row.split(",") for row in args.hess.split(";")]
        jet = make_jet(args.phi, args.phi_t, grad, hess, model.n)
        cfg = SimConfig(args.dt, args.t_star, args.m, args.seed, 0)
        r = ito_residual(model, fk, jet, args.t_star, args.x, args.paths, cfg, args.delta)
        ok = abs(r.martingale_mean) <= 3 * r.martingale_std_error
        d = {"check": "ito", "pass": ok, "rule": "|mean martingale part| <= 3*SE",
             "stats": r.as_dict()}
    else:
        grid = PDEGrid(args.dx, args.dt, args.t_max, 0.5, False)
        sol = solve_cauchy(model, fk, args.m, grid)
        window = args.t_window or (args.t_max / 4, args.t_max)
        tab = viscosity_residual(sol, model, fk, args.levels, window)
        ok = tab.median_decreasing
        d = {"check": "viscosity", "pass": ok, "rule": "median residual decreases",
             "table": tab.as_dict()}
    _write_json(out / "verify.json", d)
    return (EXIT_OK if ok else EXIT_VERIFY), d


def _cmd_martingale(args, out: Path, ctx):
    cfg = _sim_cfg(args, args.t_star)
    r = check_martingale(ctx["model"], ctx["fk"], args.t_star, args.x, args.delta,
                         args.outer, args.inner, cfg, workers=args.workers)
    ok = r.discrepancy <= 3 * r.std_error
    d = {"check": "martingale", "pass": ok, "rule": "|lhs - rhs| <= 3*combined SE",
         **r.as_dict()}
    _write_json(out / "martingale.json", d)
    return (EXIT_OK if ok else EXIT_VERIFY), d


def _cmd_continuity(args, out: Path, ctx):
    params = ContinuityBoundParams(args.C0, args.mode, args.C, args.C_alpha, args.alpha,
                                   args.C_prime)
    cfg = _sim_cfg(args, max(args.t))
    rep = continuity_check(ctx["model"], ctx["fk"], params, args.x, args.t, args.paths, cfg,
                           workers=args.workers)
    d = {"check": "continuity", "pass": rep.ok, **rep.as_dict()}
    _write_json(out / "continuity.json", d)
    return (EXIT_OK if rep.ok else EXIT_VERIFY), d


def _find(path: str, default_name: str) -> Path:
    p = Path(path)
    return p / default_name if p.is_dir() else p


def _read_rows(path: Path):
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= 1e-9 * max(1.0, abs(a), abs(b))


def _cmd_compare(args, out: Path, ctx):
    mc_rows = _read_rows(_find(args.mc, "estimates.csv"))
    pde_rows = _read_rows(_find(args.pde, "solution.csv"))
    if not mc_rows:
        raise UsageError("no Monte Carlo rows")
    if pde_rows and "x" not in pde_rows[0]:
        raise UsageError("compare supports one-dimensional PDE output")
    index = {}
    for r in pde_rows:
        index.setdefault(round(float(r["t"]), 9), []).append((float(r["x"]), float(r["u"])))
    points, ok_all = [], True
    for r in mc_rows:
        t = float(r["t"])
        xs = [float(v) for v in r["x"].split(";")]
        if len(xs) != 1:
            raise UsageError("compare supports one-dimensional estimates")
        cands = [u for x, u in index.get(round(t, 9), []) if _close(x, xs[0])]
        if not cands:
            raise AlignmentError(f"(t={t}, x={xs[0]}) is not a node of the PDE output")
        v, se = float(r["value"]), float(r["std_error"])
        allow = max(3 * se, args.tol)
        ok = abs(v - cands[0]) <= allow
        ok_all &= ok
        points.append({"t": t, "x": xs[0], "mc": v, "std_error": se, "pde": cands[0],
                       "diff": v - cands[0], "allowed": allow, "agree": ok})
    d = {"agree": ok_all, "rule": "|mc - pde| <= max(3*std_error, tol)", "tol": args.tol,
         "points": points}
    _write_json(out / "compare.json", d)
    return (EXIT_OK if ok_all else EXIT_VERIFY), d


def _cmd_catalog(args, out: Path, ctx):
    entries = catalog()
    rows = []
    for name, e in entries.items():
        rows.append({"name": name, "explosive": e.explosive, "description": e.description,
                     "closed_form": e.closed_form, "used_by": list(e.used_by)})
        print(f"{name:28s} {'explosive' if e.explosive else 'conservative':13s} {e.description}")
        if args.emit:
            (out / f"{name}.toml").write_text(e.config())
    _write_json(out / "catalog.json", rows)
    return EXIT_OK, {"entries": rows}


_COMMANDS = {
    "estimate": _cmd_mc, "fk": _cmd_mc, "solve": _cmd_solve, "minimal": _cmd_minimal,
    "feller": _cmd_feller, "verify": _cmd_verify, "martingale": _cmd_martingale,
    "continuity": _cmd_continuity, "compare": _cmd_compare, "catalog": _cmd_catalog,
}
_NEEDS_MODEL = {"estimate", "fk", "solve", "minimal", "feller", "verify", "martingale",
                "continuity"}


# --------------------------------------------------------------------------
# manifest and replay


def _strip_options(argv: list[str], names: set[str]) -> list[str]:
    """Drop ``--name value`` and ``--name=value`` for the given option names."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        key = a.split("=", 1)[0]
        if key in names:
            skip = "=" not in a
            continue
        out.append(a)
    return out


_NEGATIVE = re.compile(r"^-\.?\d")


def _attach_negative_values(argv: list[str]) -> list[str]:
    """Turn ``--opt -1:1`` into ``--opt=-1:1``; argparse reads the bare form as a flag."""
    out = []
    for a in argv:
        if out and out[-1].startswith("--") and "=" not in out[-1] and _NEGATIVE.match(a):
            out[-1] = f"{out[-1]}={a}"
        else:
            out.append(a)
    return out


def _run(argv: list[str]) -> int:
    args = build_parser().parse_args(_attach_negative_values(argv))
    if args.command is None:
        raise UsageError("a subcommand is required (see --help)")
    if args.command == "replay":
        return _replay(args)
    if getattr(args, "workers", 1) < 1:
        raise UsageError("--workers must be >= 1")
    if args.seed is None:
        args.seed = int(np.random.SeedSequence().generate_state(1, dtype=np.uint64)[0])
    ctx = {}
    if args.command in _NEEDS_MODEL:
        ctx["model"], ctx["fk"] = _load_model(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    code, _ = _COMMANDS[args.command](args, out, ctx)
    wall = time.perf_counter() - t0
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name != MANIFEST)
    manifest = {
        "command": args.command,
        "argv": _strip_options(list(argv), {"--out", "--seed"}) + ["--seed", str(args.seed)],
        "config": dumps_config(ctx["model"], ctx["fk"]) if "model" in ctx else None,
        "seed": args.seed,
        "version": __version__,
        "wall_time_s": wall,
        "exit_code": code,
        "outputs": {p.name: _sha256(p) for p in files},
    }
    _write_json(out / MANIFEST, manifest)
    return code


def _replay(args) -> int:
    src = _find(args.manifest, MANIFEST)
    try:
        man = json.loads(src.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{src}: cannot read manifest ({exc})") from None
    tmp = None
    if args.out:
        out = Path(args.out)
    else:
        tmp = tempfile.TemporaryDirectory(prefix="blowup-replay-")
        out = Path(tmp.name) / "out"
    try:
        argv = list(man["argv"])
        if man.get("config") is not None:
            out.mkdir(parents=True, exist_ok=True)
            cfg_path = out.parent / (out.name + "-config.toml")
            cfg_path.write_text(man["config"])
            argv = _strip_options(argv, {"--model", "--config"}) + ["--config", str(cfg_path)]
        argv += ["--out", str(out)]
        code = _run(argv)
        new = json.loads((out / MANIFEST).read_text())
        files = {}
        for name, digest in man["outputs"].items():
            files[name] = digest == new["outputs"].get(name)
        same = all(files.values()) and set(new["outputs"]) == set(man["outputs"])
        print(json.dumps({"identical": same, "files": files, "exit_code": code}, indent=2))
        return EXIT_OK if same else EXIT_VERIFY
    finally:
        if tmp is not None:
            tmp.cleanup()


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _run(argv)
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (UsageError, ConfigError, ExprError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AlignmentError as exc:
        print(f"alignment error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
