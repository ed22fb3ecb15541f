"""Command-line entry point: ``qpeer {simulate,estimate,test,keyplayer,montecarlo}``.

Exit codes: 0 success, 1 invalid input or arguments, 2 numerical failure.
Every run writes ``manifest.json`` to its output directory, including failed runs.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import __version__
from . import diagnostics as dg
from .equilibrium import ConvergenceError
from .estimate import build_instruments, estimate_lim, estimate_quantile
from .instruments import build_type1, build_type2, combine
from .keyplayer import compare_rankings, rank_players, types_from_estimates
from .montecarlo import McConfig, run_montecarlo
from .montecarlo import load_config as load_mc_config
from .network import read_csv, write_csv
from .quantile import check_levels
from .simulate import load_config, preset, save_config, simulate

THREADS_ENV = "QPEER_THREADS"
DEFAULT_LEVELS = "0,1/3,2/3,1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_levels(text: str) -> np.ndarray:
    try:
        vals = [float(Fraction(t.strip())) for t in text.split(",") if t.strip()]
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"cannot parse levels {text!r}") from exc
    return check_levels(vals)


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qpeer", description="Quantile peer-effect models on networks.")
    p.add_argument("--version", action="version", version=f"qpeer {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker processes (default from ${THREADS_ENV}, else 1)")
        if data:
            sp.add_argument("--edges", required=True, help="edge CSV: subnet,src,dst[,weight]")
            sp.add_argument("--nodes", required=True, help="node CSV: subnet,id,y,x1..xd")
            sp.add_argument("--undirected", action="store_true", help="symmetrize edges")
            sp.add_argument("--levels", default=DEFAULT_LEVELS, help="comma-separated quantile levels")
            sp.add_argument("--instruments", choices=("type1", "type2", "combined"), default="type1")
            sp.add_argument("--max-distance", type=int, default=3, choices=(1, 2, 3))
            sp.add_argument("--exact-distance", action="store_true",
                            help="use exactly-k instead of up-to-k peer sets")
            sp.add_argument("--cov-type", choices=("cluster", "robust", "homoskedastic"), default="cluster")

    s = sub.add_parser("simulate", help="simulate a network, covariates and equilibrium outcomes")
    common(s, data=False)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--dgp", default="A", help="preset design A-F")
    g.add_argument("--config", help="DGP JSON configuration")
    s.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("estimate", help="estimate a quantile or linear-in-means model")
    common(e)
    e.add_argument("--model", choices=("quantile", "lim"), default="quantile")

    t = sub.add_parser("test", help="specification tests")
    common(t)
    t.add_argument("--compare", help="alternative levels for the encompassing test")

    k = sub.add_parser("keyplayer", help="influence of each agent and rankings")
    common(k)
    k.add_argument("--model", choices=("quantile", "lim"), default="quantile")
    k.add_argument("--compare", choices=("quantile", "lim"), default=None)
    k.add_argument("--max-school-size", type=int, default=None,
                   help="keep subnetworks with fewer agents than this")

    m = sub.add_parser("montecarlo", help="replicated simulation and estimation")
    common(m, data=False)
    g = m.add_mutually_exclusive_group()
    g.add_argument("--dgp", default="A")
    g.add_argument("--config", help="Monte Carlo JSON configuration")
    m.add_argument("--replications", type=int, default=None)
    m.add_argument("--seed", type=int, default=None)
    return p


def _load(args):
    return read_csv(args.edges, args.nodes, directed=not args.undirected)


def _instruments(args, net, data, levels):
    return build_instruments(net, data, args.instruments, levels, None, args.max_distance, args.exact_distance)


def _estimate(args, model, net, data, levels):
    Z = _instruments(args, net, data, levels)
    if model == "lim":
        return estimate_lim(net, data, Z, cov_type=args.cov_type)
    return estimate_quantile(net, data, levels, Z, cov_type=args.cov_type)


def cmd_simulate(args, out: Path, manifest: dict) -> list[Path]:
    spec = load_config(args.config) if args.config else preset(args.dgp)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    manifest["seed"] = spec.seed
    manifest["dgp"] = spec.to_dict()
    sim = simulate(spec)
    paths = list(write_csv(sim.network, sim.data, out))
    paths.append(save_config(spec, out / "dgp.json"))
    return paths


def cmd_estimate(args, out: Path, manifest: dict) -> list[Path]:
    net, data = _load(args)
    levels = parse_levels(args.levels)
    res = _estimate(args, args.model, net, data, levels)
    res.diagnostics["weak_instrument"] = dg.weak_instrument_rank(res.fit).row()
    res.diagnostics["sargan_overid"] = dg.sargan_overid(res.fit).row()
    res.to_json(out / "result.json")
    return [out / "result.json"]


def cmd_test(args, out: Path, manifest: dict) -> list[Path]:
    net, data = _load(args)
    levels = parse_levels(args.levels)
    Z1 = build_type1(net, data, max_distance=args.max_distance, exact=args.exact_distance)
    base = estimate_quantile(net, data, levels, Z1, cov_type=args.cov_type).fit
    results = {}
    if args.compare:
        other = estimate_quantile(net, data, parse_levels(args.compare), Z1).fit
        results["encompassing_base_vs_compare"] = dg.encompassing_test(base, other, args.cov_type)
        results["encompassing_compare_vs_base"] = dg.encompassing_test(other, base, args.cov_type)
    Z2 = build_type2(net, data, levels)
    results["sargan_type2"] = dg.sargan_type2(base, Z2)
    comb = combine(Z1, build_type2(net, data, levels, args.max_distance))
    fit_c = estimate_quantile(net, data, levels, comb).fit
    results["wald_type2"] = dg.wald_type2(base, fit_c, "robust")
    results["weak_instrument_type1"] = dg.weak_instrument_rank(base)
    results["weak_instrument_combined"] = dg.weak_instrument_rank(fit_c)
    results["sargan_overid"] = dg.sargan_overid(base)
    csv_path = dg.write_results(results, out / "tests.csv")
    json_path = out / "tests.json"
    json_path.write_text(json.dumps({k: v.row() for k, v in results.items()}, indent=2, default=_plain))
    return [csv_path, json_path]


def cmd_keyplayer(args, out: Path, manifest: dict) -> list[Path]:
    net, data = _load(args)
    levels = parse_levels(args.levels)
    reports = {}
    for model in dict.fromkeys([args.model] + ([args.compare] if args.compare else [])):
        res = _estimate(args, model, net, data, levels)
        alpha, ctx = types_from_estimates(res, net, data)
        reports[model] = rank_players(res.peer_params(), net, alpha, ctx, max_size=args.max_school_size)
        manifest.setdefault("estimates", {})[model] = res.structural
    main = reports[args.model]
    if args.compare and args.compare != args.model:
        cmp = compare_rankings(main, reports[args.compare])
        manifest["rank_correlation"] = cmp.correlation
        return [cmp.to_csv(out / "ranks.csv", names=(args.model, args.compare))]
    return [main.to_csv(out / "ranks.csv")]


def cmd_montecarlo(args, out: Path, manifest: dict) -> list[Path]:
    cfg = load_mc_config(args.config) if args.config else McConfig(dgp=preset(args.dgp))
    d = cfg.to_dict()
    if args.replications is not None:
        d["replications"] = args.replications
    if args.seed is not None:
        d["seed"] = args.seed
    d["workers"] = args.threads
    cfg = McConfig.from_dict(d)
    manifest["seed"] = cfg.seed
    manifest["montecarlo"] = cfg.to_dict()
    report = run_montecarlo(cfg)
    manifest["completed"] = report.completed
    manifest["failures"] = len(report.failures)
    return report.write(out)


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "test": cmd_test,
    "keyplayer": cmd_keyplayer,
    "montecarlo": cmd_montecarlo,
}


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _versions() -> dict:
    return {
        "qpeer": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "bit_generator": "Philox",
    }


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        manifest = {"command": None, "argv": argv, "versions": _versions(), "error": str(exc), "exit_code": 1}
        _write_manifest(_out_from_argv(argv), manifest)
        return 1
    out = Path(args.out)
    manifest = {"command": args.command, "argv": argv, "args": vars(args), "versions": _versions()}
    code = 0
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = COMMANDS[args.command](args, out, manifest)
        manifest["outputs"] = [str(p) for p in paths]
    except (ArithmeticError, ConvergenceError, np.linalg.LinAlgError) as exc:
        code = 2
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    except (ValueError, KeyError, OSError) as exc:
        code = 1
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    if code:
        print(f"qpeer {args.command}: {manifest['error']}", file=sys.stderr)
    manifest["exit_code"] = code
    if not _write_manifest(out, manifest):
        code = code or 1
    return code


def _out_from_argv(argv) -> Path:
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if a.startswith("--out="):
            return Path(a.split("=", 1)[1])
    return Path("out")


def _write_manifest(out: Path, manifest: dict) -> bool:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_plain))
    except OSError as exc:
        print(f"qpeer: cannot write manifest: {exc}", file=sys.stderr)
        return False
    return True


if __name__ == "__main__":
    sys.exit(main())
