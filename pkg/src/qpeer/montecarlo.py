"""Replicated simulate -> estimate -> test runs with summary tables.

Replication ``r`` draws from the ``r``-th child of ``SeedSequence(seed)``, so
results do not depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .equilibrium import LimParams
from .estimate import estimate_lim, estimate_quantile
from .instruments import build_type1, build_type2, combine
from .quantile import uniform_levels
from .simulate import DgpSpec, make_rng, preset, simulate

TESTS = ("encompassing", "type2", "rank")


@dataclass(frozen=True)
class McConfig:
    dgp: DgpSpec = field(default_factory=lambda: preset("A"))
    replications: int = 200
    levels: int = 4
    compare_levels: tuple = (3, 5)
    instruments: tuple = ("type1", "combined")
    tests: tuple = TESTS
    lim: bool = True
    max_distance: int = 3
    type2_test_distance: int = 1
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        unknown = set(self.instruments) - {"type1", "combined"}
        if unknown or not self.instruments:
            raise ValueError(f"instruments must be drawn from type1, combined; got {sorted(unknown)}")
        unknown = set(self.tests) - set(TESTS)
        if unknown:
            raise ValueError(f"unknown tests {sorted(unknown)}")
        if self.levels < 1 or any(k < 1 for k in self.compare_levels):
            raise ValueError("level counts must be positive")

    def to_dict(self) -> dict:
        return {
            "dgp": self.dgp.to_dict(),
            "replications": self.replications,
            "levels": self.levels,
            "compare_levels": list(self.compare_levels),
            "instruments": list(self.instruments),
            "tests": list(self.tests),
            "lim": self.lim,
            "max_distance": self.max_distance,
            "type2_test_distance": self.type2_test_distance,
            "seed": self.seed,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "McConfig":
        d = dict(d)
        dgp = d.pop("dgp", {})
        dgp = preset(dgp) if isinstance(dgp, str) else DgpSpec.from_dict(dgp)
        for k in ("compare_levels", "instruments", "tests"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(dgp=dgp, **d)


def load_config(path) -> McConfig:
    with open(path) as fh:
        return McConfig.from_dict(json.load(fh))


def true_values(dgp: DgpSpec) -> dict:
    p = dgp.params
    if isinstance(p, LimParams):
        return {("lim", "lambda"): p.lam, ("lim", "lambda2"): p.lambda2}
    out = {("quantile", f"lambda[{t:.4g}]"): float(v) for t, v in zip(p.levels, p.lambda_tau)}
    out[("quantile", "lambda2")] = p.lambda2
    return out


def _record(est: dict, label: str, res):
    names = [n for n in res.structural if n.startswith("lambda")]
    for n in names:
        est[f"{label}|{n}"] = (res.structural[n], res.structural_se[n])


def _test(tests: dict, label: str, t: dg.TestResult):
    tests[label] = (t.statistic, t.p_value, t.df)


def run_replication(config: McConfig, index: int, seed_seq: np.random.SeedSequence) -> dict:
    """One replication; returns ``{"estimates": {label: (value, se)}, "tests": {label: (stat, p, df)}}``."""
    sim = simulate(config.dgp, make_rng(seed_seq))
    net, data = sim.network, sim.data
    base = uniform_levels(config.levels)
    Z1 = build_type1(net, data, max_distance=config.max_distance)
    est, tests = {}, {}
    fits = {}
    for kind in config.instruments:
        Z = Z1 if kind == "type1" else combine(Z1, build_type2(net, data, base, config.max_distance))
        res = estimate_quantile(net, data, base, Z)
        _record(est, f"quantile|{kind}", res)
        fits[kind] = res.fit
        if "rank" in config.tests:
            _test(tests, f"kp|{kind}", dg.weak_instrument_rank(res.fit))
    if config.lim:
        _record(est, "lim|type1", estimate_lim(net, data, Z1))
    if "encompassing" in config.tests:
        fit1 = fits.get("type1") or estimate_quantile(net, data, base, Z1).fit
        for k in config.compare_levels:
            other = estimate_quantile(net, data, uniform_levels(k), Z1).fit
            a, b = (other, fit1) if k < config.levels else (fit1, other)
            lo, hi = min(k, config.levels), max(k, config.levels)
            _test(tests, f"encompassing|{lo}v{hi}", dg.encompassing_test(a, b))
    if "type2" in config.tests:
        fit1 = fits.get("type1") or estimate_quantile(net, data, base, Z1).fit
        Z2 = build_type2(net, data, base, config.type2_test_distance)
        _test(tests, "sargan_type2", dg.sargan_type2(fit1, Z2))
        if "combined" in fits:
            _test(tests, "wald_type2", dg.wald_type2(fit1, fits["combined"], "robust"))
    return {"index": index, "estimates": est, "tests": tests}


def _safe_replication(args) -> dict:
    config, index, ss = args
    try:
        return run_replication(config, index, ss)
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        return {"index": index, "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class McReport:
    config: McConfig
    estimates: list[dict]
    tests: list[dict]
    completed: int
    failures: list[dict]
    raw: list[dict] = field(repr=False, default_factory=list)

    def estimate(self, label: str) -> dict:
        for row in self.estimates:
            if row["estimand"] == label:
                return row
        raise KeyError(label)

    def test(self, label: str) -> dict:
        for row in self.tests:
            if row["test"] == label:
                return row
        raise KeyError(label)

    def write(self, outdir) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = [
            _write_csv(outdir / "estimations.csv", self.estimates),
            _write_csv(outdir / "tests.csv", self.tests),
            outdir / "montecarlo.json",
        ]
        summary = {
            "config": self.config.to_dict(),
            "completed": self.completed,
            "failures": self.failures,
            "estimations": self.estimates,
            "tests": self.tests,
        }
        paths[-1].write_text(json.dumps(summary, indent=2, default=_nan_to_none))
        return paths


def _nan_to_none(v):
    return None if isinstance(v, float) and math.isnan(v) else float(v)


def _write_csv(path: Path, rows: list[dict]) -> Path:
    with path.open("w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return path


def _sd(v: np.ndarray) -> float:
    return float(np.std(v, ddof=1)) if v.size > 1 else float("nan")


def aggregate(config: McConfig, runs: list[dict]) -> McReport:
    ok = [r for r in runs if "error" not in r]
    failures = [{"replication": r["index"], "error": r["error"]} for r in runs if "error" in r]
    truth = true_values(config.dgp)
    est_rows, test_rows = [], []
    labels = list(dict.fromkeys(k for r in ok for k in r["estimates"]))
    for lab in labels:
        vals = np.array([r["estimates"][lab] for r in ok if lab in r["estimates"]], dtype=float)
        model, _, name = lab.split("|")
        est_rows.append({
            "estimand": lab,
            "true": truth.get((model, name), float("nan")),
            "mean": float(vals[:, 0].mean()),
            "sd": _sd(vals[:, 0]),
            "mean_se": float(vals[:, 1].mean()),
            "n": int(vals.shape[0]),
        })
    labels = list(dict.fromkeys(k for r in ok for k in r["tests"]))
    for lab in labels:
        vals = np.array([r["tests"][lab] for r in ok if lab in r["tests"]], dtype=float)
        defined = ~np.isnan(vals[:, 1])
        p = vals[defined, 1]
        test_rows.append({
            "test": lab,
            "mean_stat": float(vals[defined, 0].mean()) if p.size else float("nan"),
            "sd_stat": _sd(vals[defined, 0]),
            "mean_df": float(vals[defined, 2].mean()) if p.size else float("nan"),
            "reject_05": float((p < 0.05).mean()) if p.size else float("nan"),
            "reject_10": float((p < 0.10).mean()) if p.size else float("nan"),
            "n_defined": int(p.size),
        })
    return McReport(config, est_rows, test_rows, len(ok), failures, runs)


def run_montecarlo(config: McConfig, progress=None) -> McReport:
    """Run every replication, then aggregate.  Failed replications are counted, not dropped silently."""
    children = np.random.SeedSequence(config.seed).spawn(config.replications)
    jobs = [(config, r, ss) for r, ss in enumerate(children)]
    if config.workers == 1:
        runs = []
        for job in jobs:
            runs.append(_safe_replication(job))
            if progress:
                progress(len(runs), config.replications)
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            runs = list(pool.map(_safe_replication, jobs))
    runs.sort(key=lambda r: r["index"])
    return aggregate(config, runs)
