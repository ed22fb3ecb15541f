"""Synthetic networks, covariates and equilibrium outcomes.

Random numbers come from numpy's Philox counter-based generator.  A replication
stream is derived from ``SeedSequence(seed).spawn``, so replication ``r`` draws
the same numbers whether replications run serially or in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .equilibrium import LimParams, PeerEffectParams, solve_equilibrium
from .network import Dataset, Network, make_dataset

# categorical law on 0..10 out-links: P(0)=.22, mean 3.471, P(d<=4)=.64
DEFAULT_DEGREE_LAW = (0.22, 0.105, 0.105, 0.105, 0.105, 0.09, 0.09, 0.07, 0.06, 0.039, 0.011)
MC_LEVELS = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)

_PRESET_LAMBDAS = {
    "A": (0.0, 0.05, 0.2, 0.3),
    "B": (0.3, 0.2, 0.05, 0.0),
    "C": (0.0, 0.275, 0.275, 0.0),
    "D": (0.275, 0.0, 0.0, 0.275),
    "E": (-0.05, 0.35, 0.15, 0.1),
}


def make_rng(seed) -> np.random.Generator:
    """Philox generator; ``seed`` may be an int or a ``SeedSequence``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def replication_rngs(seed: int, count: int) -> list[np.random.Generator]:
    return [make_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


@dataclass(frozen=True)
class DgpSpec:
    family: str = "quantile"
    S: int = 50
    n_s: int = 50
    degree_law: tuple = DEFAULT_DEGREE_LAW
    beta1: tuple = (-0.5, 1.0)
    beta2: tuple = (-0.2, 0.6)
    intercept: float = 4.0
    sigma: float = 0.7
    params: PeerEffectParams | LimParams = field(
        default_factory=lambda: PeerEffectParams(MC_LEVELS, _PRESET_LAMBDAS["A"], 0.2)
    )
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("quantile", "lim"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "quantile" and not isinstance(self.params, PeerEffectParams):
            raise ValueError("quantile family needs PeerEffectParams")
        if self.family == "lim" and not isinstance(self.params, LimParams):
            raise ValueError("lim family needs LimParams")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        law = np.asarray(self.degree_law, dtype=float)
        if law.ndim != 1 or np.any(law < 0) or not np.isclose(law.sum(), 1.0, atol=1e-9):
            raise ValueError("degree_law must be a probability vector")
        if law.size - 1 >= self.n_s and law[self.n_s - 1 :].sum() > 0:
            raise ValueError(f"degree law allows {law.size - 1} links but n_s = {self.n_s}")
        if len(self.beta1) != len(self.beta2):
            raise ValueError("beta1 and beta2 must have the same length")
        if len(self.beta1) != 2:
            raise ValueError("covariate generator produces 2 covariates; beta1 must have length 2")
        if not self.params.stable:
            raise ValueError("peer effects violate sum |lambda| < 1")
        object.__setattr__(self, "degree_law", tuple(float(p) for p in law))
        object.__setattr__(self, "beta1", tuple(float(b) for b in self.beta1))
        object.__setattr__(self, "beta2", tuple(float(b) for b in self.beta2))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("family", "S", "n_s", "intercept", "sigma", "seed")}
        d["degree_law"] = list(self.degree_law)
        d["beta1"], d["beta2"] = list(self.beta1), list(self.beta2)
        if self.family == "lim":
            d["lambda"], d["lambda2"] = self.params.lam, self.params.lambda2
        else:
            d["levels"] = self.params.levels.tolist()
            d["lambda_tau"] = self.params.lambda_tau.tolist()
            d["lambda2"] = self.params.lambda2
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DgpSpec":
        d = dict(d)
        base = preset(d.pop("preset")) if "preset" in d else cls()
        family = d.pop("family", base.family)
        lam = d.pop("lambda", None)
        lam_tau = d.pop("lambda_tau", None)
        levels = d.pop("levels", None)
        lam2 = d.pop("lambda2", None)
        if family == "lim":
            old = base.params if isinstance(base.params, LimParams) else LimParams(0.0, 0.0)
            params = LimParams(
                old.lam if lam is None else float(lam), old.lambda2 if lam2 is None else float(lam2)
            )
        else:
            old = base.params if isinstance(base.params, PeerEffectParams) else cls().params
            params = PeerEffectParams(
                old.levels if levels is None else levels,
                old.lambda_tau if lam_tau is None else lam_tau,
                old.lambda2 if lam2 is None else lam2,
            )
        unknown = set(d) - {"S", "n_s", "degree_law", "beta1", "beta2", "intercept", "sigma", "seed"}
        if unknown:
            raise ValueError(f"unknown DGP keys: {sorted(unknown)}")
        return replace(base, family=family, params=params, **d)


def preset(name: str, **overrides) -> DgpSpec:
    """Monte Carlo designs A-E (quantile model) and F (linear-in-means)."""
    name = name.upper()
    if name == "F":
        spec = DgpSpec(family="lim", params=LimParams(0.55, 0.0))
    elif name in _PRESET_LAMBDAS:
        spec = DgpSpec(params=PeerEffectParams(MC_LEVELS, _PRESET_LAMBDAS[name], 0.2))
    else:
        raise ValueError(f"unknown DGP {name!r}; choose from A-F")
    return replace(spec, **overrides) if overrides else spec


def load_config(path) -> DgpSpec:
    with open(path) as fh:
        return DgpSpec.from_dict(json.load(fh))


def gen_network(spec: DgpSpec, rng: np.random.Generator) -> Network:
    """Out-degrees from the degree law; peers uniform without replacement in the subnetwork."""
    n = spec.n_s
    law = np.asarray(spec.degree_law)
    mats = []
    for _ in range(spec.S):
        deg = rng.choice(law.size, size=n, p=law)
        # random ranking of candidate peers per row; self ranked last
        keys = rng.random((n, n))
        np.fill_diagonal(keys, np.inf)
        order = np.argsort(keys, axis=1)
        take = np.arange(n)[None, :] < deg[:, None]
        rows = np.repeat(np.arange(n), deg)
        cols = order[take]
        mats.append(sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)))
    return Network.from_adjacency(mats)


def gen_covariates(spec: DgpSpec, network: Network, rng: np.random.Generator) -> Dataset:
    x1 = rng.standard_normal(network.n)
    x2 = rng.poisson(2.0, network.n).astype(float)
    return make_dataset(network, np.column_stack([x1, x2]))


@dataclass(frozen=True)
class Simulation:
    spec: DgpSpec
    network: Network
    data: Dataset
    alpha: np.ndarray
    eps: np.ndarray


def agent_types(spec: DgpSpec, data: Dataset, eps) -> np.ndarray:
    alpha = spec.intercept + data.x @ np.asarray(spec.beta1) + eps
    return alpha + np.where(data.iso, 0.0, data.xbar_filled @ np.asarray(spec.beta2))


def simulate_outcomes(
    spec: DgpSpec, network: Network, data: Dataset, rng: np.random.Generator, tol: float = 1e-10
) -> Simulation:
    eps = spec.sigma * rng.standard_normal(network.n)
    alpha = agent_types(spec, data, eps)
    y = solve_equilibrium(spec.params, network, alpha, tol=tol)
    return Simulation(spec, network, data.with_outcome(y), alpha, eps)


def simulate(spec: DgpSpec, rng: np.random.Generator | None = None) -> Simulation:
    rng = make_rng(spec.seed) if rng is None else rng
    net = gen_network(spec, rng)
    data = gen_covariates(spec, net, rng)
    return simulate_outcomes(spec, net, data, rng)


def save_config(spec: DgpSpec, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(spec.to_dict(), indent=2))
    return path
