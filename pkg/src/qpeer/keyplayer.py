"""Key players: how much a subnetwork's mean outcome drops when one agent is cut off.

The influence of agent i in subnetwork s is

    P_si = mean_j (y_j - y_j^(i))

where ``y^(i)`` is the equilibrium after deleting every link to and from i.
The sum runs over all agents of s, i included.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .equilibrium import LimParams, PeerEffectParams, StabilityError, solve_equilibrium
from .estimate import EstimationResult, peer_means
from .network import Dataset, Network
from .quantile import PeerQuantiles


def isolate(A: sp.spmatrix, i: int) -> sp.csr_matrix:
    """Copy of ``A`` with row and column ``i`` zeroed."""
    keep = np.ones(A.shape[0])
    keep[i] = 0.0
    D = sp.diags(keep)
    A = sp.csr_matrix(D @ sp.csr_matrix(A, dtype=float) @ D)
    A.eliminate_zeros()
    return A


def types_from_estimates(result: EstimationResult, network: Network, data: Dataset):
    """Agent types that reproduce the observed outcomes as the equilibrium.

    Returns ``(alpha, contextual)`` where ``contextual`` is each agent's
    ``xbar' beta2`` term, zero for isolated agents.
    """
    if result.fit is None or result.fit.reduced_form:
        raise ValueError("counterfactuals need structural estimates")
    if result.unstable:
        raise StabilityError("estimated peer effects violate sum |lambda| < 1; counterfactuals refused")
    params = result.peer_params()
    y = data.y
    if isinstance(params, LimParams):
        social = params.lam * peer_means(network, y)[:, 0]
    else:
        social = PeerQuantiles(network.adjacency(), params.levels)(y) @ params.lambda_tau
    alpha = np.where(data.iso, y, (y - social) / (1.0 - params.lambda2))
    fit = result.fit
    beta2 = result.psi[-data.x.shape[1] :] / result.psi[fit.xb_index]
    contextual = np.where(data.iso, 0.0, data.xbar_filled @ beta2)
    return alpha, contextual


def _subnet_equilibrium(params, A, alpha, tol):
    return solve_equilibrium(params, A, alpha, tol=tol, max_iter=10_000)


def influence(
    params: PeerEffectParams | LimParams,
    network: Network,
    alpha,
    s: int,
    agent,
    contextual=None,
    tol: float = 1e-12,
) -> float:
    """Influence of ``agent`` (local index or node id via ``(s, id)``) in subnetwork ``s``."""
    sub = network.subnetworks[s]
    lo = network.offsets[s]
    i = network.locate(agent) - lo if isinstance(agent, tuple) else int(agent)
    if not 0 <= i < sub.n:
        raise KeyError(f"agent {agent} not in subnetwork {s}")
    a = np.asarray(alpha, dtype=float)[lo : lo + sub.n]
    c = None if contextual is None else np.asarray(contextual, dtype=float)[lo : lo + sub.n]
    base = _subnet_equilibrium(params, sub.adjacency, a, tol)
    return _influence_one(params, sub.adjacency, a, c, i, base, tol)


def _influence_one(params, A, a, c, i, base, tol) -> float:
    A = sp.csr_matrix(A)
    if A.indptr[i + 1] == A.indptr[i] and A[:, [i]].nnz == 0:
        return 0.0
    a_cf = a.copy()
    if c is not None and A.indptr[i + 1] > A.indptr[i]:
        # the removed agent loses its contextual term
        a_cf[i] -= c[i]
    y_cf = _subnet_equilibrium(params, isolate(A, i), a_cf, tol)
    return float(np.mean(base - y_cf))


def _influence_batch(params, A, a, c, base, tol) -> np.ndarray:
    """All single-agent removals of one subnetwork, solved as one block-diagonal system."""
    A = sp.csr_matrix(A, dtype=float)
    n = A.shape[0]
    out_deg = np.diff(A.indptr)
    linked = (out_deg > 0) | (np.asarray((A != 0).sum(axis=0)).ravel() > 0)
    P = np.zeros(n)
    who = np.flatnonzero(linked)
    if who.size == 0:
        return P
    blocks, types = [], []
    for i in who:
        blocks.append(isolate(A, i))
        a_cf = a.copy()
        if c is not None and out_deg[i] > 0:
            a_cf[i] -= c[i]
        types.append(a_cf)
    y_cf = _subnet_equilibrium(params, sp.block_diag(blocks, format="csr"), np.concatenate(types), tol)
    P[who] = (base[None, :] - y_cf.reshape(who.size, n)).mean(axis=1)
    return P


@dataclass
class InfluenceReport:
    subnet: np.ndarray
    agent: np.ndarray
    index: np.ndarray
    influence: np.ndarray
    rank: np.ndarray
    baseline_mean: dict

    def key(self):
        return list(zip(self.subnet.tolist(), self.agent.tolist()))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subnet", "agent", "influence", "rank"])
            for row in zip(self.subnet, self.agent, self.influence, self.rank):
                w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])
        return path


def dense_rank(values, tie_tol: float = 1e-9) -> np.ndarray:
    """Dense descending ranks rescaled to [0, 100]; values within ``tie_tol`` share a rank."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return v
    order = np.argsort(-v, kind="stable")
    sv = v[order]
    level = np.concatenate([[0], np.cumsum(np.diff(-sv) > tie_tol)])
    top = level[-1]
    out = np.empty_like(v)
    out[order] = 100.0 if top == 0 else 100.0 * (1.0 - level / top)
    return out


def rank_players(
    params: PeerEffectParams | LimParams,
    network: Network,
    alpha,
    contextual=None,
    max_size: int | None = None,
    tol: float = 1e-12,
) -> InfluenceReport:
    """Influence and within-subnetwork rank for every agent.

    ``max_size`` keeps only subnetworks with fewer than that many agents.
    """
    alpha = np.asarray(alpha, dtype=float)
    cols = {k: [] for k in ("subnet", "agent", "index", "influence", "rank")}
    baseline = {}
    for s, sub in enumerate(network.subnetworks):
        if max_size is not None and sub.n >= max_size:
            continue
        lo = network.offsets[s]
        a = alpha[lo : lo + sub.n]
        c = None if contextual is None else np.asarray(contextual, dtype=float)[lo : lo + sub.n]
        base = _subnet_equilibrium(params, sub.adjacency, a, tol)
        P = _influence_batch(params, sub.adjacency, a, c, base, tol)
        baseline[sub.id] = float(base.mean())
        cols["subnet"].append(np.full(sub.n, sub.id))
        cols["agent"].append(sub.node_ids)
        cols["index"].append(lo + np.arange(sub.n))
        cols["influence"].append(P)
        cols["rank"].append(dense_rank(P))
    if not baseline:
        raise ValueError("no subnetwork passes the size filter")
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    return InfluenceReport(**cat, baseline_mean=baseline)


@dataclass
class RankComparison:
    subnet: np.ndarray
    agent: np.ndarray
    influence: np.ndarray
    rank_a: np.ndarray
    rank_b: np.ndarray
    correlation: float

    def to_csv(self, path, names=("quantile", "lim")) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subnet", "agent", "influence", f"rank_{names[0]}", f"rank_{names[1]}"])
            for row in zip(self.subnet, self.agent, self.influence, self.rank_a, self.rank_b):
                w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3])), repr(float(row[4]))])
        return path


def compare_rankings(a: InfluenceReport, b: InfluenceReport) -> RankComparison:
    """Pair the two reports agent by agent; Spearman correlation of the ranks."""
    if a.key() != b.key():
        raise ValueError("reports cover different agents")
    rho = stats.spearmanr(a.rank, b.rank).statistic if a.rank.size > 1 else np.nan
    if np.all(a.rank == b.rank):
        rho = 1.0
    return RankComparison(a.subnet, a.agent, a.influence, a.rank, b.rank, float(rho))
