"""Partitioned directed networks and the per-agent data that live on them.

Agents are stored in one global order: subnetwork 0 first, then subnetwork 1,
and so on.  Every array in :class:`Dataset` follows that order, and
``Network.adjacency()`` is the block-diagonal matrix in the same order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp


class NetworkError(ValueError):
    """Raised when edge or node records violate the network invariants."""


@dataclass(frozen=True)
class Subnetwork:
    id: int
    adjacency: sp.csr_matrix
    node_ids: np.ndarray

    def __post_init__(self):
        A = sp.csr_matrix(self.adjacency, dtype=float)
        A.eliminate_zeros()
        A.sort_indices()
        if A.shape[0] != A.shape[1]:
            raise NetworkError(f"subnetwork {self.id}: adjacency must be square, got {A.shape}")
        if A.shape[0] < 2:
            raise NetworkError(f"subnetwork {self.id}: needs at least 2 nodes, got {A.shape[0]}")
        if A.nnz and A.data.min() < 0:
            raise NetworkError(f"subnetwork {self.id}: negative weight")
        if A.diagonal().any():
            raise NetworkError(f"subnetwork {self.id}: self-edge forbidden")
        ids = np.asarray(self.node_ids)
        if ids.shape != (A.shape[0],):
            raise NetworkError(f"subnetwork {self.id}: node_ids length does not match adjacency")
        object.__setattr__(self, "adjacency", A)
        object.__setattr__(self, "node_ids", ids)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class Network:
    """A collection of disconnected subnetworks (schools, villages, ...)."""

    subnetworks: tuple[Subnetwork, ...]
    directed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "subnetworks", tuple(self.subnetworks))
        if not self.subnetworks:
            raise NetworkError("network has no subnetworks")

    @classmethod
    def from_adjacency(cls, matrices: Sequence, directed: bool = True) -> "Network":
        """Build a network from one adjacency matrix per subnetwork, ids 0..n_s-1."""
        subs = [
            Subnetwork(id=s, adjacency=sp.csr_matrix(A), node_ids=np.arange(np.shape(A)[0]))
            for s, A in enumerate(matrices)
        ]
        return cls(tuple(subs), directed=directed)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([sub.n for sub in self.subnetworks])

    @property
    def n(self) -> int:
        return int(self.sizes.sum())

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def subnet_index(self) -> np.ndarray:
        """Position of each agent's subnetwork in ``subnetworks``."""
        return np.repeat(np.arange(len(self.subnetworks)), self.sizes)

    @property
    def weighted(self) -> bool:
        return any(sub.adjacency.nnz and np.any(sub.adjacency.data != 1.0) for sub in self.subnetworks)

    def adjacency(self) -> sp.csr_matrix:
        A = sp.block_diag([sub.adjacency for sub in self.subnetworks], format="csr")
        A.sort_indices()
        return A

    def out_degree(self) -> np.ndarray:
        return np.diff(self.adjacency().indptr)

    def locate(self, agent) -> int:
        """Global index of ``agent``, given as a global int or a ``(subnet_id, node_id)`` pair."""
        if isinstance(agent, tuple):
            s_id, node = agent
            for s, sub in enumerate(self.subnetworks):
                if sub.id == s_id:
                    hits = np.flatnonzero(sub.node_ids == node)
                    if hits.size:
                        return int(self.offsets[s] + hits[0])
            raise KeyError(f"agent {agent} not in network")
        idx = int(agent)
        if not 0 <= idx < self.n:
            raise KeyError(f"agent {agent} not in network")
        return idx

    def with_adjacency(self, s: int, A) -> "Network":
        """Copy of the network with subnetwork ``s`` rewired to ``A``."""
        subs = list(self.subnetworks)
        subs[s] = replace(subs[s], adjacency=sp.csr_matrix(A))
        return Network(tuple(subs), directed=self.directed)


@dataclass(frozen=True)
class Dataset:
    """Per-agent outcome, covariates and contextual (peer-averaged) covariates.

    ``xbar`` rows of isolated agents are NaN: contextual variables are not
    defined for agents without outgoing links.
    """

    y: np.ndarray | None
    x: np.ndarray
    xbar: np.ndarray
    iso: np.ndarray
    subnet: np.ndarray
    x_names: tuple[str, ...] = field(default=())

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def xbar_filled(self) -> np.ndarray:
        """``xbar`` with isolated rows set to 0."""
        return np.where(self.iso[:, None], 0.0, self.xbar)

    def with_outcome(self, y) -> "Dataset":
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n,):
            raise ValueError(f"outcome must have shape ({self.n},), got {y.shape}")
        return replace(self, y=y)


def contextual_means(A: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    """g-weighted average of peers' ``x``; NaN rows for agents without peers."""
    A = sp.csr_matrix(A)
    w = np.asarray(A.sum(axis=1)).ravel()
    out = np.full((A.shape[0], x.shape[1]), np.nan)
    has = w > 0
    out[has] = (A @ x)[has] / w[has, None]
    return out


def make_dataset(network: Network, x, y=None, x_names: Sequence[str] | None = None) -> Dataset:
    """Attach covariates (and optionally outcomes) to ``network``, computing ``xbar``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != network.n:
        raise ValueError(f"x has {x.shape[0]} rows for {network.n} agents")
    A = network.adjacency()
    iso = np.diff(A.indptr) == 0
    names = tuple(x_names) if x_names is not None else tuple(f"x{k + 1}" for k in range(x.shape[1]))
    data = Dataset(
        y=None, x=x, xbar=contextual_means(A, x), iso=iso, subnet=network.subnet_index, x_names=names
    )
    return data if y is None else data.with_outcome(y)


def classify(network: Network) -> list[dict[str, np.ndarray]]:
    """Split each subnetwork's agents into isolated (no outgoing link) and non-isolated.

    Returns one ``{"iso": ..., "niso": ...}`` dict of global agent indices per
    subnetwork.  Incoming links do not matter.
    """
    deg = network.out_degree()
    out = []
    for s, (lo, hi) in enumerate(zip(network.offsets[:-1], network.offsets[1:])):
        idx = np.arange(lo, hi)
        out.append({"iso": idx[deg[lo:hi] == 0], "niso": idx[deg[lo:hi] > 0]})
    return out


def reachability(A: sp.spmatrix, k: int, exact: bool = False) -> np.ndarray:
    """Boolean matrix ``R[i, j]``: j is reachable from i by a directed path of length <= k.

    With ``exact=True`` only agents whose shortest-path distance is exactly ``k``
    are marked.  The diagonal is always False.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    step = sp.csr_matrix(A, dtype=bool).astype(np.int32)
    reach = step.toarray().astype(bool)
    np.fill_diagonal(reach, False)
    prev = reach.copy()
    frontier = reach.copy()
    for _ in range(k - 1):
        prev = reach.copy()
        frontier = (frontier.astype(np.int32) @ step.toarray()) > 0
        reach = reach | frontier
        np.fill_diagonal(reach, False)
    if exact:
        return reach & ~prev if k > 1 else reach
    return reach


def peers_at_distance(network: Network, agent, k: int, exact: bool = False) -> np.ndarray:
    """Global indices of agents within directed distance ``k`` of ``agent`` (itself excluded)."""
    i = network.locate(agent)
    s = int(network.subnet_index[i])
    lo = network.offsets[s]
    R = reachability(network.subnetworks[s].adjacency, k, exact=exact)
    return lo + np.flatnonzero(R[i - lo])


# --------------------------------------------------------------------------- I/O


def load_network(
    edges: Iterable[Mapping], nodes: Iterable[Mapping], directed: bool = True
) -> tuple[Network, Dataset]:
    """Build a network and dataset from edge and node records.

    ``edges`` rows carry ``subnet, src, dst`` and optionally ``weight`` (default
    1.0).  ``nodes`` rows carry ``subnet, id``, an optional ``y`` and covariate
    columns ``x1..xd``.  Each record may carry a ``_line`` key used in error
    messages.
    """
    nodes = list(nodes)
    edges = list(edges)
    if not nodes:
        raise NetworkError("node table is empty")
    xcols = sorted(
        (c for c in nodes[0] if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:])
    )

    by_subnet: dict[int, list[Mapping]] = {}
    for row in nodes:
        by_subnet.setdefault(int(row["subnet"]), []).append(row)
    sub_ids = sorted(by_subnet)

    index: dict[tuple[int, object], int] = {}
    for s_id in sub_ids:
        seen = set()
        for local, row in enumerate(by_subnet[s_id]):
            key = _key(row["id"])
            if key in seen:
                raise NetworkError(f"{_where(row)}duplicate node id {row['id']} in subnet {s_id}")
            seen.add(key)
            index[(s_id, key)] = local

    triplets: dict[int, tuple[list, list, list]] = {s: ([], [], []) for s in sub_ids}
    for row in edges:
        s_id = int(row["subnet"])
        src, dst = _key(row["src"]), _key(row["dst"])
        w = row.get("weight")
        w = 1.0 if w in (None, "") else float(w)
        if src == dst:
            raise NetworkError(f"{_where(row)}self-edge forbidden ({row['src']} -> {row['dst']})")
        if w < 0:
            raise NetworkError(f"{_where(row)}negative weight {w}")
        for end in (src, dst):
            if (s_id, end) not in index:
                raise NetworkError(f"{_where(row)}dangling endpoint {end} in subnet {s_id}")
        rows, cols, vals = triplets[s_id]
        rows.append(index[(s_id, src)])
        cols.append(index[(s_id, dst)])
        vals.append(w)

    subs = []
    for s_id in sub_ids:
        n_s = len(by_subnet[s_id])
        rows, cols, vals = triplets[s_id]
        A = sp.coo_matrix((vals, (rows, cols)), shape=(n_s, n_s)).tocsr()
        ids = np.array([_key(r["id"]) for r in by_subnet[s_id]])
        subs.append(Subnetwork(id=s_id, adjacency=A, node_ids=ids))
    network = Network(tuple(subs), directed=directed)

    ordered = [row for s_id in sub_ids for row in by_subnet[s_id]]
    x = np.array([[float(r[c]) for c in xcols] for r in ordered]).reshape(len(ordered), len(xcols))
    y = None
    if all(r.get("y") not in (None, "") for r in ordered):
        y = np.array([float(r["y"]) for r in ordered])
    return network, make_dataset(network, x, y, x_names=xcols)


def read_csv(edges_path, nodes_path, directed: bool = True) -> tuple[Network, Dataset]:
    """Read the ``subnet,src,dst[,weight]`` edge file and ``subnet,id,y,x1..xd`` node file."""
    return load_network(
        _read_rows(edges_path, ("subnet", "src", "dst")),
        _read_rows(nodes_path, ("subnet", "id")),
        directed=directed,
    )


def write_csv(network: Network, data: Dataset, outdir) -> tuple[Path, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    edges_path, nodes_path = outdir / "network.csv", outdir / "nodes.csv"
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subnet", "src", "dst", "weight"])
        for sub in network.subnetworks:
            A = sub.adjacency.tocoo()
            for i, j, g in zip(A.row, A.col, A.data):
                w.writerow([sub.id, sub.node_ids[i], sub.node_ids[j], repr(float(g))])
    with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        xcols = [f"x{k + 1}" for k in range(data.x.shape[1])]
        w.writerow(["subnet", "id", "y", *xcols])
        k = 0
        for sub in network.subnetworks:
            for node in sub.node_ids:
                y = "" if data.y is None else repr(float(data.y[k]))
                w.writerow([sub.id, node, y, *(repr(float(v)) for v in data.x[k])])
                k += 1
    return edges_path, nodes_path


def _read_rows(path, required: Sequence[str]) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise NetworkError(f"{path}: missing header") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise NetworkError(f"{path}: header lacks columns {missing}")
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise NetworkError(f"{path}: line {line_no}: expected {len(header)} fields, got {len(rec)}")
            row = {h: f.strip() for h, f in zip(header, rec)}
            try:
                int(row["subnet"])
                for c in header:
                    if c in ("weight", "y") or (c.startswith("x") and c[1:].isdigit()):
                        if row[c] != "":
                            float(row[c])
            except ValueError as exc:
                raise NetworkError(f"{path}: line {line_no}: {exc}") from None
            row["_line"] = f"{path}:{line_no}"
            rows.append(row)
    return rows


def _key(v):
    s = str(v).strip()
    try:
        return int(s)
    except ValueError:
        return s


def _where(row: Mapping) -> str:
    return f"{row['_line']}: " if "_line" in row else f"row {dict(row)}: "
