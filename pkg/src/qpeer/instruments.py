"""Instrument matrices for the peer-outcome quantiles.

Type I instruments are quantiles of peers' exogenous characteristics over
peer sets at increasing network distance.  Type II instruments reuse the
outcome-based decomposition of each peer quantile,
``q = (1 - w) y[j1] + w y[j2]``, and apply the same weights to the
characteristics of peers ``j1`` and ``j2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .network import Dataset, Network, reachability
from .quantile import PeerQuantiles, check_levels, row_quantiles, uniform_levels


@dataclass(frozen=True)
class InstrumentMatrix:
    """Instruments for the non-isolated agents listed in ``rows`` (global indices)."""

    Z: np.ndarray
    rows: np.ndarray
    labels: tuple[str, ...]
    kind: str
    missing: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim != 2 or Z.shape[0] != len(self.rows):
            raise ValueError(f"Z has shape {Z.shape} for {len(self.rows)} rows")
        if Z.shape[1] != len(self.labels):
            raise ValueError("one label per column required")
        if not np.all(np.isfinite(Z)):
            raise ValueError("instrument matrix has non-finite entries")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "rows", np.asarray(self.rows, dtype=np.int64))
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.missing is None:
            object.__setattr__(self, "missing", np.zeros(Z.shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.Z.shape

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["agent", *self.labels])
            for r, row in zip(self.rows, self.Z):
                w.writerow([int(r), *(repr(float(v)) for v in row)])
        return path


def dedup_columns(Z: np.ndarray, drop_constant: bool = True) -> np.ndarray:
    """Indices of columns kept after removing exact duplicates (first copy kept)."""
    seen = set()
    keep = []
    for j in range(Z.shape[1]):
        col = np.ascontiguousarray(Z[:, j])
        if drop_constant and (col.size == 0 or np.all(col == col[0])):
            continue
        key = col.tobytes()
        if key not in seen:
            seen.add(key)
            keep.append(j)
    return np.array(keep, dtype=np.int64)


def _finish(Z, rows, labels, kind, missing, meta) -> InstrumentMatrix:
    keep = dedup_columns(Z)
    meta = dict(meta, dropped=int(Z.shape[1] - keep.size))
    return InstrumentMatrix(
        Z[:, keep], rows, tuple(labels[j] for j in keep), kind, missing[:, keep], meta
    )


def _covariates(data: Dataset):
    names = list(data.x_names) or [f"x{k + 1}" for k in range(data.x.shape[1])]
    # contextual means of isolated peers are undefined; use 0
    cols = np.column_stack([data.x, data.xbar_filled])
    return cols, names + [f"mean_{n}" for n in names]


def _peer_sets(network: Network, k: int, exact: bool):
    """Padded global peer indices for distance-k sets, all subnetworks stacked."""
    sets = []
    for lo, sub in zip(network.offsets[:-1], network.subnetworks):
        R = reachability(sub.adjacency, k, exact=exact)
        sets.extend(lo + np.flatnonzero(r) for r in R)
    width = max(1, max(s.size for s in sets))
    idx = np.zeros((len(sets), width), dtype=np.int64)
    valid = np.zeros((len(sets), width), dtype=bool)
    for i, s in enumerate(sets):
        idx[i, : s.size] = s
        valid[i, : s.size] = True
    return idx, valid


def build_type1(
    network: Network,
    data: Dataset,
    levels=None,
    max_distance: int = 3,
    exact: bool = False,
) -> InstrumentMatrix:
    """Quantiles of peers' ``x`` and ``xbar`` over distance-1..``max_distance`` peer sets.

    Sets are up-to-k by default (``exact=True`` for exactly-k).  Quantiles are
    unweighted at every distance.  Empty sets give zeros, flagged in ``missing``.
    """
    levels = uniform_levels(10) if levels is None else check_levels(levels)
    if not 1 <= max_distance <= 3:
        raise ValueError("max_distance must be 1, 2 or 3")
    rows = np.flatnonzero(~data.iso)
    if rows.size == 0:
        raise ValueError("no non-isolated agents")
    cov, names = _covariates(data)
    blocks, masks, labels = [], [], []
    for k in range(1, max_distance + 1):
        idx, valid = _peer_sets(network, k, exact)
        idx, valid = idx[rows], valid[rows]
        empty = ~valid.any(axis=1)
        for c, name in enumerate(names):
            q, *_ = row_quantiles(cov[idx, c], valid, levels)
            blocks.append(q)
            masks.append(np.repeat(empty[:, None], levels.size, axis=1))
            labels += [f"{name}|d{k}|tau={t:.4g}" for t in levels]
    Z = np.hstack(blocks)
    meta = {
        "levels": levels.tolist(),
        "max_distance": max_distance,
        "distance_sets": "exactly-k" if exact else "up-to-k",
        "weighting": "unweighted",
    }
    return _finish(Z, rows, labels, "type1", np.hstack(masks), meta)


def selection_matrix(j1, j2, omega, n: int) -> sp.csr_matrix:
    """Sparse ``n x n`` matrix with row i equal to ``(1 - w) e_j1 + w e_j2``; empty rows where ``j1 < 0``."""
    rows = np.flatnonzero(j1 >= 0)
    r = np.concatenate([rows, rows])
    c = np.concatenate([j1[rows], j2[rows]])
    v = np.concatenate([1.0 - omega[rows], omega[rows]])
    return sp.csr_matrix((v, (r, c)), shape=(n, n))


def build_type2(network: Network, data: Dataset, levels, max_distance: int = 1) -> InstrumentMatrix:
    """Characteristics of the two peers whose outcomes form each peer quantile, mixed with its weight.

    Distance k applies the level's selection operator k times, so the
    distance-2 column follows the selected peer's own selected peer.
    """
    if data.y is None:
        raise ValueError("Type II instruments need outcomes")
    if not 1 <= max_distance <= 3:
        raise ValueError("max_distance must be 1, 2 or 3")
    levels = check_levels(levels)
    rows = np.flatnonzero(~data.iso)
    pq = PeerQuantiles(network.adjacency(), levels)
    _, j1, j2, om = pq.decompose(data.y)
    cov, names = _covariates(data)
    blocks, labels = [], []
    for t, tau in enumerate(levels):
        G = selection_matrix(j1[:, t], j2[:, t], om[:, t], data.n)
        z = cov
        for k in range(1, max_distance + 1):
            z = G @ z
            blocks.append(z[rows])
            labels += [f"{name}|peer_at_q|d{k}|tau={tau:.4g}" for name in names]
    Z = np.hstack(blocks)
    meta = {"levels": levels.tolist(), "max_distance": max_distance}
    return _finish(Z, rows, labels, "type2", np.zeros(Z.shape, bool), meta)


def combine(Z1: InstrumentMatrix, Z2: InstrumentMatrix | None) -> InstrumentMatrix:
    if Z2 is None or Z2.Z.shape[1] == 0:
        return Z1
    if not np.array_equal(Z1.rows, Z2.rows):
        raise ValueError("instrument matrices index different agents")
    Z = np.hstack([Z1.Z, Z2.Z])
    meta = {"parts": [Z1.meta, Z2.meta]}
    return _finish(
        Z, Z1.rows, Z1.labels + Z2.labels, "combined", np.hstack([Z1.missing, Z2.missing]), meta
    )
