"""Sample quantiles of peer outcomes.

All kernels work on row-sorted matrices padded with ``+inf`` so that the
peer groups of every agent are handled in one vectorized pass.  A quantile is
always a convex combination of two order statistics,

    q = (1 - omega) * y_(pi) + omega * y_(pi + 1),

which is what the Type II instruments and the key-player code need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .network import Network


def check_levels(levels) -> np.ndarray:
    """Validate a set of quantile levels: nonempty, strictly increasing, inside [0, 1]."""
    tau = np.atleast_1d(np.asarray(levels, dtype=float))
    if tau.ndim != 1 or tau.size == 0:
        raise ValueError("quantile levels must be a nonempty 1-d sequence")
    if np.any(~np.isfinite(tau)) or tau.min() < 0 or tau.max() > 1:
        raise ValueError(f"quantile levels must lie in [0, 1], got {tau.tolist()}")
    if np.any(np.diff(tau) <= 0):
        raise ValueError(f"quantile levels must be strictly increasing, got {tau.tolist()}")
    return tau


def uniform_levels(k: int) -> np.ndarray:
    """``k`` levels evenly spaced on [0, 1], endpoints included."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return np.array([0.5]) if k == 1 else np.linspace(0.0, 1.0, k)


def _check_tau(tau) -> float:
    tau = float(tau)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return tau


# ------------------------------------------------------------------ positions


def type7_position(d, tau):
    """1-based rank ``pi`` and interpolation weight ``omega`` of the Type 7 quantile."""
    h = tau * (np.asarray(d) - 1)
    fl = np.floor(h)
    return fl.astype(np.int64) + 1, h - fl


def weighted_position(w_sorted: np.ndarray, d: np.ndarray, tau: float):
    """Rank and weight of the weighted quantile for rows of outcome-sorted weights.

    With cumulative weights ``G`` and smallest weight ``w_min``, set
    ``h = tau * (G_d - w_min)``.  The k-th order statistic is returned on
    ``G_(k-1) <= h <= G_k - w_min`` and the estimator interpolates linearly to
    the next one over ``(G_k - w_min, G_k)``.  Equal weights give Type 7.  The
    breakpoints around any pair of adjacent order statistics do not depend on
    which of the two comes first, so the quantile is continuous (and
    1-Lipschitz) in the values.

    ``w_sorted`` is ``(m, L)``, zero-padded beyond each row's ``d``.  Returns
    ``(pi, omega)``.
    """
    rows = np.arange(len(d))
    inside = np.arange(w_sorted.shape[1])[None, :] < d[:, None]
    G = np.cumsum(np.where(inside, w_sorted, 0.0), axis=1)
    w_min = np.min(np.where(inside, w_sorted, np.inf), axis=1)
    h = tau * (G[rows, d - 1] - w_min)
    # k = 1-based index of the cell [G_(k-1), G_k) holding h
    k = np.minimum(np.sum(inside & (G <= h[:, None]), axis=1) + 1, d)
    if tau == 1.0:
        k = np.asarray(d)
    start_ramp = G[rows, k - 1] - w_min
    ramp = (h > start_ramp) & (k < d)
    omega = np.where(ramp, (h - start_ramp) / np.where(ramp, w_min, 1.0), 0.0)
    return k.astype(np.int64), np.clip(omega, 0.0, 1.0)


def _sort_rows(vals: np.ndarray, valid: np.ndarray):
    """Stable ascending sort of each row; invalid slots go last as +inf."""
    padded = np.where(valid, vals, np.inf)
    order = np.argsort(padded, axis=1, kind="stable")
    return np.take_along_axis(padded, order, axis=1), order


def _combine(sorted_vals, d, pi, omega):
    rows = np.arange(sorted_vals.shape[0])
    lo = sorted_vals[rows, pi - 1]
    hi = sorted_vals[rows, np.minimum(pi, d - 1)]
    return np.where(omega > 0, (1.0 - omega) * lo + omega * hi, lo)


def row_quantiles(vals, valid, levels, weights=None, fill=0.0):
    """Quantiles of each row's valid entries at every level.

    Parameters
    ----------
    vals, valid : ndarray of shape (m, L)
        Values and a mask of which slots belong to the row's sample.
    levels : array of quantile levels.
    weights : ndarray of shape (m, L), optional
        Positive weights; rows whose weights are all equal use the Type 7
        kernel, which is the same estimator.
    fill : value returned for rows with an empty sample.

    Returns
    -------
    ndarray of shape (m, len(levels)), with the decomposition arrays
    ``(j1, j2, omega)`` given as column positions in the input rows.
    """
    vals = np.asarray(vals, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    levels = np.atleast_1d(levels)
    m = vals.shape[0]
    d = valid.sum(axis=1)
    nonempty = d > 0
    sorted_vals, order = _sort_rows(vals, valid)

    out = np.full((m, levels.size), float(fill))
    j1 = np.full((m, levels.size), -1, dtype=np.int64)
    j2 = np.full((m, levels.size), -1, dtype=np.int64)
    om = np.zeros((m, levels.size))
    if not nonempty.any():
        return out, j1, j2, om

    rows = np.flatnonzero(nonempty)
    sv, od, dd = sorted_vals[rows], order[rows], d[rows]
    if weights is None:
        equal = np.ones(rows.size, dtype=bool)
        ws = None
    else:
        w = np.where(valid, np.asarray(weights, dtype=float), 0.0)[rows]
        ws = np.take_along_axis(w, od, axis=1)
        wmax = np.max(ws, axis=1)
        wmin = np.min(np.where(np.arange(ws.shape[1])[None, :] < dd[:, None], ws, np.inf), axis=1)
        equal = wmax == wmin

    r = np.arange(rows.size)
    for t, tau in enumerate(levels):
        pi, omega = type7_position(dd, tau)
        if not equal.all():
            wpi, womega = weighted_position(ws, dd, tau)
            pi = np.where(equal, pi, wpi)
            omega = np.where(equal, omega, womega)
        out[rows, t] = _combine(sv, dd, pi, omega)
        p1 = pi - 1
        p2 = np.where(omega > 0, np.minimum(pi, dd - 1), p1)
        j1[rows, t] = od[r, p1]
        j2[rows, t] = od[r, p2]
        om[rows, t] = omega
    return out, j1, j2, om


# ------------------------------------------------------------------ scalar API


def type7_quantile(values, tau) -> float:
    """Type 7 sample quantile (linear interpolation between order statistics)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("cannot take the quantile of an empty vector")
    tau = _check_tau(tau)
    q, *_ = row_quantiles(v[None, :], np.ones((1, v.size), bool), [tau])
    return float(q[0, 0])


def weighted_quantile(values, weights, tau) -> float:
    """Weighted sample quantile; reduces to :func:`type7_quantile` under equal weights.

    See :func:`weighted_position` for the interpolation rule.
    """
    v = np.asarray(values, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("cannot take the quantile of an empty vector")
    if v.shape != w.shape:
        raise ValueError(f"values and weights differ in length: {v.size} vs {w.size}")
    if np.any(~(w > 0)):
        raise ValueError("weights must be strictly positive")
    tau = _check_tau(tau)
    q, *_ = row_quantiles(v[None, :], np.ones((1, v.size), bool), [tau], weights=w[None, :])
    return float(q[0, 0])


@dataclass(frozen=True)
class QuantileDecomposition:
    """Peer quantile written as ``(1 - omega) * y[j1] + omega * y[j2]``.

    ``j1`` and ``j2`` are global agent indices; ``pi`` is the 1-based rank of
    ``j1`` among the agent's peers.
    """

    j1: int
    j2: int
    omega: float
    pi: int

    def recompose(self, y) -> float:
        y = np.asarray(y, dtype=float)
        if self.omega == 0:
            return float(y[self.j1])
        return float((1.0 - self.omega) * y[self.j1] + self.omega * y[self.j2])


def _peer_row(network: Network, agent):
    i = network.locate(agent)
    A = network.adjacency()
    cols = A.indices[A.indptr[i] : A.indptr[i + 1]]
    if cols.size == 0:
        raise ValueError(f"agent {agent} is isolated: peer quantile undefined")
    return cols, A.data[A.indptr[i] : A.indptr[i + 1]]


def peer_quantile(network: Network, y, agent, tau) -> float:
    """Quantile at level ``tau`` of the outcomes of ``agent``'s peers (weighted by g_ij)."""
    cols, w = _peer_row(network, agent)
    y = np.asarray(y, dtype=float)
    return weighted_quantile(y[cols], w, tau)


def quantile_decomposition(network: Network, y, agent, tau) -> QuantileDecomposition:
    cols, w = _peer_row(network, agent)
    tau = _check_tau(tau)
    y = np.asarray(y, dtype=float)
    vals = y[cols][None, :]
    _, j1, j2, om = row_quantiles(vals, np.ones_like(vals, bool), [tau], weights=w[None, :])
    # rank of j1 among peers, ties broken by agent index
    order = np.argsort(vals[0], kind="stable")
    pi = int(np.flatnonzero(order == j1[0, 0])[0]) + 1
    return QuantileDecomposition(int(cols[j1[0, 0]]), int(cols[j2[0, 0]]), float(om[0, 0]), pi)


# ------------------------------------------------------------------ all agents


class PeerQuantiles:
    """Vectorized peer-outcome quantiles ``q[i, t]`` for every agent and level.

    Built once per network; calling the object with an outcome vector returns
    an ``(n, len(levels))`` array with zeros in isolated agents' rows.
    """

    def __init__(self, adjacency: sp.spmatrix, levels):
        A = sp.csr_matrix(adjacency)
        A.sort_indices()
        self.levels = check_levels(levels)
        self.n = A.shape[0]
        self.degree = np.diff(A.indptr)
        width = max(int(self.degree.max(initial=0)), 1)
        self.peer_index = np.zeros((self.n, width), dtype=np.int64)
        self.valid = np.arange(width)[None, :] < self.degree[:, None]
        self.peer_index[self.valid] = A.indices
        w = np.zeros((self.n, width))
        w[self.valid] = A.data
        self.weighted = bool(A.nnz) and bool(np.any(A.data != 1.0))
        self.weights = w if self.weighted else None

    @classmethod
    def from_network(cls, network: Network, levels) -> "PeerQuantiles":
        return cls(network.adjacency(), levels)

    def __call__(self, y) -> np.ndarray:
        return self.decompose(y)[0]

    def decompose(self, y):
        """Quantiles plus ``(j1, j2, omega)`` as global agent indices (-1 for isolated rows)."""
        y = np.asarray(y, dtype=float)
        vals = y[self.peer_index]
        q, p1, p2, om = row_quantiles(vals, self.valid, self.levels, weights=self.weights)
        j1 = np.where(p1 >= 0, np.take_along_axis(self.peer_index, np.maximum(p1, 0), axis=1), -1)
        j2 = np.where(p2 >= 0, np.take_along_axis(self.peer_index, np.maximum(p2, 0), axis=1), -1)
        return q, j1, j2, om
