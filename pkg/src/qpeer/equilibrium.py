"""Best responses and Nash equilibrium of the quantile peer-effect game.

Utility of a non-isolated agent i:

    U_i = alpha_i y_i - y_i^2 / 2
          + sum_t theta_t1 q_t,i y_i - 1/2 sum_t theta_t2 (y_i - q_t,i)^2

and the best response is ``(1 - lambda2) alpha_i + sum_t lambda_t q_t,i``.
Isolated agents play ``alpha_i``.  When ``sum_t |lambda_t| < 1`` the best
response map is a sup-norm contraction, so plain Picard iteration converges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .network import Network
from .quantile import PeerQuantiles, check_levels


class StabilityError(ValueError):
    """The peer-effect parameters violate ``sum |lambda_t| < 1``."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, y: np.ndarray | None = None):
        super().__init__(message)
        self.residual = residual
        self.y = y


@dataclass(frozen=True)
class PeerEffectParams:
    """Total quantile peer effects ``lambda_tau`` and total conformity ``lambda2``.

    ``lambda_tau1``/``lambda_tau2`` optionally split each total into a
    spillover and a conformity part; only the totals enter the best response.
    """

    levels: np.ndarray
    lambda_tau: np.ndarray
    lambda2: float = 0.0
    lambda_tau1: np.ndarray | None = None
    lambda_tau2: np.ndarray | None = None

    def __post_init__(self):
        levels = check_levels(self.levels)
        lam = np.atleast_1d(np.asarray(self.lambda_tau, dtype=float))
        if lam.shape != levels.shape:
            raise ValueError(f"{lam.size} peer effects for {levels.size} quantile levels")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "lambda_tau", lam)
        object.__setattr__(self, "lambda2", float(self.lambda2))
        if (self.lambda_tau1 is None) != (self.lambda_tau2 is None):
            raise ValueError("give both lambda_tau1 and lambda_tau2, or neither")
        if self.lambda_tau1 is not None:
            l1 = np.asarray(self.lambda_tau1, dtype=float)
            l2 = np.asarray(self.lambda_tau2, dtype=float)
            if not np.allclose(l1 + l2, lam, atol=1e-12):
                raise ValueError("lambda_tau1 + lambda_tau2 must equal lambda_tau")
            if np.any(l2 < 0):
                raise ValueError("conformity components lambda_tau2 must be >= 0")
            if not np.isclose(l2.sum(), self.lambda2, atol=1e-12):
                raise ValueError("lambda2 must equal sum(lambda_tau2)")
            object.__setattr__(self, "lambda_tau1", l1)
            object.__setattr__(self, "lambda_tau2", l2)

    def __eq__(self, other):
        if not isinstance(other, PeerEffectParams):
            return NotImplemented
        pairs = zip(
            (self.levels, self.lambda_tau, self.lambda_tau1, self.lambda_tau2),
            (other.levels, other.lambda_tau, other.lambda_tau1, other.lambda_tau2),
        )
        same = all(
            (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))
            for a, b in pairs
        )
        return same and self.lambda2 == other.lambda2

    __hash__ = None

    @property
    def contraction(self) -> float:
        """Lipschitz constant of the best-response map in the sup norm."""
        return float(np.abs(self.lambda_tau).sum())

    @property
    def stable(self) -> bool:
        return self.contraction < 1.0

    @classmethod
    def from_theta(cls, levels, theta1, theta2) -> "PeerEffectParams":
        """Map utility parameters (spillover ``theta1``, conformity ``theta2 >= 0``) to lambdas."""
        t1 = np.asarray(theta1, dtype=float)
        t2 = np.asarray(theta2, dtype=float)
        if np.any(t2 < 0):
            raise ValueError("conformity parameters theta2 must be >= 0")
        denom = 1.0 + t2.sum()
        l1, l2 = t1 / denom, t2 / denom
        return cls(levels, l1 + l2, l2.sum(), l1, l2)

    def with_split(self) -> "PeerEffectParams":
        """Attach a spillover/conformity split, allocating ``lambda2`` across levels.

        The allocation is proportional to the positive part of ``lambda_tau``
        (uniform when no level is positive).  Any split with the same totals
        gives the same equilibrium.
        """
        if self.lambda_tau1 is not None:
            return self
        pos = np.clip(self.lambda_tau, 0, None)
        share = pos / pos.sum() if pos.sum() > 0 else np.full(pos.size, 1.0 / pos.size)
        l2 = self.lambda2 * share
        return PeerEffectParams(self.levels, self.lambda_tau, self.lambda2, self.lambda_tau - l2, l2)

    def theta(self) -> tuple[np.ndarray, np.ndarray]:
        """Utility parameters ``(theta_tau1, theta_tau2)`` of the attached split."""
        p = self.with_split()
        scale = 1.0 / (1.0 - self.lambda2)
        return p.lambda_tau1 * scale, p.lambda_tau2 * scale


@dataclass(frozen=True)
class LimParams:
    """Linear-in-means game: best response ``(1 - lambda2) alpha + lam * mean peer outcome``."""

    lam: float
    lambda2: float = 0.0

    @property
    def contraction(self) -> float:
        return abs(float(self.lam))

    @property
    def stable(self) -> bool:
        return self.contraction < 1.0


@dataclass
class BestResponse:
    """Best-response map for a fixed network, callable on an outcome vector."""

    params: PeerEffectParams | LimParams
    adjacency: sp.csr_matrix
    _pq: PeerQuantiles | None = field(default=None, repr=False)

    def __post_init__(self):
        self.adjacency = sp.csr_matrix(self.adjacency)
        self.adjacency.sort_indices()
        self.isolated = np.diff(self.adjacency.indptr) == 0
        if isinstance(self.params, PeerEffectParams):
            self._pq = PeerQuantiles(self.adjacency, self.params.levels)
        else:
            w = np.asarray(self.adjacency.sum(axis=1)).ravel()
            inv = np.divide(1.0, w, out=np.zeros_like(w), where=w > 0)
            self._mean = sp.diags(inv) @ self.adjacency

    def social(self, y) -> np.ndarray:
        """Peer term of the best response (zero for isolated agents)."""
        if self._pq is not None:
            return self._pq(y) @ self.params.lambda_tau
        return self.params.lam * (self._mean @ y)

    def __call__(self, alpha, y) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float)
        out = (1.0 - self.params.lambda2) * alpha + self.social(y)
        return np.where(self.isolated, alpha, out)


def best_response(params, network: Network, alpha, y) -> np.ndarray:
    return BestResponse(params, network.adjacency())(alpha, y)


def utility(
    params: PeerEffectParams, network: Network, alpha_i: float, agent, y_i: float, y
) -> float:
    """Utility of ``agent`` with type ``alpha_i`` playing ``y_i`` when the others play ``y``."""
    i = network.locate(agent)
    A = network.adjacency()
    private = alpha_i * y_i - 0.5 * y_i**2
    if A.indptr[i + 1] == A.indptr[i]:
        return float(private)
    theta1, theta2 = params.theta()
    q = PeerQuantiles(A[i : i + 1, :], params.levels)(np.asarray(y, dtype=float))[0]
    social = np.sum(theta1 * q) * y_i - 0.5 * np.sum(theta2 * (y_i - q) ** 2)
    return float(private + social)


def solve_equilibrium(
    params,
    network: Network | sp.spmatrix,
    alpha,
    tol: float = 1e-10,
    max_iter: int = 1000,
    y0=None,
    return_residuals: bool = False,
):
    """Unique Nash equilibrium by Picard iteration of the best-response map.

    Starts from ``alpha`` unless ``y0`` is given and stops when the sup-norm
    change between iterates is at most ``tol``.
    """
    if not params.stable:
        raise StabilityError(
            f"sum |lambda_tau| = {params.contraction:.4g} >= 1: equilibrium not guaranteed"
        )
    A = network.adjacency() if isinstance(network, Network) else network
    br = BestResponse(params, A)
    alpha = np.asarray(alpha, dtype=float)
    y = alpha.copy() if y0 is None else np.asarray(y0, dtype=float).copy()
    residuals = []
    for _ in range(max_iter):
        y_new = br(alpha, y)
        res = float(np.max(np.abs(y_new - y), initial=0.0))
        residuals.append(res)
        y = y_new
        if res <= tol:
            break
    else:
        raise ConvergenceError(
            f"no convergence after {max_iter} iterations (residual {res:.3g})", res, y
        )
    return (y, np.array(residuals)) if return_residuals else y
