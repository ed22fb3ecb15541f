"""Two-stage estimation of quantile (and linear-in-means) peer effects.

Stage 1 runs OLS on isolated agents, whose outcome is their type, to get
``beta1``.  Stage 2 runs GMM/2SLS on non-isolated agents with regressors

    V = [q_tau ..., x'beta1_hat, xbar]

and coefficients ``psi = (lambda_tau ..., 1 - lambda2, beta2_tilde)``.
Subnetwork fixed effects are removed by demeaning within
(subnetwork, isolated/non-isolated) groups.  The covariance of
``(beta1_hat, psi_hat)`` stacks both first-order conditions in one sandwich
so that the generated regressor ``x'beta1_hat`` is accounted for.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from .equilibrium import LimParams, PeerEffectParams
from .instruments import InstrumentMatrix, build_type1, build_type2, combine
from .network import Dataset, Network
from .quantile import PeerQuantiles, check_levels, uniform_levels

COV_TYPES = ("cluster", "robust", "homoskedastic")


class IdentificationError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


# ----------------------------------------------------------------- demeaning


def group_keys(data: Dataset) -> np.ndarray:
    """One group per (subnetwork, isolated flag)."""
    return 2 * np.asarray(data.subnet, dtype=np.int64) + data.iso.astype(np.int64)


def demean(values, groups) -> np.ndarray:
    """Subtract group means; singleton groups become exact zeros."""
    v = np.asarray(values, dtype=float)
    flat = v.ndim == 1
    v2 = v[:, None] if flat else v
    _, inv, counts = np.unique(groups, return_inverse=True, return_counts=True)
    sums = np.zeros((counts.size, v2.shape[1]))
    np.add.at(sums, inv, v2)
    out = v2 - (sums / counts[:, None])[inv]
    out[counts[inv] == 1] = 0.0
    return out[:, 0] if flat else out


def independent_columns(M: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Sorted indices of a maximal set of linearly independent columns (pivoted QR)."""
    if M.shape[1] == 0:
        return np.array([], dtype=np.int64)
    scale = np.linalg.norm(M, axis=0)
    nz = np.flatnonzero(scale > 0)
    if nz.size == 0:
        return nz
    _, R, piv = la.qr(M[:, nz] / scale[nz], mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * d[0]))
    return np.sort(nz[piv[:rank]])


# ------------------------------------------------------------------ sandwich


def cluster_sum(scores: np.ndarray, clusters) -> np.ndarray:
    """Sum score rows within clusters."""
    _, inv = np.unique(clusters, return_inverse=True)
    out = np.zeros((inv.max() + 1, scores.shape[1]))
    np.add.at(out, inv, scores)
    return out


def sandwich(bread: np.ndarray, scores: np.ndarray, clusters=None) -> np.ndarray:
    """``bread^-1 (sum_g s_g s_g') bread^-T`` with ``s_g`` the cluster sums of score rows.

    ``clusters=None`` treats each row as its own cluster.
    """
    s = scores if clusters is None else cluster_sum(scores, clusters)
    meat = s.T @ s
    binv = np.linalg.inv(bread)
    V = binv @ meat @ binv.T
    return 0.5 * (V + V.T)


# ------------------------------------------------------------------ core fit


@dataclass
class TwoStageFit:
    """Demeaned design and estimates of one two-stage fit.

    Arrays suffixed ``_iso`` refer to isolated agents; the others to
    non-isolated agents, in the row order of the instrument matrix.
    """

    X_iso: np.ndarray
    y_iso: np.ndarray
    cl_iso: np.ndarray
    X: np.ndarray
    Xbar: np.ndarray
    Q: np.ndarray
    Z: np.ndarray
    y: np.ndarray
    cl: np.ndarray
    W: np.ndarray
    beta1: np.ndarray
    psi: np.ndarray
    shared: np.ndarray
    reduced_form: bool = False
    z_kept: np.ndarray | None = None
    groups: np.ndarray | None = None

    @property
    def n_endog(self) -> int:
        return self.Q.shape[1]

    @property
    def xb_index(self) -> int:
        return self.n_endog

    @property
    def V(self) -> np.ndarray:
        return design_matrix(self.Q, self.X, self.Xbar, self.beta1, self.shared, self.reduced_form)

    @property
    def resid_iso(self) -> np.ndarray:
        return self.y_iso - self.X_iso @ self.beta1 if self.X_iso.size else self.y_iso

    @property
    def resid(self) -> np.ndarray:
        return self.y - self.V @ self.psi

    @property
    def H(self) -> np.ndarray:
        ZV = self.Z.T @ self.V
        return ZV.T @ self.W @ ZV

    @property
    def B(self) -> np.ndarray:
        """``V'Z W``: maps instrument moments to the psi first-order conditions."""
        return (self.Z.T @ self.V).T @ self.W

    def beta_jacobian(self) -> np.ndarray:
        """``Z'`` times the derivative of ``V psi`` with respect to ``beta1``."""
        d1 = self.X_iso.shape[1]
        J = np.zeros((self.Z.shape[1], d1))
        if not self.reduced_form:
            J[:, self.shared] = self.psi[self.xb_index] * (self.Z.T @ self.X[:, self.shared])
        return J

    def bread(self) -> np.ndarray:
        """``B F`` for the stacked parameter ``(beta1, psi)``."""
        d1 = 0 if self.reduced_form else self.X_iso.shape[1]
        p = self.psi.size
        BF = np.zeros((d1 + p, d1 + p))
        if d1:
            BF[:d1, :d1] = self.X_iso.T @ self.X_iso
            BF[d1:, :d1] = self.B @ self.beta_jacobian()
        BF[d1:, d1:] = self.H
        return BF

    def scores(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-agent contributions to ``B u`` and their cluster ids."""
        d1 = 0 if self.reduced_form else self.X_iso.shape[1]
        p = self.psi.size
        G = self.Z @ self.B.T
        niso = np.hstack([np.zeros((self.y.size, d1)), G * self.resid[:, None]])
        if not d1:
            return niso, self.cl
        iso = np.hstack([self.X_iso * self.resid_iso[:, None], np.zeros((self.y_iso.size, p))])
        return np.vstack([iso, niso]), np.concatenate([self.cl_iso, self.cl])

    def vcov(self, cov_type: str = "cluster") -> np.ndarray:
        """Covariance of ``(beta1_hat, psi_hat)`` (``psi_hat`` only in reduced-form mode)."""
        if cov_type not in COV_TYPES:
            raise ValueError(f"cov_type must be one of {COV_TYPES}")
        BF = self.bread()
        if cov_type == "homoskedastic":
            d1 = 0 if self.reduced_form else self.X_iso.shape[1]
            G = self.Z @ self.B.T
            meat = np.zeros_like(BF)
            if d1:
                e = self.resid_iso
                meat[:d1, :d1] = (e @ e / e.size) * (self.X_iso.T @ self.X_iso)
            e = self.resid
            meat[d1:, d1:] = (e @ e / e.size) * (G.T @ G)
            binv = np.linalg.inv(BF)
            V = binv @ meat @ binv.T
            return 0.5 * (V + V.T)
        s, cl = self.scores()
        return sandwich(BF, s, cl if cov_type == "cluster" else None)


def design_matrix(Q, X, Xbar, beta1, shared, reduced_form=False) -> np.ndarray:
    if reduced_form:
        return np.hstack([Q, X, Xbar])
    cols = [Q, (X[:, shared] @ beta1[shared])[:, None]]
    if not shared.all():
        cols.append(X[:, ~shared])
    return np.hstack(cols + [Xbar])


def ols_isolated(X_iso, y_iso, names=None) -> np.ndarray:
    """Least squares on (demeaned) isolated agents."""
    if X_iso.shape[0] == 0:
        raise IdentificationError("identification requires isolated agents")
    keep = independent_columns(X_iso)
    if keep.size < X_iso.shape[1]:
        names = names or [f"x{k + 1}" for k in range(X_iso.shape[1])]
        bad = [names[k] for k in range(X_iso.shape[1]) if k not in set(keep.tolist())]
        raise IdentificationError(f"isolated-agent covariates are collinear: {bad}")
    beta, *_ = np.linalg.lstsq(X_iso, y_iso, rcond=None)
    return beta


def gmm_nonisolated(V, Z, y, W=None) -> tuple[np.ndarray, np.ndarray]:
    """``psi = (V'Z W Z'V)^-1 V'Z W Z'y``; returns ``(psi, W)``. ``W`` defaults to ``(Z'Z)^-1``."""
    if Z.shape[1] < V.shape[1]:
        raise IdentificationError(
            f"{Z.shape[1]} instruments for {V.shape[1]} regressors: model not identified"
        )
    if W is None:
        W = np.linalg.inv(Z.T @ Z)
        W = 0.5 * (W + W.T)
    ZV = Z.T @ V
    H = ZV.T @ W @ ZV
    sv = np.linalg.svd(H, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise NumericalError(f"singular GMM Hessian (smallest singular value {sv[-1]:.3g})")
    return np.linalg.solve(H, ZV.T @ W @ (Z.T @ y)), W


def fit_two_stage(
    X_iso, y_iso, cl_iso, X, Xbar, Q, Z, y, cl, W=None, shared=None, reduced_form=False,
    groups=None,
) -> TwoStageFit:
    """Run both stages on already demeaned arrays."""
    d1 = X.shape[1]
    shared = np.ones(d1, dtype=bool) if shared is None else np.asarray(shared, dtype=bool)
    # drop instruments that are zero or linearly dependent after demeaning
    kept = independent_columns(Z)
    if W is not None and kept.size < Z.shape[1]:
        raise IdentificationError("custom weighting needs linearly independent instruments")
    Z = Z[:, kept]
    if reduced_form:
        beta1 = np.zeros(d1)
    else:
        beta1 = ols_isolated(X_iso, y_iso)
    V = design_matrix(Q, X, Xbar, beta1, shared, reduced_form)
    psi, W = gmm_nonisolated(V, Z, y, W)
    return TwoStageFit(
        X_iso, y_iso, cl_iso, X, Xbar, Q, Z, y, cl, W, beta1, psi, shared, reduced_form, kept,
        groups,
    )


# ---------------------------------------------------------------- structural


def structural_names(levels, x_names, shared) -> list[str]:
    lv = [f"{t:.4g}" for t in levels]
    names = [f"lambda[{t}]" for t in lv] + ["lambda2"]
    names += [f"theta[{t}]" for t in lv] + ["theta1", "theta2"]
    names += [f"beta1_free[{n}]" for n, s in zip(x_names, shared) if not s]
    return names + [f"beta2[{n}]" for n in x_names]


def recover_structural(psi, n_endog: int, n_free: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Structural values and their Jacobian with respect to ``psi``.

    Order: lambda_tau..., lambda2, theta_tau..., theta1, theta2,
    then unshared beta1 and beta2, each divided by ``1 - lambda2``.
    """
    psi = np.asarray(psi, dtype=float)
    L = n_endog
    lam, c, rest = psi[:L], psi[L], psi[L + 1 :]
    if c <= 0:
        raise IdentificationError(f"conformity share out of range: lambda2 = {1 - c:.4g} >= 1")
    s = lam.sum()
    vals = np.concatenate([lam, [1 - c], lam / c, [(s - 1 + c) / c, 1 / c - 1], rest / c])
    J = np.zeros((vals.size, psi.size))
    J[:L, :L] = np.eye(L)
    J[L, L] = -1.0
    J[L + 1 : 2 * L + 1, :L] = np.eye(L) / c
    J[L + 1 : 2 * L + 1, L] = -lam / c**2
    J[2 * L + 1, :L] = 1 / c
    J[2 * L + 1, L] = -(s - 1) / c**2
    J[2 * L + 2, L] = -1 / c**2
    J[2 * L + 3 :, L + 1 :] = np.eye(rest.size) / c
    J[2 * L + 3 :, L] = -rest / c**2
    return vals, J


# ---------------------------------------------------------------- results


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class EstimationResult:
    model: str
    levels: np.ndarray | None
    x_names: tuple[str, ...]
    beta1: np.ndarray
    psi: np.ndarray
    psi_names: list[str]
    vcov: np.ndarray
    structural: dict[str, float]
    structural_se: dict[str, float]
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    fit: TwoStageFit | None = field(default=None, repr=False)
    unstable: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    @property
    def beta1_se(self) -> np.ndarray:
        return self.se[: self.beta1.size]

    @property
    def psi_se(self) -> np.ndarray:
        return self.se[self.se.size - self.psi.size :]

    @property
    def lambda_tau(self) -> np.ndarray:
        k = self.fit.n_endog if self.fit is not None else (1 if self.levels is None else len(self.levels))
        return self.psi[:k]

    @property
    def lambda2(self) -> float:
        return float(self.structural.get("lambda2", np.nan))

    def peer_params(self) -> PeerEffectParams | LimParams:
        if self.model == "lim":
            return LimParams(float(self.psi[0]), self.lambda2)
        return PeerEffectParams(self.levels, self.lambda_tau, self.lambda2)

    def to_dict(self) -> dict:
        d = {
            "model": self.model,
            "levels": self.levels,
            "x_names": list(self.x_names),
            "beta1": dict(zip(self.x_names, self.beta1)),
            "beta1_se": dict(zip(self.x_names, self.beta1_se)),
            "psi": dict(zip(self.psi_names, self.psi)),
            "psi_se": dict(zip(self.psi_names, self.psi_se)),
            "structural": self.structural,
            "structural_se": self.structural_se,
            "vcov": self.vcov,
            "unstable": self.unstable,
            "diagnostics": self.diagnostics,
            "config": self.config,
        }
        return _jsonable(d)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


def _assemble(network: Network, data: Dataset, Q_all: np.ndarray, Z: InstrumentMatrix):
    if data.y is None:
        raise ValueError("estimation needs outcomes")
    g = group_keys(data)
    iso = np.flatnonzero(data.iso)
    rows = Z.rows
    if not np.array_equal(rows, np.flatnonzero(~data.iso)):
        raise ValueError("instrument rows must be the non-isolated agents in global order")
    y_dm = demean(data.y, g)
    X_dm = demean(data.x, g)
    Xbar_dm = demean(data.xbar_filled, g)
    Q_dm = demean(Q_all, g)
    gn = g[rows]
    Zfull = np.hstack([data.x[rows], data.xbar_filled[rows], Z.Z])
    return dict(
        X_iso=X_dm[iso],
        y_iso=y_dm[iso],
        cl_iso=data.subnet[iso],
        X=X_dm[rows],
        Xbar=Xbar_dm[rows],
        Q=Q_dm[rows],
        Z=demean(Zfull, gn),
        y=y_dm[rows],
        cl=data.subnet[rows],
        groups=gn,
    )


def _result(model, levels, data, fit, names_q, cov_type, config) -> EstimationResult:
    x_names = tuple(data.x_names) or tuple(f"x{k + 1}" for k in range(data.x.shape[1]))
    vc = fit.vcov(cov_type)
    d1 = 0 if fit.reduced_form else x_names.__len__()
    if fit.reduced_form:
        psi_names = names_q + [f"beta1_tilde[{n}]" for n in x_names]
    else:
        psi_names = names_q + ["one_minus_lambda2"]
        psi_names += [f"beta1_free[{n}]" for n, s in zip(x_names, fit.shared) if not s]
    psi_names += [f"beta2_tilde[{n}]" for n in x_names]
    structural, structural_se, unstable = {}, {}, False
    lam = fit.psi[: fit.n_endog]
    if np.abs(lam).sum() >= 1:
        unstable = True
        warnings.warn("estimated peer effects violate sum |lambda| < 1", RuntimeWarning)
    if not fit.reduced_form:
        lv = levels if levels is not None else np.array([np.nan])
        vals, J = recover_structural(fit.psi, fit.n_endog)
        names = structural_names(lv, x_names, fit.shared)
        if model == "lim":
            names[0] = "lambda"
            names[2] = "theta"
        cov_s = J @ vc[d1:, d1:] @ J.T
        structural = dict(zip(names, vals.tolist()))
        structural_se = dict(zip(names, np.sqrt(np.clip(np.diag(cov_s), 0, None)).tolist()))
    diag = {
        "n_iso": int(fit.y_iso.size),
        "n_niso": int(fit.y.size),
        "n_instruments": int(fit.Z.shape[1]),
    }
    return EstimationResult(
        model, levels, x_names, fit.beta1 if d1 else np.zeros(0), fit.psi, psi_names, vc,
        structural, structural_se, diag, config, fit, unstable,
    )


def estimate_quantile(
    network: Network,
    data: Dataset,
    levels,
    instruments: InstrumentMatrix,
    cov_type: str = "cluster",
    W=None,
    shared=None,
    reduced_form: bool | None = None,
) -> EstimationResult:
    """Quantile peer-effect model at ``levels``.

    With no isolated agents the call fails unless ``reduced_form=True``, in which
    case ``x`` enters freely and only peer effects and reduced-form slopes are reported.
    """
    levels = check_levels(levels)
    Q = PeerQuantiles(network.adjacency(), levels)(data.y)
    arrays = _assemble(network, data, Q, instruments)
    if reduced_form is None:
        reduced_form = False
    fit = fit_two_stage(**arrays, W=W, shared=shared, reduced_form=reduced_form)
    names_q = [f"lambda[{t:.4g}]" for t in levels]
    config = {
        "levels": levels.tolist(),
        "instruments": instruments.kind,
        "instrument_meta": instruments.meta,
        "weighting": "2sls" if W is None else "custom",
        "cov_type": cov_type,
    }
    return _result("quantile", levels, data, fit, names_q, cov_type, config)


def peer_means(network: Network, y) -> np.ndarray:
    A = network.adjacency()
    w = np.asarray(A.sum(axis=1)).ravel()
    inv = np.divide(1.0, w, out=np.zeros_like(w), where=w > 0)
    return (sp.diags(inv) @ A @ np.asarray(y, dtype=float))[:, None]


def estimate_lim(
    network: Network,
    data: Dataset,
    instruments: InstrumentMatrix,
    cov_type: str = "cluster",
    W=None,
    shared=None,
) -> EstimationResult:
    """Linear-in-means model: the mean peer outcome replaces the quantile block."""
    arrays = _assemble(network, data, peer_means(network, data.y), instruments)
    fit = fit_two_stage(**arrays, W=W, shared=shared)
    config = {
        "instruments": instruments.kind,
        "instrument_meta": instruments.meta,
        "weighting": "2sls" if W is None else "custom",
        "cov_type": cov_type,
    }
    return _result("lim", None, data, fit, ["lambda"], cov_type, config)


def build_instruments(
    network: Network,
    data: Dataset,
    kind: str,
    levels,
    type1_levels=None,
    max_distance: int = 3,
    exact: bool = False,
) -> InstrumentMatrix:
    if kind not in ("type1", "type2", "combined"):
        raise ValueError(f"unknown instrument kind {kind!r}")
    if kind == "type2":
        return build_type2(network, data, levels, max_distance)
    Z1 = build_type1(network, data, type1_levels, max_distance, exact)
    return Z1 if kind == "type1" else combine(Z1, build_type2(network, data, levels, max_distance))


# ------------------------------------------------------------ estimator API


class _PeerModel(BaseEstimator):
    def _check(self, network, data):
        if not isinstance(network, Network):
            raise TypeError("network must be a Network")
        if not isinstance(data, Dataset) or data.y is None:
            raise TypeError("data must be a Dataset with outcomes")
        if data.n != network.n:
            raise ValueError(f"data has {data.n} agents, network has {network.n}")
        if self.cov_type not in COV_TYPES:
            raise ValueError(f"cov_type must be one of {COV_TYPES}")

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise RuntimeError(f"{type(self).__name__} is not fitted")

    def predict(self, network: Network, data: Dataset) -> np.ndarray:
        """Fitted outcomes given observed peer outcomes, fixed effects recovered by group means."""
        self._check_fitted()
        res = self.result_
        g = group_keys(data)
        Q = self._endog(network, data.y)
        X, Xbar = data.x, data.xbar_filled
        fitted = np.where(
            data.iso,
            X @ res.beta1,
            design_matrix(Q, X, Xbar, res.beta1, res.fit.shared) @ res.psi,
        )
        fe = data.y - fitted
        return fitted + (fe - demean(fe, g))

    def score(self, network: Network, data: Dataset) -> float:
        """R^2 of within-group variation."""
        pred = self.predict(network, data)
        g = group_keys(data)
        r = demean(data.y - pred, g)
        t = demean(data.y, g)
        return float(1 - (r @ r) / (t @ t))


class QuantilePeerModel(_PeerModel):
    """Quantile peer-effect estimator.

    Parameters
    ----------
    levels : quantile levels of peer outcomes entering the model.
    instruments : "type1", "type2" or "combined".
    type1_levels : levels used for Type I instruments (10 uniform by default).
    max_distance : largest network distance for Type I peer sets.
    exact_distance : use exactly-k instead of up-to-k peer sets.
    cov_type : "cluster" (by subnetwork), "robust" or "homoskedastic".
    """

    def __init__(
        self,
        levels=(0.0, 1 / 3, 2 / 3, 1.0),
        instruments: str = "type1",
        type1_levels=None,
        max_distance: int = 3,
        exact_distance: bool = False,
        cov_type: str = "cluster",
    ):
        self.levels = levels
        self.instruments = instruments
        self.type1_levels = type1_levels
        self.max_distance = max_distance
        self.exact_distance = exact_distance
        self.cov_type = cov_type

    def _endog(self, network, y):
        return PeerQuantiles(network.adjacency(), self.levels_)(y)

    def fit(self, network: Network, data: Dataset, Z: InstrumentMatrix | None = None):
        self._check(network, data)
        self.levels_ = check_levels(self.levels)
        if Z is None:
            Z = build_instruments(
                network, data, self.instruments, self.levels_, self.type1_levels,
                self.max_distance, self.exact_distance,
            )
        self.instruments_ = Z
        self.result_ = estimate_quantile(network, data, self.levels_, Z, self.cov_type)
        self.coef_ = self.result_.psi
        return self


class LinearInMeansModel(_PeerModel):
    """Linear-in-means estimator using Type I instruments."""

    def __init__(
        self,
        type1_levels=None,
        max_distance: int = 3,
        exact_distance: bool = False,
        cov_type: str = "cluster",
    ):
        self.type1_levels = type1_levels
        self.max_distance = max_distance
        self.exact_distance = exact_distance
        self.cov_type = cov_type

    def _endog(self, network, y):
        return peer_means(network, y)

    def fit(self, network: Network, data: Dataset, Z: InstrumentMatrix | None = None):
        self._check(network, data)
        if Z is None:
            Z = build_type1(
                network, data, self.type1_levels, self.max_distance, self.exact_distance
            )
        self.instruments_ = Z
        self.result_ = estimate_lim(network, data, Z, self.cov_type)
        self.coef_ = self.result_.psi
        return self
