"""Specification tests for two-stage peer-effect fits.

All tests take :class:`~qpeer.estimate.TwoStageFit` objects estimated on the
same data.  Variances are sandwiches over stacked first-order conditions, so
the sampling error of ``beta1_hat`` and of first-step ``psi_hat`` is carried
through.  Singular variances are inverted with a truncated pseudo-inverse and
the degrees of freedom follow the rank that was actually used.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .estimate import TwoStageFit, cluster_sum, demean, independent_columns
from .instruments import InstrumentMatrix

PINV_RTOL = 1e-10


@dataclass
class TestResult:
    method: str
    statistic: float
    df: int
    p_value: float
    extras: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @property
    def defined(self) -> bool:
        return self.df > 0 and np.isfinite(self.p_value)

    def reject(self, alpha: float = 0.05) -> bool:
        return self.defined and self.p_value < alpha

    def row(self) -> dict:
        return {"method": self.method, "statistic": self.statistic, "df": self.df, "p_value": self.p_value}


def _chi2(method, stat, df, **extras) -> TestResult:
    if df <= 0:
        return TestResult(method, float("nan"), 0, float("nan"), {"note": "undefined: zero degrees of freedom", **extras})
    return TestResult(method, float(stat), int(df), float(stats.chi2.sf(stat, df)), extras)


def truncated_pinv(M: np.ndarray, rtol: float = PINV_RTOL) -> tuple[np.ndarray, int]:
    """Pseudo-inverse of a symmetric PSD matrix dropping eigenvalues below ``rtol`` times the largest."""
    M = 0.5 * (M + M.T)
    w, U = np.linalg.eigh(M)
    if w.size == 0 or w[-1] <= 0:
        return np.zeros_like(M), 0
    keep = w > rtol * w[-1]
    return (U[:, keep] / w[keep]) @ U[:, keep].T, int(keep.sum())


def wald(theta: np.ndarray, cov: np.ndarray, method: str, **extras) -> TestResult:
    inv, rank = truncated_pinv(cov)
    stat = float(theta @ inv @ theta)
    res = _chi2(method, stat, rank, **extras)
    if rank:
        res.extras["F"] = stat / rank
    return res


def _bread_block(fit: TwoStageFit, B: np.ndarray, Zt_X: np.ndarray, coef_xb: float) -> np.ndarray:
    """``B`` times ``coef_xb Z'X`` restricted to shared columns, i.e. the beta1 column block."""
    J = np.zeros((Zt_X.shape[0], fit.X_iso.shape[1]))
    J[:, fit.shared] = coef_xb * Zt_X[:, fit.shared]
    return B @ J


def _check_same_data(a: TwoStageFit, b: TwoStageFit):
    if a.reduced_form or b.reduced_form:
        raise ValueError("tests need the structural (isolated-agent) first stage")
    if not (np.array_equal(a.y, b.y) and np.array_equal(a.beta1, b.beta1)):
        raise ValueError("fits must come from the same data and first stage")


def _stacked_vcov(bread, blocks_iso, blocks_niso, cl_iso, cl, cov_type):
    scores = np.vstack([blocks_iso, blocks_niso])
    clusters = np.concatenate([cl_iso, cl]) if cov_type == "cluster" else None
    s = scores if clusters is None else cluster_sum(scores, clusters)
    binv = np.linalg.inv(bread)
    V = binv @ (s.T @ s) @ binv.T
    return 0.5 * (V + V.T)


# ------------------------------------------------------------- encompassing


def encompassing_test(a: TwoStageFit, b: TwoStageFit, cov_type: str = "cluster", method: str = "wald") -> TestResult:
    """Does the specification ``a`` encompass ``b``?

    ``delta = H_b^-1 V_b'Z_b W_b Z_b' e_a`` measures how much of ``a``'s
    residual the regressors of ``b`` explain.  Its covariance comes from the
    joint sandwich over ``(beta1, psi_a, delta)``.  For a vector the rank-zero
    test coincides with the Wald test, so ``method="rank"`` only relabels it.
    """
    if method not in ("wald", "rank"):
        raise ValueError("method must be 'wald' or 'rank'")
    _check_same_data(a, b)
    Va, Vb = a.V, b.V
    Ba, Bb = a.B, b.B
    ea = a.resid
    delta = np.linalg.solve(b.H, Bb @ (b.Z.T @ ea))
    d1, pa, pb = a.X_iso.shape[1], a.psi.size, b.psi.size
    n = d1 + pa + pb
    BF = np.zeros((n, n))
    BF[:d1, :d1] = a.X_iso.T @ a.X_iso
    BF[d1 : d1 + pa, :d1] = _bread_block(a, Ba, a.Z.T @ a.X, a.psi[a.xb_index])
    BF[d1 : d1 + pa, d1 : d1 + pa] = a.H
    BF[d1 + pa :, :d1] = _bread_block(b, Bb, b.Z.T @ b.X, a.psi[a.xb_index] + delta[b.xb_index])
    BF[d1 + pa :, d1 : d1 + pa] = Bb @ (b.Z.T @ Va)
    BF[d1 + pa :, d1 + pa :] = b.H
    e_b = ea - Vb @ delta
    iso = np.hstack([a.X_iso * a.resid_iso[:, None], np.zeros((a.y_iso.size, pa + pb))])
    niso = np.hstack([
        np.zeros((ea.size, d1)),
        (a.Z @ Ba.T) * ea[:, None],
        (b.Z @ Bb.T) * e_b[:, None],
    ])
    V = _stacked_vcov(BF, iso, niso, a.cl_iso, a.cl, cov_type)
    # test m = H_b delta; with shared instruments, m vanishes identically on
    # regressors of b that also appear in a, so those components are dropped
    Hb = b.H
    m = Hb @ delta
    cov_m = Hb @ V[d1 + pa :, d1 + pa :] @ Hb.T
    keep = np.ones(pb, dtype=bool)
    if a.Z.shape == b.Z.shape and np.array_equal(a.Z, b.Z) and np.array_equal(a.W, b.W):
        keep = ~np.array([any(np.array_equal(Vb[:, j], Va[:, i]) for i in range(pa)) for j in range(pb)])
    tag = "encompassing_rank" if method == "rank" else "encompassing_wald"
    return wald(m[keep], cov_m[np.ix_(keep, keep)], tag, delta=delta.tolist(), tested=np.flatnonzero(keep).tolist())


# ------------------------------------------------------------- Type II tests


def _demeaned_z(fit: TwoStageFit, Z2) -> np.ndarray:
    if isinstance(Z2, InstrumentMatrix):
        if fit.groups is None:
            raise ValueError("fit lacks group keys; pass a demeaned array")
        return demean(Z2.Z, fit.groups)
    return np.asarray(Z2, dtype=float)


def sargan_type2(fit1: TwoStageFit, Z2, cov_type: str = "robust") -> TestResult:
    """Exogeneity of the part of ``Z2`` not spanned by the Type I matrix of ``fit1``.

    ``E = (M1 Z2)' e`` with ``e`` the residual of the ``Z1`` fit.  Its variance
    linearizes ``e`` around the true parameters, so each agent contributes
    ``R_i e_i`` minus the effect of its score on ``(beta1_hat, psi_hat)``.
    """
    Z1 = fit1.Z
    Z2 = _demeaned_z(fit1, Z2)
    coef, *_ = np.linalg.lstsq(Z1, Z2, rcond=None)
    R = Z2 - Z1 @ coef
    # columns of Z2 already spanned by Z1 leave only round-off behind
    R[:, np.linalg.norm(R, axis=0) <= 1e-8 * np.linalg.norm(Z2, axis=0)] = 0.0
    rank = independent_columns(R, rtol=1e-8).size if R.size else 0
    e = fit1.resid
    E = R.T @ e
    if rank == 0:
        return _chi2("sargan_type2", float("nan"), 0, rank_M1Z2=0)
    d1 = fit1.X_iso.shape[1]
    C = np.zeros((R.shape[1], d1 + fit1.psi.size))
    C[:, :d1][:, fit1.shared] = fit1.psi[fit1.xb_index] * (R.T @ fit1.X[:, fit1.shared])
    C[:, d1:] = R.T @ fit1.V
    s, cl = fit1.scores()
    infl = -s @ np.linalg.inv(fit1.bread()).T @ C.T
    infl[fit1.y_iso.size :] += R * e[:, None]
    g = cluster_sum(infl, cl) if cov_type == "cluster" else infl
    inv, used = truncated_pinv(g.T @ g)
    stat = float(E @ inv @ E)
    return _chi2("sargan_type2", stat, used, rank_M1Z2=int(rank))


def wald_type2(fit1: TwoStageFit, fit2: TwoStageFit, cov_type: str = "cluster") -> TestResult:
    """Compare ``psi`` from ``Z1`` with ``psi`` from ``Z2`` (or ``Z1`` and ``Z2`` combined)."""
    _check_same_data(fit1, fit2)
    d1, p = fit1.X_iso.shape[1], fit1.psi.size
    diff = fit1.psi - fit2.psi
    if not np.any(diff):
        return TestResult("wald_type2", 0.0, p, 1.0, {"note": "identical estimates"})
    n = d1 + 2 * p
    BF = np.zeros((n, n))
    BF[:d1, :d1] = fit1.X_iso.T @ fit1.X_iso
    for k, f in enumerate((fit1, fit2)):
        r = slice(d1 + k * p, d1 + (k + 1) * p)
        BF[r, :d1] = _bread_block(f, f.B, f.Z.T @ f.X, f.psi[f.xb_index])
        BF[r, r] = f.H
    iso = np.hstack([fit1.X_iso * fit1.resid_iso[:, None], np.zeros((fit1.y_iso.size, 2 * p))])
    niso = np.hstack([
        np.zeros((fit1.y.size, d1)),
        (fit1.Z @ fit1.B.T) * fit1.resid[:, None],
        (fit2.Z @ fit2.B.T) * fit2.resid[:, None],
    ])
    V = _stacked_vcov(BF, iso, niso, fit1.cl_iso, fit1.cl, cov_type)
    D = np.hstack([np.zeros((p, d1)), np.eye(p), -np.eye(p)])
    return wald(diff, D @ V @ D.T, "wald_type2", diff=diff.tolist())


# ------------------------------------------------------------- instruments


def _partial_out(M, W):
    if W.shape[1] == 0:
        return M
    coef, *_ = np.linalg.lstsq(W, M, rcond=None)
    return M - W @ coef


def weak_instrument_rank(fit: TwoStageFit, cov_type: str = "robust", exog: str = "x") -> TestResult:
    """Rank test that the first-stage matrix of the endogenous block has full column rank.

    After partialling the included exogenous regressors out of both sides and
    orthonormalizing the excluded instruments, the first-stage coefficients
    are scaled by the inverse square root of the residual covariance.  The
    smallest singular direction gives the statistic; ``cov_type`` sets the
    variance of those coefficients ("homoskedastic" gives Cragg-Donald).
    ``exog="x"`` partials out every column of ``x`` and ``xbar``; ``exog="xb"``
    only the regressors of the fitted model, leaving the unused direction of
    ``x`` among the excluded instruments.
    """
    Q = fit.Q
    p = Q.shape[1]
    if exog not in ("x", "xb"):
        raise ValueError("exog must be 'x' or 'xb'")
    W = np.hstack([fit.X, fit.Xbar]) if exog == "x" else fit.V[:, p:]
    Qt = _partial_out(Q, W)
    Zt = _partial_out(fit.Z, W)
    U, sv, _ = np.linalg.svd(Zt, full_matrices=False)
    Zt = U[:, sv > 1e-10 * sv[0]]
    k = Zt.shape[1]
    if k < p:
        raise ValueError(f"{p} endogenous regressors but only {k} excluded instruments")
    name = "cragg_donald" if cov_type == "homoskedastic" else "kleibergen_paap"
    if independent_columns(Qt, rtol=1e-8).size < p:
        # differences below solver precision: the first stage cannot have full rank
        return TestResult(name, 0.0, k - p + 1, 1.0, {"note": "collinear endogenous regressors", "min_singular": 0.0})
    Pi = Zt.T @ Qt
    E = Qt - Zt @ Pi
    w, Ve = np.linalg.eigh(E.T @ E)
    Sig_mh = (Ve / np.sqrt(w)) @ Ve.T
    Theta = Pi @ Sig_mh
    Uth, sth, Vth = np.linalg.svd(Theta)
    A_perp = Uth[:, p - 1 :]
    B_perp = Vth.T[:, p - 1 :]
    lam = (A_perp.T @ Theta @ B_perp).ravel()
    df = k - p + 1
    n = Q.shape[0]
    if cov_type == "homoskedastic":
        stat = n * float(lam @ lam)
        return TestResult("cragg_donald", stat, df, float(stats.chi2.sf(stat, df)), {"min_singular": float(sth[-1])})
    # vec(Z'E) = sum_i e_i kron z_i ; right-scaled by Sigma^-1/2
    scores = (E[:, :, None] * Zt[:, None, :]).reshape(n, p * k)
    if cov_type == "cluster":
        scores = cluster_sum(scores, fit.cl)
    K = np.kron(B_perp.T @ Sig_mh, A_perp.T)
    L = scores @ K.T
    inv, used = truncated_pinv(L.T @ L)
    stat = float(lam @ inv @ lam)
    res = _chi2("kleibergen_paap", stat, df, min_singular=float(sth[-1]), rank_used=used)
    return res


def sargan_overid(fit: TwoStageFit, first_stage: bool = True) -> TestResult:
    """Overidentification statistic under homoskedastic errors.

    With ``first_stage=False`` this is the classical ``n e'P_Z e / e'e``.  By
    default the variance of ``Z'e`` also carries the estimation error of
    ``beta1_hat``, which enters the residual through ``x'beta1_hat`` and loads
    on the columns of ``x`` that are instruments but not regressors.
    """
    e = fit.resid
    k, p = fit.Z.shape[1], fit.V.shape[1]
    if k - p <= 0:
        return _chi2("sargan", float("nan"), 0)
    Z = fit.Z
    if not first_stage or fit.reduced_form:
        coef, *_ = np.linalg.lstsq(Z, e, rcond=None)
        Pe = Z @ coef
        return _chi2("sargan", e.size * float(Pe @ Pe) / float(e @ e), k - p)
    s2 = float(e @ e) / e.size
    e1 = fit.resid_iso
    var_b1 = float(e1 @ e1) / e1.size * np.linalg.inv(fit.X_iso.T @ fit.X_iso)
    G = _bread_block(fit, np.eye(k), Z.T @ fit.X, fit.psi[fit.xb_index])
    P = np.eye(k) - (Z.T @ fit.V) @ np.linalg.solve(fit.H, fit.B)
    omega = P @ (s2 * (Z.T @ Z) + G @ var_b1 @ G.T) @ P.T
    g = Z.T @ e
    inv, used = truncated_pinv(omega)
    return _chi2("sargan", float(g @ inv @ g), used)


def write_results(results: dict[str, TestResult], path) -> Path:
    """CSV with one row per labelled test."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["test", "method", "statistic", "df", "p_value"])
        for label, r in results.items():
            w.writerow([label, r.method, r.statistic, r.df, r.p_value])
    return path
