import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from qpeer.equilibrium import LimParams, solve_equilibrium
from qpeer.estimate import (
    IdentificationError,
    LinearInMeansModel,
    NumericalError,
    QuantilePeerModel,
    demean,
    estimate_lim,
    estimate_quantile,
    fit_two_stage,
    gmm_nonisolated,
    group_keys,
    ols_isolated,
    recover_structural,
)
from qpeer.instruments import build_type1
from qpeer.network import Network, make_dataset
from qpeer.simulate import agent_types, make_rng, preset, simulate

from oracles import exactly_identified_toy, iv_two_step_covariance

LEVELS4 = [0, 1 / 3, 2 / 3, 1]


@pytest.fixture(scope="module")
def fit_a(small_sim):
    Z = build_type1(small_sim.network, small_sim.data)
    return estimate_quantile(small_sim.network, small_sim.data, LEVELS4, Z)


class TestDemean:
    def test_examples(self):
        v = np.array([3.0, 3.0, 1.0, 2.0, 5.0])
        g = np.array([0, 0, 1, 1, 2])
        np.testing.assert_array_equal(demean(v, g), [0, 0, -0.5, 0.5, 0])

    @given(st.integers(0, 2**32 - 1))
    def test_group_sums_vanish(self, seed):
        rng = np.random.default_rng(seed)
        g = rng.integers(0, 6, size=40)
        M = rng.normal(size=(40, 3))
        D = demean(M, g)
        for k in np.unique(g):
            np.testing.assert_allclose(D[g == k].sum(axis=0), 0, atol=1e-12)
        np.testing.assert_array_equal(demean(D, g)[np.bincount(g)[g] == 1], 0.0)

    def test_groups_split_isolated(self, small_sim):
        g = group_keys(small_sim.data)
        d = small_sim.data
        assert np.all(g // 2 == d.subnet)
        assert np.all((g % 2 == 1) == d.iso)


class TestFirstStage:
    def test_noiseless_recovery(self, rng):
        X = rng.normal(size=(30, 2))
        np.testing.assert_allclose(ols_isolated(X, X @ [-0.5, 1.0]), [-0.5, 1.0], atol=1e-12)

    def test_collinear_names_column(self, rng):
        X = rng.normal(size=(30, 2))
        X = np.column_stack([X, X[:, 0] + X[:, 1]])
        with pytest.raises(IdentificationError, match="x"):
            ols_isolated(X, rng.normal(size=30))

    def test_requires_isolated(self):
        A = np.array([[0, 1], [1, 0]], dtype=float)
        net = Network.from_adjacency([A, A])
        data = make_dataset(net, np.arange(8.0).reshape(4, 2), np.arange(4.0))
        Z = build_type1(net, data, max_distance=1)
        with pytest.raises(IdentificationError, match="isolated"):
            estimate_quantile(net, data, [0.5], Z)

    def test_dgp_recovery(self, fit_a):
        np.testing.assert_allclose(fit_a.beta1, [-0.5, 1.0], atol=0.1)


class TestSecondStage:
    def test_too_few_instruments(self, rng):
        with pytest.raises(IdentificationError):
            gmm_nonisolated(rng.normal(size=(20, 3)), rng.normal(size=(20, 2)), rng.normal(size=20))

    def test_singular_hessian(self, rng):
        V = rng.normal(size=(20, 2))
        V = np.column_stack([V, V[:, 0]])
        with pytest.raises(NumericalError, match="singular"):
            gmm_nonisolated(V, rng.normal(size=(20, 4)), rng.normal(size=20))

    def test_exactly_identified_is_iv(self, rng):
        V, Z, y = rng.normal(size=(50, 3)), rng.normal(size=(50, 3)), rng.normal(size=50)
        psi, _ = gmm_nonisolated(V, Z, y)
        np.testing.assert_allclose(psi, np.linalg.solve(Z.T @ V, Z.T @ y), rtol=1e-9)

    def test_noiseless_exact(self, rng):
        V, Z = rng.normal(size=(50, 3)), rng.normal(size=(50, 5))
        psi, _ = gmm_nonisolated(V, Z, V @ [0.3, 0.8, -0.2])
        np.testing.assert_allclose(psi, [0.3, 0.8, -0.2], atol=1e-12)

    def test_first_order_condition(self, fit_a):
        f = fit_a.fit
        foc = f.B @ (f.Z.T @ f.resid)
        assert np.linalg.norm(foc) <= 1e-8 * max(1.0, np.linalg.norm(f.B @ (f.Z.T @ f.y)))

    def test_noiseless_equilibrium_recovery(self):
        sim = simulate(preset("A", S=10), make_rng(3))
        alpha = agent_types(sim.spec, sim.data, np.zeros(sim.network.n))
        y = solve_equilibrium(sim.spec.params, sim.network, alpha, tol=1e-13)
        data = sim.data.with_outcome(y)
        res = estimate_quantile(sim.network, data, LEVELS4, build_type1(sim.network, data))
        np.testing.assert_allclose(res.lambda_tau, [0, 0.05, 0.2, 0.3], atol=1e-7)
        assert res.lambda2 == pytest.approx(0.2, abs=1e-7)
        np.testing.assert_allclose(res.beta1, [-0.5, 1.0], atol=1e-8)


class TestStructural:
    def test_example(self):
        vals, _ = recover_structural([0.3, 0.8], 1)
        lam, lam2, theta, theta1, theta2 = vals
        assert (lam, lam2) == pytest.approx((0.3, 0.2))
        assert theta == pytest.approx(0.375)
        assert theta2 == pytest.approx(0.25)
        assert theta1 == pytest.approx((0.3 - 0.2) / 0.8)

    def test_zero_conformity(self):
        vals, _ = recover_structural([0.1, 0.2, 1.0, 0.5, -0.4], 2)
        np.testing.assert_allclose(vals[3:5], [0.1, 0.2])
        np.testing.assert_allclose(vals[-2:], [0.5, -0.4])

    def test_out_of_range(self):
        with pytest.raises(IdentificationError, match="conformity share"):
            recover_structural([0.1, -0.1], 1)

    @given(
        st.lists(st.floats(-0.3, 0.3), min_size=1, max_size=4),
        st.floats(0.0, 3.0),
    )
    def test_round_trip_from_theta(self, theta, theta2):
        # forward map: lambda2 = theta2/(1+theta2), lambda_tau = theta_tau (1 - lambda2)
        lam2 = theta2 / (1 + theta2)
        lam = np.asarray(theta) * (1 - lam2)
        vals, _ = recover_structural(np.concatenate([lam, [1 - lam2]]), len(theta))
        L = len(theta)
        np.testing.assert_allclose(vals[L + 1 : 2 * L + 1], theta, atol=1e-12)
        assert vals[2 * L + 2] == pytest.approx(theta2, abs=1e-10)

    @given(st.integers(0, 2**32 - 1))
    def test_jacobian_matches_differences(self, seed):
        rng = np.random.default_rng(seed)
        L, r = int(rng.integers(1, 4)), int(rng.integers(0, 3))
        psi = np.concatenate([rng.uniform(-0.3, 0.3, L), [rng.uniform(0.5, 1.5)], rng.normal(size=r)])
        _, J = recover_structural(psi, L)
        h = 1e-6
        num = np.column_stack([
            (recover_structural(psi + h * e, L)[0] - recover_structural(psi - h * e, L)[0]) / (2 * h)
            for e in np.eye(psi.size)
        ])
        np.testing.assert_allclose(J, num, atol=1e-7)


class TestVariance:
    def test_homoskedastic_matches_closed_form(self):
        arrays = exactly_identified_toy(seed=1)
        fit = fit_two_stage(**arrays)
        V = fit.V
        want, beta1, psi = iv_two_step_covariance(
            arrays["X_iso"], arrays["y_iso"], V, arrays["Z"], arrays["y"], 1, arrays["X"]
        )
        np.testing.assert_allclose(fit.beta1, beta1, rtol=1e-10)
        np.testing.assert_allclose(fit.psi, psi, rtol=1e-10)
        np.testing.assert_allclose(fit.vcov("homoskedastic"), want, rtol=1e-8)

    @pytest.mark.parametrize("cov_type", ["cluster", "robust", "homoskedastic"])
    def test_psd(self, fit_a, cov_type):
        V = fit_a.fit.vcov(cov_type)
        np.testing.assert_array_equal(V, V.T)
        assert np.linalg.eigvalsh(V).min() >= -1e-10 * np.abs(V).max()

    def test_bad_cov_type(self, fit_a):
        with pytest.raises(ValueError):
            fit_a.fit.vcov("hc3")

    def test_se_order(self, fit_a):
        # twenty subnetworks instead of fifty, so roughly sqrt(2.5) times the reference SEs
        se = np.array([fit_a.structural_se[f"lambda[{t:.4g}]"] for t in LEVELS4])
        assert np.all(se > 0.003) and np.all(se < 0.1)


def test_scale_equivariance(small_sim):
    net, data = small_sim.network, small_sim.data
    Z = build_type1(net, data)
    a = estimate_quantile(net, data, LEVELS4, Z)
    b = estimate_quantile(net, data.with_outcome(3.0 * data.y), LEVELS4, Z)
    np.testing.assert_allclose(b.lambda_tau, a.lambda_tau, atol=1e-10)
    assert b.lambda2 == pytest.approx(a.lambda2, abs=1e-10)
    np.testing.assert_allclose(b.beta1, 3.0 * a.beta1, rtol=1e-10)


def test_lim_on_lim_data(small_sim_f):
    net, data = small_sim_f.network, small_sim_f.data
    res = estimate_lim(net, data, build_type1(net, data))
    assert res.structural["lambda"] == pytest.approx(0.55, abs=0.05)
    assert res.lambda2 == pytest.approx(0.0, abs=0.08)
    assert res.peer_params().lam == res.structural["lambda"]


def test_lim_null_effect():
    sim = simulate(preset("F", S=20, params=LimParams(0.0, 0.0)), make_rng(5))
    res = estimate_lim(sim.network, sim.data, build_type1(sim.network, sim.data))
    assert abs(res.structural["lambda"]) < 3 * res.structural_se["lambda"]


def test_unstable_flag(fit_a):
    assert not fit_a.unstable


def test_result_json(fit_a, tmp_path):
    text = fit_a.to_json(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d == json.loads(text)
    assert set(d["structural"]) >= {"lambda[0]", "lambda[1]", "lambda2", "theta1", "theta2"}
    assert d["config"]["instruments"] == "type1"
    assert len(d["vcov"]) == len(d["beta1"]) + len(d["psi"])


class TestEstimatorApi:
    def test_quantile_model(self, small_sim, fit_a):
        m = QuantilePeerModel(levels=LEVELS4).fit(small_sim.network, small_sim.data)
        np.testing.assert_allclose(m.coef_, fit_a.psi, rtol=1e-12)
        assert 0 < m.score(small_sim.network, small_sim.data) <= 1
        assert clone(m).get_params() == m.get_params()

    def test_predict_is_fitted_values(self, small_sim):
        m = QuantilePeerModel(levels=LEVELS4).fit(small_sim.network, small_sim.data)
        pred = m.predict(small_sim.network, small_sim.data)
        r = small_sim.data.y - pred
        g = group_keys(small_sim.data)
        # group means of the residual are removed by the fixed effects
        np.testing.assert_allclose(r - demean(r, g), 0, atol=1e-10)

    def test_lim_model(self, small_sim_f):
        m = LinearInMeansModel().fit(small_sim_f.network, small_sim_f.data)
        assert m.result_.model == "lim"

    def test_unfitted_and_bad_input(self, small_sim):
        with pytest.raises(RuntimeError):
            QuantilePeerModel().predict(small_sim.network, small_sim.data)
        with pytest.raises(TypeError):
            QuantilePeerModel().fit(small_sim.network, small_sim.data.x)


@pytest.mark.slow
def test_mse_falls_with_more_subnetworks():
    truth = np.array([0, 0.05, 0.2, 0.3, 0.2])
    mse = []
    for S in (25, 50, 100):
        errs = []
        for ss in np.random.SeedSequence(11).spawn(50):
            sim = simulate(preset("A", S=S), make_rng(ss))
            res = estimate_quantile(sim.network, sim.data, LEVELS4, build_type1(sim.network, sim.data))
            errs.append(np.sum((np.append(res.lambda_tau, res.lambda2) - truth) ** 2))
        mse.append(np.mean(errs))
    assert mse[0] > mse[1] > mse[2]
