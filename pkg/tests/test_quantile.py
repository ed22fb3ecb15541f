from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qpeer.network import Network
from qpeer.quantile import (
    PeerQuantiles,
    check_levels,
    peer_quantile,
    quantile_decomposition,
    type7_quantile,
    uniform_levels,
    weighted_quantile,
)

from conftest import random_network
from oracles import exact_type7

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
TAU_GRID = [k / 20 for k in range(21)]


class TestType7:
    @pytest.mark.parametrize(
        "values,tau,expected",
        [([1, 3], 0.5, 2.0), ([1, 3], 0.1, 1.2), ([5, 2, 9], 0, 2.0), ([5, 2, 9], 1, 9.0)],
    )
    def test_reference_points(self, values, tau, expected):
        assert type7_quantile(values, tau) == pytest.approx(expected, abs=1e-15)

    def test_matches_numpy_linear(self, rng):
        for d in range(1, 9):
            v = rng.normal(size=d)
            for tau in TAU_GRID:
                assert type7_quantile(v, tau) == pytest.approx(np.quantile(v, tau), abs=1e-13)

    def test_rational_oracle_small_samples(self, rng):
        for d in range(1, 6):
            for _ in range(5):
                v = rng.integers(-20, 20, size=d)
                for k in range(21):
                    want = exact_type7(v, Fraction(k, 20))
                    assert type7_quantile(v, k / 20) == pytest.approx(float(want), abs=1e-12)

    def test_empty_and_bad_tau(self):
        with pytest.raises(ValueError):
            type7_quantile([], 0.5)
        with pytest.raises(ValueError):
            type7_quantile([1.0], 1.5)

    @given(st.lists(finite, min_size=1, max_size=8), st.floats(0, 1), st.randoms())
    def test_permutation_invariant(self, values, tau, r):
        shuffled = list(values)
        r.shuffle(shuffled)
        assert type7_quantile(values, tau) == type7_quantile(shuffled, tau)

    @given(st.lists(finite, min_size=1, max_size=8), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_tau(self, values, t1, t2):
        lo, hi = sorted((t1, t2))
        assert type7_quantile(values, lo) <= type7_quantile(values, hi) + 1e-9


class TestWeighted:
    def test_equal_weights_bit_identical(self, rng):
        for d in range(1, 7):
            v = rng.normal(size=d)
            for k in range(101):
                tau = k / 100
                for w in (1.0, 2.5):
                    assert weighted_quantile(v, np.full(d, w), tau) == type7_quantile(v, tau)

    def test_symmetric_pair(self):
        assert weighted_quantile([1, 3], [1, 1], 0.5) == 2.0

    @given(
        st.lists(st.tuples(finite, st.floats(0.01, 10)), min_size=1, max_size=8),
    )
    def test_endpoints(self, pairs):
        v = [p[0] for p in pairs]
        w = [p[1] for p in pairs]
        assert weighted_quantile(v, w, 0.0) == min(v)
        assert weighted_quantile(v, w, 1.0) == max(v)

    @given(
        st.lists(st.tuples(st.integers(-50, 50), st.integers(1, 9)), min_size=1, max_size=6),
        st.integers(0, 40),
    )
    def test_knot_interpolation_oracle(self, pairs, k):
        # each order statistic is flat on [G_(k-1), G_k - w_min], then a linear ramp
        pairs = sorted(pairs, key=lambda p: p[0])
        v = [Fraction(p[0]) for p in pairs]
        w = [Fraction(p[1]) for p in pairs]
        tau = Fraction(k, 40)
        if len(v) == 1:
            want = v[0]
        else:
            D = sum(w) - min(w)
            xs, ys, G = [], [], Fraction(0)
            for vi, wi in zip(v, w):
                xs += [G / D, (G + wi - min(w)) / D]
                ys += [vi, vi]
                G += wi
            want = None
            for x0, x1, y0, y1 in zip(xs, xs[1:], ys, ys[1:]):
                if x0 <= tau <= x1:
                    want = y0 if x1 == x0 else y0 + (y1 - y0) * (tau - x0) / (x1 - x0)
                    break
        got = weighted_quantile([p[0] for p in pairs], [p[1] for p in pairs], float(tau))
        assert got == pytest.approx(float(want), abs=1e-9)

    @given(st.integers(0, 2**32 - 1), st.floats(0, 1))
    def test_continuous_across_rank_swaps(self, seed, tau):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=5)
        w = rng.uniform(0.1, 5, size=5)
        v[3] = v[1] + 1e-9  # near-tied pair with unequal weights
        swapped = v.copy()
        swapped[1], swapped[3] = v[3], v[1]
        gap = abs(weighted_quantile(v, w, tau) - weighted_quantile(swapped, w, tau))
        assert gap <= 1e-9 + 1e-12

    def test_heavier_weight_pulls_quantile(self):
        assert weighted_quantile([0, 1], [1, 5], 0.5) > weighted_quantile([0, 1], [1, 1], 0.5)

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            weighted_quantile([1, 2], [1, 0], 0.5)
        with pytest.raises(ValueError):
            weighted_quantile([1, 2], [1], 0.5)


class TestPeerQuantile:
    def test_examples(self):
        A = np.zeros((4, 4))
        A[0, 1:] = 1
        A[1, 2] = 1
        net = Network.from_adjacency([A])
        y = np.array([0.0, 2.0, 5.0, 9.0])
        assert peer_quantile(net, y, 0, 0.5) == 5.0
        for tau in (0, 0.3, 1):
            assert peer_quantile(net, y, 1, tau) == 5.0
        y2 = np.array([0.0, 1.0, 3.0, 0.0])
        A2 = np.zeros((3, 3))
        A2[0, 1] = A2[0, 2] = 1
        assert peer_quantile(Network.from_adjacency([A2]), y2[:3], 0, 0.5) == 2.0
        with pytest.raises(ValueError, match="isolated"):
            peer_quantile(net, y, 3, 0.5)

    def test_decomposition_examples(self):
        A = np.zeros((3, 3))
        A[0, 1] = A[0, 2] = 1
        net = Network.from_adjacency([A])
        y = np.array([0.0, 3.0, 1.0])
        d0 = quantile_decomposition(net, y, 0, 0.0)
        assert (d0.j1, d0.omega) == (2, 0.0)
        d1 = quantile_decomposition(net, y, 0, 0.1)
        assert (d1.j1, d1.j2) == (2, 1)
        assert d1.omega == pytest.approx(0.1)
        assert d1.recompose(y) == pytest.approx(1.2)

    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_recomposition_exact(self, seed, weighted):
        rng = np.random.default_rng(seed)
        net = random_network(rng, sizes=(9,), p=0.4, weighted=weighted)
        y = rng.normal(size=net.n)
        levels = np.array([0, 0.1, 0.25, 0.5, 0.9, 1.0])
        pq = PeerQuantiles.from_network(net, levels)
        q, j1, j2, om = pq.decompose(y)
        has = j1[:, 0] >= 0
        rec = (1 - om) * y[np.maximum(j1, 0)] + om * y[np.maximum(j2, 0)]
        np.testing.assert_allclose(rec[has], q[has], rtol=1e-12, atol=1e-12)
        assert np.all(q[~has] == 0)

    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_lipschitz_in_outcomes(self, seed, weighted):
        rng = np.random.default_rng(seed)
        net = random_network(rng, sizes=(10,), p=0.4, weighted=weighted)
        pq = PeerQuantiles.from_network(net, np.linspace(0, 1, 7))
        y, z = rng.normal(size=(2, net.n))
        assert np.abs(pq(y) - pq(z)).max() <= np.abs(y - z).max() + 1e-12

    def test_vectorized_matches_scalar(self, rng):
        net = random_network(rng, sizes=(7, 9), p=0.4, weighted=True)
        y = rng.normal(size=net.n)
        levels = uniform_levels(5)
        Q = PeerQuantiles.from_network(net, levels)(y)
        deg = net.out_degree()
        for i, t in product(range(net.n), range(levels.size)):
            if deg[i]:
                assert Q[i, t] == pytest.approx(peer_quantile(net, y, i, levels[t]), abs=1e-14)

    def test_ties_broken_by_index(self):
        A = np.zeros((3, 3))
        A[0, 1] = A[0, 2] = 1
        net = Network.from_adjacency([A])
        d = quantile_decomposition(net, np.array([0.0, 1.0, 1.0]), 0, 0.0)
        assert d.j1 == 1


class TestLevels:
    def test_validation(self):
        with pytest.raises(ValueError):
            check_levels([0.5, 0.2])
        with pytest.raises(ValueError):
            check_levels([0.2, 0.2])
        with pytest.raises(ValueError):
            check_levels([-0.1])
        with pytest.raises(ValueError):
            check_levels([])

    def test_uniform(self):
        np.testing.assert_allclose(uniform_levels(4), [0, 1 / 3, 2 / 3, 1])
        assert uniform_levels(1).tolist() == [0.5]
