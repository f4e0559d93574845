"""
Ensemble estimators: jackknife errors, loop cumulants, Eulerian products, stationarity, self-averaging.

Core claims:
    - the jackknife reproduces the textbook standard error of a mean
    - loop cumulants of Haar orbits approach the free cumulants of the spectrum
    - products over non-Eulerian edge multisets vanish in law
    - the two-site closed chain forgets its initial state and D becomes uniform
    - the quantum generating function is exactly zero at h = 0
"""

import csv

import numpy as np
import pytest
from pytest import approx

from qssep_lab.config import ChainConfig
from qssep_lab.errors import InvalidArgumentError, SizeLimitError
from qssep_lab.ensemble import (
    LoopSpec, disjoint_cycle_cumulant, estimate_loop_cumulant, eulerian_test, fit_scaling_exponent,
    haar_stationarity_test, is_balanced, jackknife, loop_expectation, loop_prediction, parse_edges,
    quantum_cgf_samples, self_averaging_test, write_results_csv,
)
from qssep_lab.gmatrix import mean_stationary_profile, stationary_samples
from qssep_lab.grid import GridFunction
from qssep_lab.haar import SpectralMeasure, haar_model, orbit_ensemble


def _projector_orbits(N, samples, seed):
    d = np.array([1.0] * (N // 2) + [0.0] * (N - N // 2))
    return orbit_ensemble(d, samples, np.random.default_rng(seed))


@pytest.fixture(scope="module")
def open_chain_ensemble():
    # 4000 trajectories x 5 snapshots = 2 10^4 stationary samples
    cfg = ChainConfig.open_chain(20, 0.0, 1.0, dt=5e-3, seed=5)
    return stationary_samples(cfg, trajectories=4000, snapshots=5, burn_in=400.0, interval=100.0, scheme="bond",
                              workers=4)


class TestJackknife:
    def test_mean_matches_standard_error(self):
        x = np.random.default_rng(0).standard_normal(200)
        value, err = jackknife(x, lambda m: m[:, 0])
        assert value == approx(x.mean())
        assert err == approx(x.std(ddof=1) / np.sqrt(200))

    def test_blocks(self):
        x = np.arange(12.0)
        value, err = jackknife(x, lambda m: m[:, 0], blocks=4)
        block_means = x.reshape(4, 3).mean(axis=1)
        assert value == approx(5.5)
        assert err == approx(block_means.std(ddof=1) / 2.0)

    def test_invalid_block_count(self):
        with pytest.raises(InvalidArgumentError):
            jackknife(np.arange(5.0), lambda m: m[:, 0], blocks=1)
        with pytest.raises(InvalidArgumentError):
            jackknife(np.arange(5.0), lambda m: m[:, 0], blocks=6)

    def test_nonlinear_estimator(self):
        x = np.random.default_rng(1).normal(2.0, 0.1, 5000)
        value, err = jackknife(x, lambda m: m[:, 0] ** 2)
        assert value == approx(4.0, abs=5 * err)
        assert err == approx(2 * 2.0 * 0.1 / np.sqrt(5000), rel=0.1)


class TestLoopSpec:
    def test_edges_close_the_loop(self):
        loop = LoopSpec.parse("3,1,2")
        assert loop.p == 3
        assert loop.edges == [(3, 1), (1, 2), (2, 3)]
        assert str(loop) == "3,1,2"

    @pytest.mark.parametrize("text", ["1,1", "0,2", "1,x", ""])
    def test_invalid(self, text):
        with pytest.raises(InvalidArgumentError):
            LoopSpec.parse(text)

    def test_outside_chain(self):
        with pytest.raises(InvalidArgumentError):
            LoopSpec((1, 5)).check(4)

    def test_prediction_is_indicator_cumulant(self):
        assert loop_prediction((2, 8), 10) == approx(0.2 * 0.2)
        assert loop_prediction((1, 2, 4), 5) == approx(0.2 * (1 - 2 * 0.4) * (1 - 0.8))
        assert loop_prediction((1, 4, 2), 5) == approx(loop_prediction((1, 2, 4), 5))


class TestLoopCumulants:
    def test_synthetic_second_cumulant(self):
        rng = np.random.default_rng(2)
        S = 20_000
        X = 0.3 + 0.1 * (rng.standard_normal(S) + 1j * rng.standard_normal(S))
        G = np.zeros((S, 2, 2), dtype=complex)
        G[:, 0, 1] = X
        G[:, 1, 0] = np.conj(X)
        est = estimate_loop_cumulant(G, (1, 2))
        # N * (E|X|^2 - |E X|^2) with Var = 0.02
        assert est.within(0.04, k=4)
        assert est.imag == approx(0.0, abs=1e-12)

    def test_haar_orbit_matches_free_cumulant(self):
        N = 6
        samples = _projector_orbits(N, 4000, 3)
        est = estimate_loop_cumulant(samples, (1, 4))
        target = loop_prediction((1, 4), N, haar_model(SpectralMeasure.bernoulli(0.5)))
        assert target == approx(0.25)
        assert abs(est.value - target) <= 4 * est.stderr + 1.0 / N

    def test_first_order_is_mean_diagonal(self):
        samples = _projector_orbits(4, 2000, 4)
        est = loop_expectation(samples, (2,))
        assert abs(est.value - 0.5) <= 4 * est.stderr

    def test_limits(self):
        samples = _projector_orbits(6, 10, 5)
        with pytest.raises(SizeLimitError):
            estimate_loop_cumulant(samples, (1, 2, 3, 4, 5, 6), min_samples=2)
        with pytest.raises(InvalidArgumentError):
            estimate_loop_cumulant(samples, (1, 2))

    @pytest.mark.slow
    def test_open_chain_profile(self, open_chain_ensemble):
        N = 20
        diag = np.real(np.diagonal(open_chain_ensemble.samples, axis1=1, axis2=2))
        per_trajectory = diag.reshape(-1, 5, N).mean(axis=1)
        mean = per_trajectory.mean(axis=0)
        stderr = per_trajectory.std(axis=0, ddof=1) / np.sqrt(per_trajectory.shape[0])
        exact = mean_stationary_profile(open_chain_ensemble.config)
        np.testing.assert_allclose(exact, np.arange(1, N + 1) / (N + 1), atol=1e-12)
        assert len(open_chain_ensemble) >= 20_000
        assert np.all(np.abs(mean - exact) <= 3 * stderr)

    @pytest.mark.slow
    @pytest.mark.parametrize("loop", [
        (3, 15), (5, 15), (7, 15), (9, 15), (11, 15),
        (2, 7, 15), (3, 8, 15), (4, 8, 15),
    ])
    def test_open_chain_loop_cumulants(self, open_chain_ensemble, loop):
        est = estimate_loop_cumulant(open_chain_ensemble, loop, blocks=400)
        assert abs(est.value - loop_prediction(loop, 20)) <= 3 * est.stderr


class TestEulerian:
    def test_balance(self):
        assert is_balanced([(1, 2), (2, 1)])
        assert is_balanced([(1, 2), (2, 3), (3, 1)])
        assert not is_balanced([(1, 2), (2, 3)])

    def test_parse_edges(self):
        assert parse_edges("1-2, 2-3") == [(1, 2), (2, 3)]
        with pytest.raises(InvalidArgumentError):
            parse_edges("1_2")
        with pytest.raises(InvalidArgumentError):
            parse_edges(" , ")

    def test_haar_orbits(self):
        samples = _projector_orbits(6, 2000, 6)
        open_path = eulerian_test(samples, [(1, 2), (2, 3)])
        assert abs(open_path.value) <= 4 * open_path.stderr
        assert abs(open_path.imag) <= 4 * open_path.imag_stderr
        cycle = eulerian_test(samples, [(1, 2), (2, 1)])
        assert cycle.value > 10 * cycle.stderr

    def test_edge_range(self):
        samples = _projector_orbits(3, 1000, 7)
        with pytest.raises(InvalidArgumentError):
            eulerian_test(samples, [(1, 4)])

    @pytest.mark.slow
    def test_open_chain_non_eulerian_products_vanish(self, open_chain_ensemble):
        for edges in ([(3, 7), (7, 12)], [(5, 15)], [(2, 9), (9, 4), (4, 11)]):
            est = eulerian_test(open_chain_ensemble, edges, blocks=400)
            assert abs(est.value) < 3 * est.stderr
            assert abs(est.imag) < 3 * est.imag_stderr


class TestStationarity:
    def test_short_time_far_from_uniform(self):
        cfg = ChainConfig(N=2, topology="closed", dt=1e-2)
        res = haar_stationarity_test(cfg, 500, 0.1, rng=np.random.default_rng(8))
        assert res.ks > 0.5
        assert res.D.shape == (500,)

    def test_long_time_uniform(self):
        cfg = ChainConfig(N=2, topology="closed", dt=1e-2)
        res = haar_stationarity_test(cfg, 500, 5.0, rng=np.random.default_rng(9))
        assert res.ks < 0.1

    def test_needs_two_site_closed_chain(self):
        with pytest.raises(InvalidArgumentError):
            haar_stationarity_test(ChainConfig(N=3, topology="closed"), 10, 1.0)

    @pytest.mark.slow
    def test_acceptance(self):
        cfg = ChainConfig(N=2, topology="closed", dt=1e-2, seed=1)
        assert haar_stationarity_test(cfg, 5000, 0.1).ks > 0.5
        assert haar_stationarity_test(cfg, 5000, 10.0).ks < 0.03


class TestSelfAveraging:
    def test_zero_field(self):
        samples = {N: _projector_orbits(N, 50, N) for N in (4, 8)}
        rows = self_averaging_test(samples, 0.0)
        assert [r.N for r in rows] == [4, 8]
        for row in rows:
            assert row.mean == approx(0.0, abs=1e-12)
            assert row.std == approx(0.0, abs=1e-12)
            assert row.rejected == 0

    def test_constant_field_on_orbit_is_deterministic(self):
        # det(I + G (e^h - 1)) only sees the spectrum of G
        rows = self_averaging_test({6: _projector_orbits(6, 20, 1)}, 0.5)
        assert rows[0].mean == approx(0.25, abs=1e-12)
        assert rows[0].std == approx(0.0, abs=1e-10)

    def test_non_positive_determinants_rejected(self):
        G = np.stack([np.diag([-2.0, 0.0]), np.zeros((2, 2))]).astype(complex)
        values, rejected = quantum_cgf_samples(G, 1.0)
        assert rejected == 1
        assert values == approx([0.0])

    def test_missing_size(self):
        with pytest.raises(InvalidArgumentError):
            self_averaging_test({4: _projector_orbits(4, 5, 0)}, 0.1, sizes=[4, 8])

    @pytest.mark.slow
    def test_open_chain_fluctuations_shrink(self):
        samples = {
            N: stationary_samples(ChainConfig.open_chain(N, 0.0, 1.0, dt=2e-2, seed=7), trajectories=500,
                                  burn_in=N * N / 2.0, scheme="bond", workers=2)
            for N in (20, 40)
        }
        small, large = self_averaging_test(samples, GridFunction.parse("sin:1"), [20, 40])
        assert small.samples == large.samples == 500
        assert small.rejected == large.rejected == 0
        assert large.std / small.std < 0.75
        for row in self_averaging_test(samples, 0.0, [20, 40]):
            assert row.mean == 0.0 and row.std == 0.0


class TestScaling:
    def test_exponent(self):
        sizes = [10, 20, 40]
        assert fit_scaling_exponent(sizes, [3.0 / n ** 2 for n in sizes]) == approx(-2.0)

    def test_exponent_needs_nonzero_values(self):
        with pytest.raises(InvalidArgumentError):
            fit_scaling_exponent([10, 20], [1.0, 0.0])

    def test_overlapping_cycles_rejected(self):
        samples = _projector_orbits(4, 10, 0)
        with pytest.raises(InvalidArgumentError):
            disjoint_cycle_cumulant(samples, [(1, 2), (2, 3)])

    def test_disjoint_cycles_decorrelate(self):
        samples = _projector_orbits(8, 2000, 10)
        est = disjoint_cycle_cumulant(samples, [(1, 2), (3, 4)])
        assert abs(est.value) <= 4 * est.stderr + 0.01

    def test_results_csv(self, tmp_path):
        path = write_results_csv(str(tmp_path / "r.csv"), [("loop", 2, "1-2", 0.1, 0.01, 1000, 10, 0.09, 0.01)])
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["estimator", "p", "sites", "value", "stderr", "samples", "N", "prediction", "bias"]
        assert rows[1][0] == "loop"
