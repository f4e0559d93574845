"""
Classical open SSEP: master equation and Gillespie sampler.

Core claims:
    - the generator is a rate matrix (columns sum to zero, nonnegative off-diagonal)
    - equal reservoir densities give the product Bernoulli measure
    - reservoirs (0, 1) give the linear profile i/(N+1)
    - Gillespie conserves particles without reservoirs and reproduces the exact profile
"""

import csv
import math

import numpy as np
import pytest
from pytest import approx

from qssep_lab.errors import DegeneracyError, InvalidArgumentError, SizeLimitError
from qssep_lab.ssep import (
    BoundaryRates, SsepState, build_generator, cgf_exact, empirical_covariance, empirical_profile,
    evolve_distribution, extrapolate_cgf, gillespie_run, mgf_at_time, occupation_covariance, point_distribution,
    profile, stationary_distribution, write_trajectory_csv,
)


class TestGenerator:
    @pytest.mark.parametrize("periodic", [False, True])
    def test_rate_matrix(self, periodic):
        L = build_generator(4, 0.3, 0.5, 0.2, 0.9, periodic=periodic).dense()
        np.testing.assert_allclose(L.sum(axis=0), 0.0, atol=1e-12)
        off = L - np.diag(np.diag(L))
        assert off.min() >= 0.0

    def test_bond_swaps(self):
        gen = build_generator(2)
        L = gen.dense()
        # 01 <-> 10 at rate 1, 00 and 11 frozen
        assert L[2, 1] == 1.0 and L[1, 2] == 1.0
        assert L[0, 0] == 0.0 and L[3, 3] == 0.0

    def test_size_cap(self):
        with pytest.raises(SizeLimitError):
            build_generator(13)

    def test_state_index(self):
        state = SsepState((1, 0, 1))
        assert state.index == 5
        assert SsepState.from_index(5, 3) == state
        with pytest.raises(InvalidArgumentError):
            SsepState((1, 2))


class TestStationary:
    def test_equal_densities_give_product_measure(self):
        gen = build_generator(5, *BoundaryRates.reservoirs(0.5, 0.5).as_tuple())
        np.testing.assert_allclose(stationary_distribution(gen), 1.0 / 32, atol=1e-12)
        np.testing.assert_allclose(profile(gen), 0.5, atol=1e-12)

    @pytest.mark.parametrize("N", [3, 6])
    def test_linear_profile(self, N):
        gen = build_generator(N, *BoundaryRates.reservoirs(0.0, 1.0).as_tuple())
        np.testing.assert_allclose(profile(gen), np.arange(1, N + 1) / (N + 1), atol=1e-10)

    def test_single_site(self):
        gen = build_generator(1, 0.3, 0.1, 0.5, 0.1)
        q = 0.8 / 1.0
        assert profile(gen)[0] == approx(q)
        assert cgf_exact(gen, [0.7]) == approx(math.log(1 - q + q * math.exp(0.7)))

    def test_occupation_covariance(self):
        gen = build_generator(3, *BoundaryRates.reservoirs(0.5, 0.5).as_tuple())
        np.testing.assert_allclose(occupation_covariance(gen), 0.25 * np.eye(3), atol=1e-12)
        gen = build_generator(4, *BoundaryRates.reservoirs(0.0, 1.0).as_tuple())
        C = occupation_covariance(gen)
        rho = profile(gen)
        np.testing.assert_allclose(C, C.T, atol=1e-14)
        np.testing.assert_allclose(np.diag(C), rho * (1 - rho), atol=1e-12)
        assert np.all(C[~np.eye(4, dtype=bool)] < 0)

    def test_no_reservoirs_is_degenerate(self):
        with pytest.raises(DegeneracyError):
            stationary_distribution(build_generator(4))

    def test_cgf_vanishes_at_zero(self):
        gen = build_generator(4, *BoundaryRates.reservoirs(0.2, 0.7).as_tuple())
        assert cgf_exact(gen, np.zeros(4)) == approx(0.0, abs=1e-12)

    def test_weights_shape_checked(self):
        gen = build_generator(3, 0.5, 0.5, 0.5, 0.5)
        with pytest.raises(InvalidArgumentError):
            cgf_exact(gen, [0.1, 0.2])


class TestTimeEvolution:
    def test_mgf_at_time_zero(self):
        gen = build_generator(3, 0.5, 0.5, 0.5, 0.5)
        h = [0.2, -0.4, 0.9]
        assert mgf_at_time(gen, h, 0.0, SsepState((1, 0, 1))) == approx(math.exp(1.1))

    def test_relaxes_to_stationary(self):
        gen = build_generator(4, *BoundaryRates.reservoirs(0.1, 0.9).as_tuple())
        p = evolve_distribution(gen, point_distribution(SsepState((0, 0, 0, 0))), 200.0)
        assert p.sum() == approx(1.0)
        np.testing.assert_allclose(p, stationary_distribution(gen), atol=1e-8)

    def test_negative_time_rejected(self):
        gen = build_generator(2, 0.5, 0.5, 0.5, 0.5)
        with pytest.raises(InvalidArgumentError):
            evolve_distribution(gen, point_distribution(SsepState((0, 0))), -1.0)


class TestGillespie:
    def test_particles_conserved_without_reservoirs(self):
        initial = [1, 0, 1, 1, 0, 0, 1, 0]
        traj = gillespie_run(8, (0, 0, 0, 0), 20.0, seed=1, initial=initial)
        assert traj.particle_count == 4
        assert len(traj.events) > 0

    def test_snapshot_grid(self):
        traj = gillespie_run(4, BoundaryRates.reservoirs(0.0, 1.0), 2.0, seed=2, sample_interval=0.5)
        np.testing.assert_allclose(traj.snapshot_times, [0.0, 0.5, 1.0, 1.5, 2.0])
        np.testing.assert_array_equal(traj.snapshots[0], np.zeros(4))

    def test_reproducible(self):
        a = gillespie_run(5, BoundaryRates.reservoirs(0.3, 0.6), 10.0, seed=4)
        b = gillespie_run(5, BoundaryRates.reservoirs(0.3, 0.6), 10.0, seed=4)
        assert a.events == b.events

    def test_profile_matches_master_equation(self):
        rates = BoundaryRates.reservoirs(0.2, 0.8)
        traj = gillespie_run(6, rates, 4000.0, seed=5, sample_interval=1.0, record_events=False)
        mean, stderr = empirical_profile(traj, burn_in=50.0)
        exact = profile(build_generator(6, *rates.as_tuple()))
        assert np.all(np.abs(mean - exact) <= 5 * stderr + 0.01)

    def test_covariance_of_product_measure(self):
        traj = gillespie_run(4, BoundaryRates.reservoirs(0.5, 0.5), 2000.0, seed=7, sample_interval=1.0,
                             record_events=False)
        C = empirical_covariance(traj, burn_in=20.0)
        assert C.shape == (4, 4)
        np.testing.assert_allclose(C, C.T)
        np.testing.assert_allclose(C, 0.25 * np.eye(4), atol=0.1)

    def test_too_few_snapshots(self):
        traj = gillespie_run(3, BoundaryRates.reservoirs(0.0, 1.0), 5.0, seed=0, sample_interval=1.0)
        with pytest.raises(InvalidArgumentError):
            empirical_profile(traj)

    def test_bad_initial(self):
        with pytest.raises(InvalidArgumentError):
            gillespie_run(3, (0.5, 0.5, 0.5, 0.5), 1.0, initial=[1, 0])

    def test_trajectory_csv(self, tmp_path):
        traj = gillespie_run(3, BoundaryRates.reservoirs(0.0, 1.0), 1.0, seed=6)
        path = write_trajectory_csv(str(tmp_path / "trajectory.csv"), traj)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["t", "site", "occupancy"]
        assert len(rows) == 1 + 3 + len(traj.events)
        assert [r[1] for r in rows[1:4]] == ["1", "2", "3"]


class TestExtrapolation:
    def test_zero_field(self):
        result = extrapolate_cgf(0.0, sizes=(4, 6))
        assert result.limit == approx(0.0, abs=1e-12)
        assert result.values == approx([0.0, 0.0], abs=1e-12)

    def test_needs_two_sizes(self):
        with pytest.raises(InvalidArgumentError):
            extrapolate_cgf(0.1, sizes=(6,))

    def test_first_cumulant_is_mean_density(self):
        # d/dh of the scaled cgf at h = 0 is the mean density 1/2
        h = 1e-4
        result = extrapolate_cgf(h, sizes=(6, 8, 10))
        assert result.limit / h == approx(0.5, abs=1e-3)
