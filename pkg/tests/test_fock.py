"""
Fock-space oracle for small chains.

Core claims:
    - Wick factorisation: Tr(rho n_j1...n_jk) = det G[sites] for quadratic states
    - Tr(rho e^{c^dag A c}) = det[I + G^T (e^A - I)]
    - the diagonal block of the averaged Lindbladian is the SSEP generator
    - one Brownian path drives Fock states and G-matrices to the same two-point function
    - noise-averaged generating functions agree with the classical master equation
"""

import itertools

import numpy as np
import pytest
from pytest import approx

from qssep_lab.config import ChainConfig
from qssep_lab.errors import InvalidArgumentError, SizeLimitError
from qssep_lab.fock import (
    averaged_lindblad_step, basis_state, check_density, coupled_path_errors, determinant_identity, evolve_step,
    fermi_matrix,
    hamiltonian_increment_full, jordan_wigner_annihilator, lindbladian, lindbladian_matrix, mgf_observable,
    noise_averaged_mgf, number_operator, one_particle_block, quadratic_state, two_point_matrix, wick_check,
)
from qssep_lab.gmatrix import increment_matrix, sample_noise
from qssep_lab.ssep import SsepState, generator_from_chain, mgf_at_time

OPEN_RATES = dict(alpha1=0.7, beta1=0.3, alphaN=0.2, betaN=0.9)


def _hermitian(rng, n):
    X = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return 0.5 * (X + X.conj().T)


def _chains(N):
    return [ChainConfig(N=N, topology="closed"), ChainConfig(N=N, topology="periodic"),
            ChainConfig(N=N, topology="open", **OPEN_RATES)]


class TestOperators:
    def test_anticommutation(self):
        N = 3
        cs = [jordan_wigner_annihilator(N, k) for k in range(1, N + 1)]
        eye = np.eye(2 ** N)
        for i, j in itertools.product(range(N), repeat=2):
            anti = cs[i] @ cs[j].conj().T + cs[j].conj().T @ cs[i]
            np.testing.assert_allclose(anti, eye if i == j else 0 * eye, atol=1e-14)
            np.testing.assert_allclose(cs[i] @ cs[j] + cs[j] @ cs[i], 0 * eye, atol=1e-14)

    def test_site_one_is_leading_bit(self):
        rho = basis_state((1, 0, 0))
        assert np.trace(rho @ number_operator(3, 1)).real == approx(1.0)
        assert np.trace(rho @ number_operator(3, 3)).real == approx(0.0)

    def test_size_cap(self):
        with pytest.raises(SizeLimitError):
            jordan_wigner_annihilator(5, 1)
        with pytest.raises(InvalidArgumentError):
            jordan_wigner_annihilator(3, 4)


class TestQuadraticStates:
    def test_two_point_is_fermi_transpose(self):
        rng = np.random.default_rng(0)
        M = _hermitian(rng, 3)
        G = two_point_matrix(quadratic_state(M))
        np.testing.assert_allclose(G, fermi_matrix(M).T, atol=1e-12)

    def test_wick_factorisation(self):
        rng = np.random.default_rng(1)
        rho = quadratic_state(_hermitian(rng, 4))
        check_density(rho)
        for size in range(1, 5):
            for sites in itertools.combinations(range(1, 5), size):
                direct, det = wick_check(rho, sites)
                assert direct == approx(det, abs=1e-10)

    def test_wick_needs_distinct_sites(self):
        rho = basis_state((1, 0))
        with pytest.raises(InvalidArgumentError):
            wick_check(rho, [1, 1])

    def test_determinant_identity(self):
        rng = np.random.default_rng(2)
        for N in (2, 3):
            rho = quadratic_state(_hermitian(rng, N))
            lhs, rhs = determinant_identity(rho, _hermitian(rng, N))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_rejects_non_hermitian(self):
        with pytest.raises(InvalidArgumentError):
            quadratic_state(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestLindbladian:
    @pytest.mark.parametrize("N", [2, 3])
    def test_diagonal_block_is_ssep_generator(self, N):
        D = 2 ** N
        diag = np.arange(D) * (D + 1)
        for cfg in _chains(N):
            S = lindbladian_matrix(cfg)[np.ix_(diag, diag)]
            np.testing.assert_allclose(S, generator_from_chain(cfg).dense(), atol=1e-12)

    def test_trace_preserving(self):
        rng = np.random.default_rng(3)
        rho = quadratic_state(_hermitian(rng, 3))
        for cfg in _chains(3):
            assert abs(np.trace(lindbladian(rho, cfg))) < 1e-12

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        cfg = ChainConfig(N=2, topology="open", **OPEN_RATES)
        rhos = np.stack([quadratic_state(_hermitian(rng, 2)) for _ in range(3)])
        out = lindbladian(rhos, cfg)
        for k in range(3):
            np.testing.assert_allclose(out[k], lindbladian(rhos[k], cfg), atol=1e-14)

    def test_midpoint_step_on_diagonal_states(self):
        cfg = ChainConfig(N=3, topology="open", **OPEN_RATES)
        L = generator_from_chain(cfg).dense()
        p = np.zeros(8)
        p[SsepState((1, 0, 1)).index] = 1.0
        dt = 1e-2
        out = averaged_lindblad_step(np.diag(p).astype(complex), dt, cfg)
        np.testing.assert_allclose(out, np.diag(np.diag(out)), atol=1e-14)
        np.testing.assert_allclose(np.diag(out).real, p + dt * L @ p + 0.5 * dt ** 2 * L @ (L @ p), atol=1e-12)
        with pytest.raises(InvalidArgumentError):
            averaged_lindblad_step(np.diag(p), 0.0, cfg)


class TestStochasticStep:
    @pytest.mark.parametrize("topology", ["closed", "periodic"])
    def test_one_particle_block_is_transposed_increment(self, topology):
        cfg = ChainConfig(N=3, topology=topology)
        noise = sample_noise(cfg, np.random.default_rng(5))
        block = one_particle_block(hamiltonian_increment_full(3, noise, topology), 3)
        np.testing.assert_allclose(block, increment_matrix(noise, cfg).T, atol=1e-14)

    def test_step_keeps_a_density_matrix(self):
        cfg = ChainConfig(N=3, topology="open", dt=0.05, **OPEN_RATES)
        rng = np.random.default_rng(6)
        rho = basis_state((1, 0, 1))
        for _ in range(20):
            rho = evolve_step(rho, sample_noise(cfg, rng), cfg)
        np.testing.assert_allclose(rho, rho.conj().T, atol=1e-12)
        assert np.trace(rho).real == approx(1.0, abs=1e-10)
        assert np.linalg.eigvalsh(rho).min() > -1e-3

    def test_noise_shape_checked(self):
        cfg = ChainConfig(N=3, topology="closed")
        periodic = sample_noise(ChainConfig(N=3, topology="periodic"), np.random.default_rng(0))
        with pytest.raises(InvalidArgumentError):
            evolve_step(basis_state((1, 0, 0)), periodic, cfg)

    def test_mgf_observable_is_diagonal_exponential(self):
        obs = mgf_observable([0.5, -1.0])
        np.testing.assert_allclose(np.diag(obs).real, np.exp([0.0, -1.0, 0.5, -0.5]))


class TestCoupling:
    @pytest.mark.parametrize("topology", ["closed", "periodic"])
    def test_unitary_chains_match_exactly(self, topology):
        cfg = ChainConfig(N=3, topology=topology, dt=1e-2)
        errors = coupled_path_errors(cfg, 0.5, np.random.default_rng(7), levels=1)
        assert errors[0] < 1e-10

    def test_open_chain_first_order(self):
        cfg = ChainConfig(N=3, topology="open", dt=1e-2, **OPEN_RATES)
        errors = coupled_path_errors(cfg, 1.0, np.random.default_rng(8), levels=2)
        assert 0 < errors[0] < 5e-2
        assert 1.5 <= errors[0] / errors[1] <= 2.5

    def test_bits_length_checked(self):
        cfg = ChainConfig(N=3, topology="closed")
        with pytest.raises(InvalidArgumentError):
            coupled_path_errors(cfg, 0.1, np.random.default_rng(0), bits=(1, 0))

    @pytest.mark.slow
    def test_small_step_acceptance(self):
        cfg = ChainConfig(N=3, topology="open", dt=1e-4, **OPEN_RATES)
        errors = coupled_path_errors(cfg, 1.0, np.random.default_rng(9), levels=2)
        assert errors[0] < 1e-3
        assert 1.5 <= errors[0] / errors[1] <= 2.5


class TestNoiseAveragedMgf:
    def test_two_sites(self):
        cfg = ChainConfig(N=2, topology="open", dt=1e-2, **OPEN_RATES)
        h = [0.4, -0.6]
        mean, stderr = noise_averaged_mgf(cfg, h, 0.5, 400, np.random.default_rng(10), bits=(1, 0))
        exact = mgf_at_time(generator_from_chain(cfg), h, 0.5, SsepState((1, 0)))
        assert stderr > 0
        assert abs(mean - exact) <= 4 * stderr + 2e-2

    def test_needs_two_paths(self):
        cfg = ChainConfig(N=2, topology="closed")
        with pytest.raises(InvalidArgumentError):
            noise_averaged_mgf(cfg, [0.1, 0.1], 0.1, 1, np.random.default_rng(0))

    @pytest.mark.slow
    def test_three_sites_acceptance(self):
        cfg = ChainConfig(N=3, topology="open", dt=1e-3, **OPEN_RATES)
        h = [0.3, -0.8, 0.5]
        mean, stderr = noise_averaged_mgf(cfg, h, 1.0, 2000, np.random.default_rng(11))
        exact = mgf_at_time(generator_from_chain(cfg), h, 1.0, SsepState((1, 0, 1)))
        assert abs(mean - exact) <= 3 * stderr + 1e-3
