"""
Partition combinatorics, moment-cumulant maps and the local free cumulant models.

Core claims:
    - |NC(n)| is the Catalan number, the set partitions are counted by Bell numbers
    - |pi| + |K(pi)| = n + 1 and applying K twice rotates pi by one step
    - classical and free cumulants coincide up to arity 3
    - the indicator free cumulants are the stationary open-chain polynomials
    - loop_moment_density reproduces moments for constant cumulants
"""

import itertools
import math

import numpy as np
import pytest
from pytest import approx

from qssep_lab.errors import DomainError, InvalidArgumentError, SizeLimitError
from qssep_lab.freeprob import (
    ConstantCumulants, IndicatorCumulants, NonCrossingPartition, SetPartition, classical_cumulant,
    enumerate_partitions, free_cumulant, indicator_free_cumulant, is_noncrossing, kreweras_complement,
    loop_moment_density, moments_from_free_cumulants, multilinear_coefficients, noncrossing_partitions,
    univariate_free_cumulants,
)
from qssep_lab.grid import GridFunction

CATALAN = [1, 2, 5, 14, 42, 132, 429, 1430]
BELL = [1, 2, 5, 15, 52, 203]


def _random_functional(rng, k):
    table = {}
    for size in range(1, k + 1):
        for subset in itertools.combinations(range(k), size):
            table[subset] = rng.normal()
    return lambda positions: table[tuple(positions)]


def _ordered(rng, p):
    return np.sort(rng.uniform(0.0, 1.0, p))


class TestPartitions:
    @pytest.mark.parametrize("n", range(1, 9))
    def test_noncrossing_count_is_catalan(self, n):
        assert len(noncrossing_partitions(n)) == CATALAN[n - 1]

    @pytest.mark.parametrize("n", range(1, 7))
    def test_partition_count_is_bell(self, n):
        assert len(enumerate_partitions(n)) == BELL[n - 1]

    def test_crossing_partition_detected(self):
        crossing = SetPartition(4, ((1, 3), (2, 4)))
        assert not is_noncrossing(crossing)
        with pytest.raises(InvalidArgumentError):
            NonCrossingPartition(4, ((1, 3), (2, 4)))
        with pytest.raises(InvalidArgumentError):
            kreweras_complement(crossing)

    def test_blocks_are_canonical(self):
        pi = SetPartition(4, ((4, 2), (3, 1)))
        assert pi.blocks == ((1, 3), (2, 4))

    def test_invalid_blocks_rejected(self):
        with pytest.raises(InvalidArgumentError):
            SetPartition(3, ((1, 2),))
        with pytest.raises(InvalidArgumentError):
            SetPartition(3, ((1, 2), (2, 3)))

    def test_size_cap(self):
        with pytest.raises(SizeLimitError):
            noncrossing_partitions(13)


class TestKreweras:
    def test_block_count_identity(self):
        for pi in noncrossing_partitions(6):
            assert len(pi) + len(kreweras_complement(pi)) == 7

    def test_extremes(self):
        n = 5
        one = NonCrossingPartition(n, (tuple(range(1, n + 1)),))
        zero = NonCrossingPartition(n, tuple((i,) for i in range(1, n + 1)))
        assert kreweras_complement(one).blocks == zero.blocks
        assert kreweras_complement(zero).blocks == one.blocks

    def test_double_complement_rotates(self):
        for pi in noncrossing_partitions(5):
            assert kreweras_complement(kreweras_complement(pi)).blocks == pi.shifted(-1).blocks

    def test_adjacent_pair(self):
        pi = NonCrossingPartition(4, ((1, 2), (3,), (4,)))
        assert sorted(len(b) for b in kreweras_complement(pi).blocks) == [1, 3]


class TestCumulants:
    def test_free_and_classical_agree_up_to_three(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            phi = _random_functional(rng, 3)
            for k in (1, 2, 3):
                assert free_cumulant(phi, k) == approx(classical_cumulant(phi, k), abs=1e-12)

    def test_free_and_classical_differ_at_four(self):
        # a crossing partition contributes only to the classical sum
        phi = lambda positions: 1.0
        assert classical_cumulant(phi, 4) == approx(0.0, abs=1e-12)
        assert free_cumulant(phi, 4) == approx(0.0, abs=1e-12)

        def centred(positions):
            # centred variables with unit pair moments and zero odd moments
            n = len(positions)
            if n % 2:
                return 0.0
            return float(math.prod(range(n - 1, 0, -2)))

        assert classical_cumulant(centred, 4) == approx(0.0, abs=1e-12)
        assert free_cumulant(centred, 4) == approx(1.0, abs=1e-12)

    def test_arity_cap(self):
        with pytest.raises(SizeLimitError):
            classical_cumulant(lambda p: 0.0, 11)

    def test_array_valued_moments(self):
        x = np.linspace(0.0, 1.0, 7)
        phi = lambda positions: x ** len(positions)
        np.testing.assert_allclose(classical_cumulant(phi, 2), x ** 2 - x ** 2, atol=1e-14)

    def test_univariate_semicircle(self):
        kappas = univariate_free_cumulants([0.0, 1.0, 0.0, 2.0, 0.0, 5.0, 0.0, 14.0])
        np.testing.assert_allclose(kappas, [0, 1, 0, 0, 0, 0, 0, 0], atol=1e-12)

    def test_univariate_bernoulli(self):
        kappas = univariate_free_cumulants([0.5] * 6)
        np.testing.assert_allclose(kappas[:4], [0.5, 0.25, 0.0, -1.0 / 16], atol=1e-14)

    def test_moments_inverse(self):
        kappas = [0.3, 0.7, -0.2, 0.1, 0.05]
        moments = moments_from_free_cumulants(kappas)
        np.testing.assert_allclose(univariate_free_cumulants(moments), kappas, atol=1e-12)


class TestIndicatorCumulants:
    def test_first_two_orders(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            x, y = _ordered(rng, 2)
            assert indicator_free_cumulant([x]) == approx(x, abs=1e-12)
            assert indicator_free_cumulant([x, y]) == approx(x * (1 - y), abs=1e-12)

    def test_third_order(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            x, y, z = _ordered(rng, 3)
            assert indicator_free_cumulant([x, y, z]) == approx(x * (1 - 2 * y) * (1 - z), abs=1e-12)

    def test_fourth_order_both_cyclic_orders(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            x1, x2, x3, x4 = _ordered(rng, 4)
            first = x1 * (1 - 3 * x2 - 2 * x3 + 5 * x2 * x3) * (1 - x4)
            second = x1 * (1 - 4 * x2 - x3 + 5 * x2 * x3) * (1 - x4)
            assert indicator_free_cumulant([x1, x2, x3, x4]) == approx(first, abs=1e-12)
            assert indicator_free_cumulant([x1, x3, x2, x4]) == approx(second, abs=1e-12)

    def test_cyclic_invariance(self):
        coords = [0.2, 0.7, 0.4, 0.9]
        base = indicator_free_cumulant(coords)
        for s in range(4):
            assert indicator_free_cumulant(coords[s:] + coords[:s]) == approx(base, abs=1e-12)

    def test_vectorised_matches_scalar(self):
        x = np.array([0.1, 0.3, 0.5])
        y = np.array([0.6, 0.8, 0.9])
        np.testing.assert_allclose(indicator_free_cumulant([x, y]), x * (1 - y), atol=1e-12)

    def test_domain(self):
        with pytest.raises(DomainError):
            indicator_free_cumulant([0.2, 1.5])

    def test_multilinear_extraction(self):
        coeffs = multilinear_coefficients(lambda x, y: x * (1 - y), [(0.1, 0.2), (0.7, 0.9)])
        np.testing.assert_allclose(coeffs, [[0.0, 0.0], [1.0, -1.0]], atol=1e-12)

    def test_general_reservoirs_scale(self):
        model = IndicatorCumulants(0.2, 0.6)
        assert model.g([np.asarray(0.5)]) == approx(0.2 + 0.4 * 0.5)
        assert model.g([np.asarray(0.3), np.asarray(0.6)]) == approx(0.16 * 0.3 * 0.4)


class TestLoopIntegrals:
    def test_second_order_constant_and_linear(self):
        model = IndicatorCumulants()
        c = GridFunction.constant(0.7, M=100)
        assert model.loop_integrals(c, 2)[1] == approx(0.49 / 12, rel=1e-10)
        lin = GridFunction.from_callable(lambda x: 1 + x, M=400)
        assert model.loop_integrals(lin, 2)[1] == approx(17 / 90, rel=1e-4)

    def test_first_order_is_mean_position(self):
        a = GridFunction.from_callable(lambda x: np.sin(3 * x), M=200)
        assert IndicatorCumulants().loop_integrals(a, 1)[0] == approx(float(np.mean(a.x * a.values)), rel=1e-10)

    def test_constant_model(self):
        model = ConstantCumulants([0.5, 0.25, 0.0, -1 / 16])
        a = GridFunction.constant(0.4, M=60)
        np.testing.assert_allclose(model.loop_integrals(a, 3), [0.2, 0.04, 0.0], atol=1e-14)


class TestLoopMomentDensity:
    def test_indicator_first_two(self):
        assert loop_moment_density([1.0], M=200) == approx(0.5, abs=1e-9)
        assert loop_moment_density([1.0, 1.0], M=200) == approx(5.0 / 12, abs=1e-4)

    def test_constant_cumulants_give_moments(self):
        model = ConstantCumulants([0.5, 0.25, 0.0, -1 / 16])
        for p in (1, 2, 3, 4):
            assert loop_moment_density([1.0] * p, model, M=20) == approx(0.5, abs=1e-12)

    def test_profiles_weight_vertices(self):
        model = ConstantCumulants([0.5, 0.25])
        value = loop_moment_density([lambda x: 1 + x, 1.0], model, M=200)
        assert value == approx(0.75, abs=1e-9)

    def test_site_sum(self):
        assert loop_moment_density([1.0], sites=4) == approx(0.625, abs=1e-12)
        model = ConstantCumulants([0.5, 0.25])
        # (1/60) sum_i (1 + i/60) = 1 + 61/120
        value = loop_moment_density([lambda x: 1 + x, 1.0], model, sites=60)
        assert value == approx(0.5 * (1 + 61 / 120), abs=1e-12)
