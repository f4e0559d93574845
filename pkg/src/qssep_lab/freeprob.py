"""
Partition combinatorics and the classical / free moment-cumulant machinery.

Partitions are kept canonical: blocks are sorted tuples of 1-based indices,
ordered by their smallest element. Moment functionals are callables taking
a sorted tuple of 0-based argument positions and returning a number or a
numpy array; all cumulant routines are generic over the value type, so a
whole grid of points (or a batch of jackknife replicas) is processed in one
call.

The local free cumulant models at the bottom describe the ensembles the
rest of the package studies: open stationary QSSEP, where the loop
cumulants are free cumulants of indicator functions, and Haar orbits,
where they are constants.
"""

import math
from dataclasses import dataclass
from functools import lru_cache, reduce
from itertools import combinations, product
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, InvalidArgumentError, SizeLimitError
from .grid import GridFunction
from fastmcp.utilities.logging import get_logger

logger = get_logger(__name__)

MAX_PARTITION_SIZE = 12
MAX_CUMULANT_ARITY = 10
MAX_LOOP_ORDER = 8
GAUSS_NODES = 8

Blocks = Tuple[Tuple[int, ...], ...]
Value = Union[float, complex, np.ndarray]
MomentFunctional = Callable[[Tuple[int, ...]], Value]


@dataclass(frozen=True)
class SetPartition:
    """Partition of {1..n} into nonempty disjoint blocks."""

    n: int
    blocks: Blocks

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgumentError(f"ground set size must be positive, got {self.n}")
        canonical = tuple(sorted((tuple(sorted(b)) for b in self.blocks), key=lambda b: b[0] if b else 0))
        if any(len(b) == 0 for b in canonical):
            raise InvalidArgumentError("partition has an empty block")
        flat = [i for b in canonical for i in b]
        if sorted(flat) != list(range(1, self.n + 1)):
            raise InvalidArgumentError(f"blocks {canonical} do not partition {{1..{self.n}}}")
        object.__setattr__(self, "blocks", canonical)

    def __len__(self) -> int:
        return len(self.blocks)

    def labels(self) -> List[int]:
        """labels[i-1] = index of the block containing i."""
        out = [0] * self.n
        for k, block in enumerate(self.blocks):
            for i in block:
                out[i - 1] = k
        return out

    def shifted(self, step: int) -> "SetPartition":
        """Rotate the indices around the circle by `step`."""
        return type(self)(self.n, tuple(tuple((i - 1 + step) % self.n + 1 for i in b) for b in self.blocks))

    def __str__(self) -> str:
        return "{" + ",".join("{" + ",".join(map(str, b)) + "}" for b in self.blocks) + "}"


@dataclass(frozen=True)
class NonCrossingPartition(SetPartition):
    def __post_init__(self):
        super().__post_init__()
        if not _blocks_noncrossing(self.n, self.blocks):
            raise InvalidArgumentError(f"partition {self} is crossing")


def _generate_partitions(n: int) -> Iterator[Blocks]:
    blocks: List[List[int]] = []

    def rec(i: int) -> Iterator[Blocks]:
        if i > n:
            yield tuple(tuple(b) for b in blocks)
            return
        for b in blocks:
            b.append(i)
            yield from rec(i + 1)
            b.pop()
        blocks.append([i])
        yield from rec(i + 1)
        blocks.pop()

    yield from rec(1)


def _generate_noncrossing(items: Tuple[int, ...]) -> Iterator[Blocks]:
    # the block of the first element splits the rest into independent arcs
    if not items:
        yield ()
        return
    head, tail = items[0], items[1:]
    for size in range(len(tail) + 1):
        for chosen in combinations(range(len(tail)), size):
            cuts = (-1,) + chosen + (len(tail),)
            arcs = [tail[cuts[k] + 1:cuts[k + 1]] for k in range(len(cuts) - 1)]
            block = (head,) + tuple(tail[c] for c in chosen)
            for parts in product(*(list(_generate_noncrossing(arc)) for arc in arcs)):
                yield (block,) + tuple(b for part in parts for b in part)


@lru_cache(maxsize=None)
def _partition_blocks(n: int) -> Tuple[Blocks, ...]:
    return tuple(_generate_partitions(n))


@lru_cache(maxsize=None)
def _noncrossing_blocks(n: int) -> Tuple[Blocks, ...]:
    out = [tuple(sorted(bs, key=lambda b: b[0])) for bs in _generate_noncrossing(tuple(range(1, n + 1)))]
    return tuple(sorted(out))


def enumerate_partitions(n: int) -> List[SetPartition]:
    """All set partitions of {1..n}; there are Bell(n) of them."""
    if n < 1 or n > MAX_PARTITION_SIZE:
        raise SizeLimitError("n", n, MAX_PARTITION_SIZE)
    return [SetPartition(n, blocks) for blocks in _generate_partitions(n)]


def noncrossing_partitions(n: int) -> List[NonCrossingPartition]:
    """All non-crossing partitions of {1..n}; there are Catalan(n) of them."""
    if n < 1 or n > MAX_PARTITION_SIZE:
        raise SizeLimitError("n", n, MAX_PARTITION_SIZE)
    return [NonCrossingPartition(n, blocks) for blocks in _noncrossing_blocks(n)]


def _blocks_noncrossing(n: int, blocks: Blocks) -> bool:
    label = {}
    for k, block in enumerate(blocks):
        for i in block:
            label[i] = k
    for b1 in range(len(blocks)):
        for b2 in range(b1 + 1, len(blocks)):
            runs = 0
            last = None
            for i in range(1, n + 1):
                lab = label[i]
                if lab in (b1, b2) and lab != last:
                    runs += 1
                    last = lab
            # a pattern b1 b2 b1 b2 around the line is a crossing
            if runs >= 4:
                return False
    return True


def is_noncrossing(pi: SetPartition) -> bool:
    return _blocks_noncrossing(pi.n, pi.blocks)


def kreweras_complement(pi: SetPartition) -> NonCrossingPartition:
    """
    Kreweras complement K(pi) as the cycles of pi^{-1} o gamma, gamma = (1 2 ... n).

    Point j of the complement sits between j and j+1 on the doubled circle.
    Applying the map twice rotates pi by one step backwards.
    """
    if not is_noncrossing(pi):
        raise InvalidArgumentError(f"Kreweras complement needs a non-crossing partition, got {pi}")
    n = pi.n
    inverse = [0] * (n + 1)
    for block in pi.blocks:
        for k, i in enumerate(block):
            inverse[block[(k + 1) % len(block)]] = i
    seen = [False] * (n + 1)
    blocks = []
    for start in range(1, n + 1):
        if seen[start]:
            continue
        cycle = []
        j = start
        while not seen[j]:
            seen[j] = True
            cycle.append(j)
            j = inverse[j % n + 1]
        blocks.append(tuple(cycle))
    return NonCrossingPartition(n, tuple(blocks))


def classical_cumulant(moments: MomentFunctional, k: int) -> Value:
    """
    Classical joint cumulant K(X_1, ..., X_k).

    Sum over all partitions of (|pi|-1)! (-1)^{|pi|-1} prod_B E[prod_{i in B} X_i];
    `moments` receives 0-based position tuples.
    """
    if k < 1 or k > MAX_CUMULANT_ARITY:
        raise SizeLimitError("arity", k, MAX_CUMULANT_ARITY)
    cache: Dict[Tuple[int, ...], Value] = {}

    def m(block: Tuple[int, ...]) -> Value:
        key = tuple(i - 1 for i in block)
        if key not in cache:
            cache[key] = moments(key)
        return cache[key]

    total: Value = 0.0
    for blocks in _partition_blocks(k):
        r = len(blocks)
        term: Value = (-1) ** (r - 1) * math.factorial(r - 1)
        for block in blocks:
            term = term * m(block)
        total = total + term
    return total


def free_cumulant(moments: MomentFunctional, k: int) -> Value:
    """
    Free cumulant kappa(a_1, ..., a_k).

    Inverts phi(a_1...a_k) = sum over NC(k) of prod_B kappa_B by recursion on
    the position subsets, each subset solved once.
    """
    if k < 1 or k > MAX_CUMULANT_ARITY:
        raise SizeLimitError("arity", k, MAX_CUMULANT_ARITY)
    moment_cache: Dict[Tuple[int, ...], Value] = {}
    cumulant_cache: Dict[Tuple[int, ...], Value] = {}

    def kappa(positions: Tuple[int, ...]) -> Value:
        if positions in cumulant_cache:
            return cumulant_cache[positions]
        if positions not in moment_cache:
            moment_cache[positions] = moments(positions)
        value = moment_cache[positions]
        for blocks in _noncrossing_blocks(len(positions)):
            if len(blocks) == 1:
                continue
            term: Value = 1.0
            for block in blocks:
                term = term * kappa(tuple(positions[i - 1] for i in block))
            value = value - term
        cumulant_cache[positions] = value
        return value

    return kappa(tuple(range(k)))


def indicator_free_cumulant(x: Sequence[Value]) -> Value:
    """
    g_p(x_1, ..., x_p) = kappa_p(I_{x_1}, ..., I_{x_p}) with phi(I_{x_1}...I_{x_p}) = min(x).

    The tuple order is the cyclic order of the loop. Coordinates may be arrays
    of a common broadcast shape; the result is affine in each coordinate on
    every region of fixed ordering. Coinciding coordinates are evaluated with
    the same formula.
    """
    coords = [np.asarray(v, dtype=float) for v in x]
    if not coords:
        raise InvalidArgumentError("need at least one coordinate")
    for c in coords:
        if np.any(c < 0.0) or np.any(c > 1.0) or np.any(~np.isfinite(c)):
            raise DomainError("loop coordinates must lie in [0, 1]")

    def moments(positions: Tuple[int, ...]) -> Value:
        return reduce(np.minimum, (coords[i] for i in positions))

    value = free_cumulant(moments, len(coords))
    if np.ndim(value) == 0:
        return float(value)
    return value


def multilinear_coefficients(f: Callable[..., Value], nodes: Sequence[Tuple[float, float]]) -> np.ndarray:
    """
    Coefficients c[e_1, ..., e_p] of f = sum c prod x_i^{e_i} for a multilinear f.

    `nodes` gives two distinct evaluation values per coordinate; with
    (0, 1) everywhere this is the corner grid {0,1}^p. For functions that are
    multilinear only on one ordering region, pick nodes inside that region.
    """
    p = len(nodes)
    grid = np.empty((2,) * p)
    for corner in product((0, 1), repeat=p):
        grid[corner] = f(*(nodes[i][corner[i]] for i in range(p)))
    coeffs = grid
    for axis, (lo, hi) in enumerate(nodes):
        if lo == hi:
            raise InvalidArgumentError("evaluation nodes must be distinct")
        # rows: value at lo, value at hi -> (constant, slope)
        inv = np.array([[hi, -lo], [-1.0, 1.0]]) / (hi - lo)
        coeffs = np.moveaxis(np.tensordot(inv, np.moveaxis(coeffs, axis, 0), axes=(1, 0)), 0, axis)
    return coeffs


def _power_table(moments: Sequence[Value], order: int) -> List[List[Value]]:
    # table[s][d] = [z^d] M(z)^s for s, d <= order, M(z) = 1 + sum m_k z^k
    series = [1.0] + list(moments[:order])
    while len(series) < order + 1:
        series.append(0.0)
    table: List[List[Value]] = [[1.0] + [0.0] * order]
    for s in range(1, order + 1):
        prev = table[-1]
        row = []
        for d in range(order + 1):
            acc: Value = 0.0
            for j in range(d + 1):
                acc = acc + prev[j] * series[d - j]
            row.append(acc)
        table.append(row)
    return table


def univariate_free_cumulants(moments: Sequence[Value]) -> List[Value]:
    """
    Free cumulants kappa_1..kappa_P from moments m_1..m_P of a single variable.

    Uses m_n = sum_{s=1}^n kappa_s [z^{n-s}] M(z)^s, valid at any order.
    """
    P = len(moments)
    table = _power_table(moments, P)
    kappas: List[Value] = []
    for n in range(1, P + 1):
        acc: Value = 0.0
        for s in range(1, n):
            acc = acc + kappas[s - 1] * table[s][n - s]
        kappas.append(moments[n - 1] - acc)
    return kappas


def moments_from_free_cumulants(kappas: Sequence[Value]) -> List[Value]:
    """Inverse of `univariate_free_cumulants`."""
    moments: List[Value] = []
    for n in range(1, len(kappas) + 1):
        table = _power_table(moments, n)
        acc: Value = 0.0
        for s in range(1, n + 1):
            acc = acc + kappas[s - 1] * table[s][n - s]
        moments.append(acc)
    return moments


def mixed_free_cumulants(mixed: Sequence[Value], moments: Sequence[Value]) -> List[Value]:
    """
    kappa_{s+1}(b, a, ..., a) for s = 0..P-1 from phi(b a^n) (n = 0..P-1) and moments of a.

    Uses phi(b a^n) = sum_{s=0}^n kappa_{s+1}(b, a^s) [z^{n-s}] M(z)^{s+1}.
    """
    P = len(mixed)
    table = _power_table(moments, P)
    out: List[Value] = []
    for n in range(P):
        acc: Value = 0.0
        for s in range(n):
            acc = acc + out[s] * table[s + 1][n - s]
        out.append(mixed[n] - acc)
    return out


class LocalCumulants:
    """
    Loop cumulants g_p of a U(1)^N invariant ensemble and their integrals.

    Subclasses provide `g` (pointwise g_p), `loop_integrals(a, P)` returning
    int g_p prod a for p = 1..P, and `loop_gradients(a, P)` returning the
    derivatives (1/p) delta/delta a(x) of the same integrals on the grid of a.
    """

    def g(self, coords: Sequence[np.ndarray]) -> Value:
        raise NotImplementedError

    def loop_integrals(self, a: GridFunction, P: int) -> np.ndarray:
        raise NotImplementedError

    def loop_gradients(self, a: GridFunction, P: int) -> np.ndarray:
        raise NotImplementedError


class IndicatorCumulants(LocalCumulants):
    """
    Stationary open QSSEP: g_1 = n_a + x dn, g_p = dn^p kappa_p(I_{x_1}, ..., I_{x_p}) for p >= 2.

    With A(y) = int_y^1 a, the integrals are free cumulants of A as a random
    variable on ([0,1], dy): int g_p prod a = kappa_p(A, ..., A). A is
    piecewise linear for piecewise-constant a, so its moments are computed
    exactly by Gauss-Legendre quadrature on every cell.
    """

    def __init__(self, n_a: float = 0.0, n_b: float = 1.0):
        self.n_a = float(n_a)
        self.n_b = float(n_b)
        self.delta = self.n_b - self.n_a

    def g(self, coords: Sequence[np.ndarray]) -> Value:
        if len(coords) == 1:
            return self.n_a + self.delta * np.asarray(coords[0], dtype=float)
        return self.delta ** len(coords) * indicator_free_cumulant(coords)

    def _ramp_moments(self, a: GridFunction, P: int) -> Tuple[np.ndarray, np.ndarray]:
        M = a.M
        w = 1.0 / M
        t, wt = np.polynomial.legendre.leggauss(GAUSS_NODES)
        values = a.values
        # A at the right edge of each cell
        right = w * np.concatenate([np.cumsum(values[::-1])[::-1][1:], [0.0]])
        left_edge = np.arange(M) * w

        def integrate(span: float) -> np.ndarray:
            y = left_edge[:, None] + span * (t[None, :] + 1.0) / 2.0
            A = right[:, None] + values[:, None] * (left_edge[:, None] + w - y)
            weights = span / 2.0 * wt[None, :]
            return np.stack([(A ** n * weights).sum(axis=1) for n in range(P + 1)])

        full = integrate(w)
        half = integrate(w / 2.0)
        moments = full.sum(axis=1)
        # int_0^{x_m} A^n for the cell midpoints x_m
        before = np.concatenate([np.zeros((P + 1, 1)), np.cumsum(full, axis=1)[:, :-1]], axis=1)
        return moments, before + half

    def loop_integrals(self, a: GridFunction, P: int) -> np.ndarray:
        moments, _ = self._ramp_moments(a, P)
        kappas = np.array(univariate_free_cumulants(list(moments[1:])), dtype=float)
        scale = self.delta ** np.arange(1, P + 1)
        out = kappas * scale
        out[0] += self.n_a * a.integral()
        return out

    def loop_gradients(self, a: GridFunction, P: int) -> np.ndarray:
        moments, partial = self._ramp_moments(a, P)
        mixed = mixed_free_cumulants([partial[n] for n in range(P)], list(moments[1:P]))
        out = np.stack(mixed) * (self.delta ** np.arange(1, P + 1))[:, None]
        out[0] += self.n_a
        return out


class ConstantCumulants(LocalCumulants):
    """Haar orbit U* D U: g_p = kappa_p(mu_D) independent of position."""

    def __init__(self, kappas: Sequence[float]):
        self.kappas = np.asarray(kappas, dtype=float)

    def g(self, coords: Sequence[np.ndarray]) -> Value:
        p = len(coords)
        if p > self.kappas.size:
            raise SizeLimitError("loop order", p, self.kappas.size)
        shape = np.broadcast_shapes(*(np.shape(c) for c in coords))
        return np.full(shape, self.kappas[p - 1]) if shape else float(self.kappas[p - 1])

    def loop_integrals(self, a: GridFunction, P: int) -> np.ndarray:
        S = a.integral()
        return self.kappas[:P] * S ** np.arange(1, P + 1)

    def loop_gradients(self, a: GridFunction, P: int) -> np.ndarray:
        S = a.integral()
        return np.repeat((self.kappas[:P] * S ** np.arange(P))[:, None], a.M, axis=1)


def _evaluate_profile(psi, x: np.ndarray) -> np.ndarray:
    if isinstance(psi, GridFunction):
        return psi.at(x)
    if callable(psi):
        return np.broadcast_to(np.asarray(psi(x), dtype=float), x.shape)
    return np.full(x.shape, float(psi))


def loop_moment_terms(test_functions: Sequence, model: LocalCumulants, M: int = 200, max_points: int = 1 << 24,
                      sites: Optional[int] = None) -> List[Tuple[NonCrossingPartition, NonCrossingPartition, float]]:
    """
    Per-partition contributions to int T_p prod psi_j, T_p = sum_{pi in NC(p)} g_pi delta_{pi*}.

    Edge k of the loop is the k-th matrix factor, vertex j sits between edges j
    and j+1 and carries psi_j. For each pi the Kreweras blocks identify
    vertices; the surviving variables are integrated with the midpoint rule
    on M points per axis, reduced when the tensor grid would exceed
    `max_points`. With `sites` the variables run over the site points i/N
    instead (the finite-N Riemann sum), as long as that grid fits.
    """
    p = len(test_functions)
    if p < 1 or p > MAX_LOOP_ORDER:
        raise SizeLimitError("p", p, MAX_LOOP_ORDER)
    terms = []
    for pi in noncrossing_partitions(p):
        star = kreweras_complement(pi)
        d = len(star)
        if sites is not None and sites ** d <= max_points:
            Md = sites
            nodes = np.arange(1, sites + 1) / sites
        else:
            Md = M
            if M ** d > max_points:
                Md = max(2, int(math.floor(max_points ** (1.0 / d) + 1e-9)))
                logger.warning(f"loop order {p}, partition {pi}: {d} variables, midpoint grid reduced to {Md} per axis")
            nodes = (np.arange(Md) + 0.5) / Md
        vertex_var = {}
        for v, block in enumerate(star.blocks):
            for j in block:
                vertex_var[j] = v
        weights_1d = []
        for v, block in enumerate(star.blocks):
            w = np.ones(Md)
            for j in block:
                w = w * _evaluate_profile(test_functions[j - 1], nodes)
            weights_1d.append(w)

        inner = Md ** (d - 1)
        chunk = max(1, (1 << 18) // max(inner, 1))
        total = 0.0
        for start in range(0, Md, chunk):
            stop = min(Md, start + chunk)
            axes = []
            for v in range(d):
                shape = [1] * d
                if v == 0:
                    shape[0] = stop - start
                    axes.append((nodes[start:stop].reshape(shape), weights_1d[0][start:stop].reshape(shape)))
                else:
                    shape[v] = Md
                    axes.append((nodes.reshape(shape), weights_1d[v].reshape(shape)))
            integrand = reduce(np.multiply, (w for _, w in axes))
            for block in pi.blocks:
                integrand = integrand * model.g([axes[vertex_var[b]][0] for b in block])
            total += float(np.sum(integrand))
        terms.append((pi, star, total / Md ** d))
    return terms


def loop_moment_density(test_functions: Sequence, model: Optional[LocalCumulants] = None, M: int = 200,
                        max_points: int = 1 << 24, sites: Optional[int] = None) -> float:
    """
    lim N^{-1} E[tr(M Delta_1 M Delta_2 ... M Delta_p)] for Delta_j = diag(psi_j(i/N)).

    Args:
        test_functions: psi_1..psi_p as callables, GridFunctions or constants
        model: local cumulants of the ensemble (defaults to open QSSEP with n_a=0, n_b=1)
        M: midpoint points per surviving variable
        sites: sum over the points i/N, i = 1..sites, instead of integrating

    Returns:
        int T_p(x) prod psi_j(x_j) dx, or its Riemann sum on the sites
    """
    model = model or IndicatorCumulants()
    return float(sum(value for _, _, value in loop_moment_terms(test_functions, model, M, max_points, sites)))
