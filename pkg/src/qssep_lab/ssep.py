"""
Classical open SSEP: exact master equation for small chains and Gillespie
Monte Carlo for long ones.

Configurations are indexed like the Fock basis: site 1 is the most
significant bit. The generator L acts on probability column vectors,
dp/dt = L p, so L[target, source] is a transition rate and every column
sums to zero.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import expm_multiply
from scipy.special import logsumexp

from .config import ChainConfig
from .errors import DegeneracyError, InvalidArgumentError, SizeLimitError, SolverError
from .grid import GridFunction, as_site_values
from .utils import generator, write_csv
from fastmcp.utilities.logging import get_logger

logger = get_logger(__name__)

MAX_EXACT_SITES = 12
DENSE_NULLSPACE_SITES = 10
MAX_GILLESPIE_SITES = 10_000
POWER_TOL = 1e-13
POWER_MAX_ITER = 500_000


@dataclass(frozen=True)
class BoundaryRates:
    """Injection (alpha) and extraction (beta) rates at sites 1 and N."""

    alpha1: float = 0.0
    beta1: float = 0.0
    alphaN: float = 0.0
    betaN: float = 0.0

    def __post_init__(self):
        for name in ("alpha1", "beta1", "alphaN", "betaN"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise InvalidArgumentError(f"{name} must be finite and >= 0, got {value!r}")

    def any_positive(self) -> bool:
        return any(r > 0 for r in self.as_tuple())

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.alpha1, self.beta1, self.alphaN, self.betaN)

    @classmethod
    def reservoirs(cls, n_a: float, n_b: float) -> "BoundaryRates":
        """Unit total rate at each end, injecting with probability n_a (left) and n_b (right)."""
        return cls(n_a, 1.0 - n_a, n_b, 1.0 - n_b)

    @classmethod
    def from_chain(cls, config: ChainConfig) -> "BoundaryRates":
        return cls(*config.rates)


RatesLike = Union[BoundaryRates, Sequence[float]]


def _as_rates(rates: RatesLike) -> BoundaryRates:
    if isinstance(rates, BoundaryRates):
        return rates
    values = [float(r) for r in rates]
    if len(values) != 4:
        raise InvalidArgumentError(f"expected (alpha1, beta1, alphaN, betaN), got {len(values)} values")
    return BoundaryRates(*values)


@dataclass(frozen=True)
class SsepState:
    """Occupation bitstring n_1 ... n_N."""

    occupancy: Tuple[int, ...]

    def __post_init__(self):
        occ = tuple(int(v) for v in self.occupancy)
        if not occ or any(v not in (0, 1) for v in occ):
            raise InvalidArgumentError(f"occupancy must be a non-empty 0/1 sequence, got {self.occupancy!r}")
        object.__setattr__(self, "occupancy", occ)

    @property
    def N(self) -> int:
        return len(self.occupancy)

    @property
    def index(self) -> int:
        return int("".join(str(v) for v in self.occupancy), 2)

    @classmethod
    def from_index(cls, index: int, N: int) -> "SsepState":
        return cls(tuple((index >> (N - 1 - k)) & 1 for k in range(N)))


def configurations(N: int) -> np.ndarray:
    """configurations[s, k] = n_{k+1} of configuration s."""
    states = np.arange(2 ** N)
    return ((states[:, None] >> (N - 1 - np.arange(N))[None, :]) & 1).astype(np.int8)


@dataclass
class SsepGenerator:
    N: int
    rates: BoundaryRates
    matrix: sparse.csr_matrix
    periodic: bool = False
    _stationary: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dimension(self) -> int:
        return 2 ** self.N

    @property
    def occupations(self) -> np.ndarray:
        return configurations(self.N)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_generator(N: int, alpha1: float = 0.0, beta1: float = 0.0, alphaN: float = 0.0, betaN: float = 0.0,
                    periodic: bool = False) -> SsepGenerator:
    """
    Sparse master-equation generator of the SSEP on N sites.

    Every bond swaps a particle-hole pair at rate 1 in each direction; site 1
    gains a particle at rate alpha1 and loses one at rate beta1, site N at
    alphaN and betaN. For N = 1 both reservoirs act on the single site.
    """
    if N < 1 or N > MAX_EXACT_SITES:
        raise SizeLimitError("N", N, MAX_EXACT_SITES)
    rates = BoundaryRates(alpha1, beta1, alphaN, betaN)
    occ = configurations(N)
    states = np.arange(2 ** N)
    masks = [1 << (N - 1 - k) for k in range(N)]
    sources, targets, values = [], [], []

    bonds = [(k, k + 1) for k in range(N - 1)]
    if periodic:
        bonds.append((N - 1, 0))
    for i, j in bonds:
        movable = occ[:, i] != occ[:, j]
        s = states[movable]
        sources.append(s)
        targets.append(s ^ (masks[i] | masks[j]))
        values.append(np.ones(s.size))

    for site, inject, extract in ((0, rates.alpha1, rates.beta1), (N - 1, rates.alphaN, rates.betaN)):
        for rate, filled in ((inject, 0), (extract, 1)):
            if rate <= 0:
                continue
            s = states[occ[:, site] == filled]
            sources.append(s)
            targets.append(s ^ masks[site])
            values.append(np.full(s.size, rate))

    src = np.concatenate(sources) if sources else np.zeros(0, dtype=int)
    dst = np.concatenate(targets) if targets else np.zeros(0, dtype=int)
    val = np.concatenate(values) if values else np.zeros(0)
    D = 2 ** N
    off = sparse.coo_matrix((val, (dst, src)), shape=(D, D)).tocsr()
    off.sum_duplicates()
    exit_rates = np.asarray(off.sum(axis=0)).ravel()
    matrix = (off - sparse.diags(exit_rates)).tocsr()
    logger.debug(f"SSEP generator N={N}: {matrix.nnz} nonzeros, rates={rates.as_tuple()}")
    return SsepGenerator(N=N, rates=rates, matrix=matrix, periodic=periodic)


def generator_from_chain(config: ChainConfig) -> SsepGenerator:
    """Generator matching a QSSEP chain configuration (its noise-averaged dynamics)."""
    return build_generator(config.N, *config.rates, periodic=config.topology == "periodic")


def _power_iteration(gen: SsepGenerator) -> np.ndarray:
    L = gen.matrix
    uniformization = 1.05 * float(np.max(np.abs(L.diagonal())))
    p = np.full(gen.dimension, 1.0 / gen.dimension)
    for it in range(1, POWER_MAX_ITER + 1):
        nxt = p + (L @ p) / uniformization
        nxt /= nxt.sum()
        delta = float(np.abs(nxt - p).sum())
        p = nxt
        if delta < POWER_TOL:
            logger.debug(f"power iteration converged after {it} iterations")
            return p
    raise SolverError("stationary power iteration did not converge", residuals=[delta])


def stationary_distribution(gen: SsepGenerator) -> np.ndarray:
    """
    Normalised null vector of the generator.

    Dense null-space solve up to N = 10, uniformised power iteration above.
    Raises DegeneracyError for a reducible chain (no reservoir coupling).
    """
    if gen._stationary is not None:
        return gen._stationary
    if not gen.rates.any_positive():
        raise DegeneracyError(f"chain of N={gen.N} without reservoirs conserves particles; stationary state not unique")
    if gen.N <= DENSE_NULLSPACE_SITES:
        ns = linalg.null_space(gen.dense())
        if ns.shape[1] != 1:
            raise DegeneracyError(f"generator null space has dimension {ns.shape[1]}")
        p = ns[:, 0].real
        p = p / p.sum()
    else:
        p = _power_iteration(gen)
    if p.min() < -1e-10:
        raise DegeneracyError(f"stationary vector has negative entries (min {p.min():.3e})")
    p = np.clip(p, 0.0, None)
    p = p / p.sum()
    p.setflags(write=False)
    gen._stationary = p
    return p


def profile(gen: SsepGenerator, p: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean occupation <n_i> under p (stationary by default)."""
    p = stationary_distribution(gen) if p is None else p
    return p @ gen.occupations


def occupation_covariance(gen: SsepGenerator, p: Optional[np.ndarray] = None) -> np.ndarray:
    p = stationary_distribution(gen) if p is None else p
    occ = gen.occupations.astype(float)
    mean = p @ occ
    second = occ.T @ (occ * p[:, None])
    return second - np.outer(mean, mean)


def _weights(gen: SsepGenerator, h: Union[Sequence[float], GridFunction, Callable]) -> np.ndarray:
    if isinstance(h, GridFunction) or callable(h):
        h = as_site_values(h, gen.N)
    h = np.asarray(h, dtype=float)
    if h.shape != (gen.N,):
        raise InvalidArgumentError(f"need {gen.N} site weights, got shape {h.shape}")
    return gen.occupations @ h


def cgf_exact(gen: SsepGenerator, h) -> float:
    """log E[exp(sum_j h_j n_j)] under the stationary distribution."""
    p = stationary_distribution(gen)
    return float(logsumexp(_weights(gen, h), b=p))


def evolve_distribution(gen: SsepGenerator, p0: np.ndarray, t: float) -> np.ndarray:
    """p(t) = exp(t L) p0."""
    if t < 0:
        raise InvalidArgumentError(f"t must be >= 0, got {t}")
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != (gen.dimension,):
        raise InvalidArgumentError(f"initial distribution has shape {p0.shape}, expected ({gen.dimension},)")
    if t == 0:
        return p0.copy()
    return expm_multiply(gen.matrix * t, p0)


def point_distribution(state: SsepState) -> np.ndarray:
    p = np.zeros(2 ** state.N)
    p[state.index] = 1.0
    return p


def mgf_at_time(gen: SsepGenerator, h, t: float, initial: Union[SsepState, np.ndarray]) -> float:
    """E_t[exp(sum_j h_j n_j)] for the chain started from `initial` (state or distribution)."""
    p0 = point_distribution(initial) if isinstance(initial, SsepState) else initial
    pt = evolve_distribution(gen, p0, t)
    return float(pt @ np.exp(_weights(gen, h)))


class _RateTree:
    """Binary sum tree over event rates: O(log K) updates and selection."""

    def __init__(self, rates: np.ndarray):
        self.size = 1
        while self.size < len(rates):
            self.size *= 2
        self.tree = np.zeros(2 * self.size)
        self.tree[self.size:self.size + len(rates)] = rates
        for i in range(self.size - 1, 0, -1):
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1]

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def update(self, leaf: int, rate: float) -> None:
        i = leaf + self.size
        self.tree[i] = rate
        i //= 2
        while i:
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1]
            i //= 2

    def find(self, u: float) -> int:
        """Leaf whose cumulative rate interval contains u in [0, total)."""
        i = 1
        while i < self.size:
            left = self.tree[2 * i]
            if u < left:
                i = 2 * i
            else:
                u -= left
                i = 2 * i + 1
        return i - self.size


@dataclass
class SsepTrajectory:
    """
    One Gillespie run.

    `events` holds (t, site, occupancy) for every site change (a swap
    produces two rows with the same t); snapshots are taken on the regular
    grid `snapshot_times`.
    """

    N: int
    rates: BoundaryRates
    initial: np.ndarray
    final: np.ndarray
    T: float
    events: List[Tuple[float, int, int]] = field(default_factory=list)
    snapshot_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    snapshots: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int8))

    @property
    def particle_count(self) -> int:
        return int(self.final.sum())


def gillespie_run(N: int, rates: RatesLike, T: float, seed: int = 0, rng: Optional[np.random.Generator] = None,
                  initial: Optional[Sequence[int]] = None, sample_interval: Optional[float] = None,
                  record_events: bool = True) -> SsepTrajectory:
    """
    Exact continuous-time simulation of the open SSEP up to time T.

    Clocks: one per bond (rate 1 when the two sites differ) plus one per
    reservoir (injection rate on an empty end site, extraction rate on an
    occupied one). The next clock is drawn from a sum tree.

    Args:
        N: number of sites (<= 10^4)
        rates: BoundaryRates or (alpha1, beta1, alphaN, betaN)
        T: final time
        seed: master seed, used when `rng` is None (stream "gillespie")
        initial: starting occupation, empty chain by default
        sample_interval: snapshot spacing; None takes no snapshots
        record_events: keep the event list (disable for long runs)

    Returns:
        SsepTrajectory
    """
    if N < 1 or N > MAX_GILLESPIE_SITES:
        raise SizeLimitError("N", N, MAX_GILLESPIE_SITES)
    if T < 0:
        raise InvalidArgumentError(f"T must be >= 0, got {T}")
    rates = _as_rates(rates)
    rng = rng or generator(seed, "gillespie")
    occ = np.zeros(N, dtype=np.int8) if initial is None else np.array(initial, dtype=np.int8)
    if occ.shape != (N,) or np.any((occ != 0) & (occ != 1)):
        raise InvalidArgumentError("initial occupation must be a 0/1 vector of length N")
    start = occ.copy()

    bonds = N - 1
    left_clock, right_clock = bonds, bonds + 1

    def bond_rate(k: int) -> float:
        return 1.0 if occ[k] != occ[k + 1] else 0.0

    def left_rate() -> float:
        return rates.beta1 if occ[0] else rates.alpha1

    def right_rate() -> float:
        return rates.betaN if occ[N - 1] else rates.alphaN

    clock_rates = np.array([bond_rate(k) for k in range(bonds)] + [left_rate(), right_rate()])
    tree = _RateTree(clock_rates)

    def refresh(sites: Sequence[int]) -> None:
        for s in sites:
            if s - 1 >= 0:
                tree.update(s - 1, bond_rate(s - 1))
            if s < bonds:
                tree.update(s, bond_rate(s))
        tree.update(left_clock, left_rate())
        tree.update(right_clock, right_rate())

    times: List[float] = []
    snaps: List[np.ndarray] = []
    next_sample = 0.0 if sample_interval else math.inf
    events: List[Tuple[float, int, int]] = []
    t = 0.0
    count = 0
    while True:
        total = tree.total
        wait = rng.exponential(1.0 / total) if total > 0 else math.inf
        t_next = t + wait
        while next_sample <= min(t_next, T):
            times.append(next_sample)
            snaps.append(occ.copy())
            next_sample += sample_interval
        if t_next > T:
            break
        t = t_next
        clock = tree.find(rng.uniform(0.0, total))
        while tree.tree[tree.size + clock] <= 0.0:
            # rounding can land on an empty leaf at an interval edge
            clock = tree.find(rng.uniform(0.0, total))
        if clock < bonds:
            changed = (clock, clock + 1)
            occ[clock], occ[clock + 1] = occ[clock + 1], occ[clock]
        else:
            site = 0 if clock == left_clock else N - 1
            changed = (site,)
            occ[site] = 1 - occ[site]
        if record_events:
            for s in changed:
                events.append((t, s + 1, int(occ[s])))
        refresh(changed)
        count += 1
    logger.info(f"gillespie N={N} T={T}: {count} events, {len(snaps)} snapshots")
    return SsepTrajectory(N=N, rates=rates, initial=start, final=occ.copy(), T=T, events=events,
                          snapshot_times=np.array(times),
                          snapshots=np.array(snaps, dtype=np.int8).reshape(len(snaps), N))


def empirical_profile(traj: SsepTrajectory, burn_in: float = 0.0, batches: int = 20) -> Tuple[np.ndarray, np.ndarray]:
    """Mean occupation over snapshots after burn_in, with batch-means standard errors."""
    keep = traj.snapshots[traj.snapshot_times >= burn_in].astype(float)
    if keep.shape[0] < 2 * batches:
        raise InvalidArgumentError(f"need at least {2 * batches} snapshots after burn-in, got {keep.shape[0]}")
    usable = keep.shape[0] - keep.shape[0] % batches
    means = keep[:usable].reshape(batches, -1, traj.N).mean(axis=1)
    return means.mean(axis=0), means.std(axis=0, ddof=1) / math.sqrt(batches)


def empirical_covariance(traj: SsepTrajectory, burn_in: float = 0.0) -> np.ndarray:
    keep = traj.snapshots[traj.snapshot_times >= burn_in].astype(float)
    return np.cov(keep, rowvar=False)


def write_trajectory_csv(path: str, traj: SsepTrajectory) -> str:
    """Columns t, site, occupancy; the initial configuration is written at t = 0."""

    def rows():
        for k, v in enumerate(traj.initial):
            yield (0.0, k + 1, int(v))
        for t, site, v in traj.events:
            yield (t, site, v)

    return write_csv(path, ("t", "site", "occupancy"), rows())


@dataclass
class CgfExtrapolation:
    """Least-squares fit cgf/N = limit + slope/N over the listed sizes."""

    sizes: List[int]
    values: List[float]
    limit: float
    slope: float
    residual: float

    def to_dict(self):
        return {"sizes": self.sizes, "values": self.values, "limit": self.limit,
                "slope": self.slope, "residual": self.residual}


def extrapolate_cgf(h, sizes: Sequence[int] = (8, 10, 12), n_a: float = 0.0, n_b: float = 1.0) -> CgfExtrapolation:
    """
    (1/N) log E_stat[exp(sum_i h(i/N) n_i)] at several N, extrapolated linearly in 1/N.

    `h` is a constant, a callable on [0, 1] or a GridFunction.
    """
    if len(sizes) < 2:
        raise InvalidArgumentError("extrapolation needs at least two sizes")
    rates = BoundaryRates.reservoirs(n_a, n_b)
    values = []
    for N in sizes:
        gen = build_generator(N, *rates.as_tuple())
        weights = as_site_values(h, N)
        values.append(cgf_exact(gen, weights) / N)
    inv = 1.0 / np.asarray(sizes, dtype=float)
    design = np.column_stack([np.ones_like(inv), inv])
    coef, *_ = np.linalg.lstsq(design, np.asarray(values), rcond=None)
    residual = float(np.max(np.abs(design @ coef - values)))
    logger.info(f"cgf extrapolation over N={list(sizes)}: limit {coef[0]:.6g}, slope {coef[1]:.6g}")
    return CgfExtrapolation(list(sizes), [float(v) for v in values], float(coef[0]), float(coef[1]), residual)
