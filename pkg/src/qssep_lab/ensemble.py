"""
Monte Carlo estimators over ensembles of two-point matrices.

Samples are stacks of shape (S, N, N). Error bars come from the jackknife:
leave-one-out over samples, or over contiguous blocks when consecutive
snapshots share a trajectory (stationary ensembles are stored
trajectory-major, so one block per trajectory is the natural choice).
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .config import ChainConfig
from .errors import InvalidArgumentError, SizeLimitError
from .freeprob import IndicatorCumulants, LocalCumulants, classical_cumulant
from .gmatrix import StationaryEnsemble, run_trajectory
from .grid import as_site_values
from .utils import generator, write_csv
from fastmcp.utilities.logging import get_logger

logger = get_logger(__name__)

MAX_LOOP_CUMULANT = 5
MIN_SAMPLES = 1000

Samples = Union[np.ndarray, StationaryEnsemble]


@dataclass
class CumulantEstimate:
    value: float
    stderr: float
    samples: int
    imag: float = 0.0
    imag_stderr: float = 0.0

    def deviation(self, target: float) -> float:
        """|value - target| in units of the standard error."""
        if self.stderr == 0.0:
            return 0.0 if self.value == target else math.inf
        return abs(self.value - target) / self.stderr

    def within(self, target: float, k: float = 3.0) -> bool:
        return self.deviation(target) <= k

    def to_dict(self) -> Dict[str, float]:
        return {"value": self.value, "stderr": self.stderr, "samples": self.samples,
                "imag": self.imag, "imag_stderr": self.imag_stderr}


@dataclass(frozen=True)
class LoopSpec:
    """Cyclic loop G(i_1, i_2) G(i_2, i_3) ... G(i_p, i_1) over distinct 1-based sites."""

    sites: Tuple[int, ...]

    def __post_init__(self):
        sites = tuple(int(s) for s in self.sites)
        if not sites:
            raise InvalidArgumentError("a loop needs at least one site")
        if len(set(sites)) != len(sites):
            raise InvalidArgumentError(f"loop sites must be distinct, got {sites}")
        if min(sites) < 1:
            raise InvalidArgumentError(f"sites are 1-based, got {sites}")
        object.__setattr__(self, "sites", sites)

    @property
    def p(self) -> int:
        return len(self.sites)

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return [(self.sites[k], self.sites[(k + 1) % self.p]) for k in range(self.p)]

    def check(self, N: int) -> None:
        if max(self.sites) > N:
            raise InvalidArgumentError(f"loop sites {self.sites} outside 1..{N}")

    def coordinates(self, N: int) -> List[float]:
        return [s / N for s in self.sites]

    @classmethod
    def parse(cls, text: str) -> "LoopSpec":
        try:
            return cls(tuple(int(v) for v in text.split(",") if v.strip()))
        except ValueError:
            raise InvalidArgumentError(f"cannot parse site list {text!r}")

    def __str__(self) -> str:
        return ",".join(str(s) for s in self.sites)


def _as_array(samples: Samples) -> np.ndarray:
    arr = samples.samples if isinstance(samples, StationaryEnsemble) else np.asarray(samples)
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise InvalidArgumentError(f"samples must have shape (S, N, N), got {arr.shape}")
    return arr


def _require_samples(count: int, minimum: int) -> None:
    if count < minimum:
        raise InvalidArgumentError(f"need at least {minimum} samples, got {count}")


def jackknife(observables: np.ndarray, estimator: Callable[[np.ndarray], np.ndarray],
              blocks: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Jackknife value and standard error of a smooth function of sample means.

    Args:
        observables: per-sample values, shape (S,) or (S, k)
        estimator: maps a stack of mean vectors (R, k) to R estimates
        blocks: leave out contiguous blocks instead of single samples

    Returns:
        (estimate on the full sample, jackknife standard error)
    """
    data = np.asarray(observables)
    if data.ndim == 1:
        data = data[:, None]
    S = data.shape[0]
    n = S if blocks is None else int(blocks)
    if n < 2 or n > S:
        raise InvalidArgumentError(f"jackknife needs 2 <= blocks <= samples, got {n} blocks for {S} samples")
    usable = S - S % n
    data = data[:usable]
    total = data.sum(axis=0)
    block_sums = data.reshape(n, usable // n, -1).sum(axis=1)
    replicas = (total[None, :] - block_sums) / (usable - usable // n)
    central = estimator((total / usable)[None, :])[0]
    values = estimator(replicas)
    mean = values.mean(axis=0)
    dev = values - mean
    err = np.sqrt((n - 1) / n * np.sum(np.abs(dev) ** 2, axis=0)) if np.iscomplexobj(dev) else \
        np.sqrt((n - 1) / n * np.sum(dev ** 2, axis=0))
    return central, err


def _split_complex(central, re_err, im_err, samples: int, scale: float = 1.0) -> CumulantEstimate:
    central = complex(central)
    return CumulantEstimate(value=central.real * scale, stderr=float(re_err) * scale, samples=samples,
                            imag=central.imag * scale, imag_stderr=float(im_err) * scale)


def _joint_cumulant(variables: np.ndarray, blocks: Optional[int]) -> Tuple[complex, float, float]:
    """Classical joint cumulant of the columns of `variables` (S, r) with jackknife errors."""
    S, r = variables.shape
    subsets = [mask for mask in range(1, 2 ** r)]
    products = np.empty((S, len(subsets)), dtype=complex)
    for col, mask in enumerate(subsets):
        prod = np.ones(S, dtype=complex)
        for k in range(r):
            if mask >> k & 1:
                prod = prod * variables[:, k]
        products[:, col] = prod

    def estimator(means: np.ndarray) -> np.ndarray:
        def moments(positions: Tuple[int, ...]):
            mask = sum(1 << k for k in positions)
            return means[:, mask - 1]

        return np.broadcast_to(classical_cumulant(moments, r), (means.shape[0],))

    re_central, re_err = jackknife(products, lambda m: estimator(m).real, blocks)
    im_central, im_err = jackknife(products, lambda m: estimator(m).imag, blocks)
    return complex(re_central, im_central), float(re_err), float(im_err)


def loop_variables(samples: np.ndarray, loop: LoopSpec) -> np.ndarray:
    """Columns G(i_k, i_{k+1}) of the loop, shape (S, p)."""
    return np.stack([samples[:, i - 1, j - 1] for i, j in loop.edges], axis=1)


def estimate_loop_cumulant(samples: Samples, loop: Union[LoopSpec, Sequence[int]], blocks: Optional[int] = None,
                           min_samples: int = MIN_SAMPLES) -> CumulantEstimate:
    """
    N^{p-1} K[G(i_1,i_2), ..., G(i_p,i_1)] from empirical moments.

    The joint cumulant is formed with `freeprob.classical_cumulant`; the
    reported value is the real part, the imaginary part is kept alongside
    (it vanishes in law for U(1)^N invariant ensembles).
    """
    loop = loop if isinstance(loop, LoopSpec) else LoopSpec(tuple(loop))
    if loop.p > MAX_LOOP_CUMULANT:
        raise SizeLimitError("p", loop.p, MAX_LOOP_CUMULANT)
    arr = _as_array(samples)
    S, N = arr.shape[0], arr.shape[1]
    loop.check(N)
    _require_samples(S, min_samples)
    central, re_err, im_err = _joint_cumulant(loop_variables(arr, loop), blocks)
    estimate = _split_complex(central, re_err, im_err, S, scale=float(N) ** (loop.p - 1))
    logger.debug(f"loop {loop} N={N}: {estimate.value:.6g} +- {estimate.stderr:.3g} ({S} samples)")
    return estimate


def loop_prediction(loop: Union[LoopSpec, Sequence[int]], N: int, model: Optional[LocalCumulants] = None) -> float:
    """g_p at x_k = i_k/N for the ensemble's local cumulant model (open QSSEP by default)."""
    loop = loop if isinstance(loop, LoopSpec) else LoopSpec(tuple(loop))
    loop.check(N)
    model = model or IndicatorCumulants()
    return float(model.g([np.asarray(x) for x in loop.coordinates(N)]))


def loop_expectation(samples: Samples, loop: Union[LoopSpec, Sequence[int]], blocks: Optional[int] = None,
                     min_samples: int = MIN_SAMPLES) -> CumulantEstimate:
    """N^{p-1} E[G(i_1,i_2) ... G(i_p,i_1)], the scaled loop moment."""
    loop = loop if isinstance(loop, LoopSpec) else LoopSpec(tuple(loop))
    arr = _as_array(samples)
    S, N = arr.shape[0], arr.shape[1]
    loop.check(N)
    _require_samples(S, min_samples)
    prod = np.prod(loop_variables(arr, loop), axis=1)
    central, re_err = jackknife(prod.real, lambda m: m[:, 0], blocks)
    _, im_err = jackknife(prod.imag, lambda m: m[:, 0], blocks)
    return CumulantEstimate(value=float(central) * N ** (loop.p - 1), stderr=float(re_err) * N ** (loop.p - 1),
                            samples=S, imag=float(prod.imag.mean()) * N ** (loop.p - 1),
                            imag_stderr=float(im_err) * N ** (loop.p - 1))


def is_balanced(edges: Sequence[Tuple[int, int]]) -> bool:
    """True when every vertex has equal in- and out-degree (Eulerian edge multiset)."""
    degree: Dict[int, int] = {}
    for i, j in edges:
        degree[i] = degree.get(i, 0) + 1
        degree[j] = degree.get(j, 0) - 1
    return all(v == 0 for v in degree.values())


def parse_edges(text: str) -> List[Tuple[int, int]]:
    """'1-2,2-3' -> [(1, 2), (2, 3)]."""
    edges = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            i, j = item.split("-")
            edges.append((int(i), int(j)))
        except ValueError:
            raise InvalidArgumentError(f"cannot parse edge {item!r}, expected i-j")
    if not edges:
        raise InvalidArgumentError("empty edge list")
    return edges


def eulerian_test(samples: Samples, edges: Sequence[Tuple[int, int]], blocks: Optional[int] = None,
                  min_samples: int = MIN_SAMPLES) -> CumulantEstimate:
    """Mean of prod_k G(i_k, j_k); it vanishes in law unless the edge multiset is Eulerian."""
    arr = _as_array(samples)
    S, N = arr.shape[0], arr.shape[1]
    _require_samples(S, min_samples)
    for i, j in edges:
        if not (1 <= i <= N and 1 <= j <= N):
            raise InvalidArgumentError(f"edge ({i}, {j}) outside 1..{N}")
    prod = np.ones(S, dtype=complex)
    for i, j in edges:
        prod = prod * arr[:, i - 1, j - 1]
    central, re_err = jackknife(prod.real, lambda m: m[:, 0], blocks)
    im_central, im_err = jackknife(prod.imag, lambda m: m[:, 0], blocks)
    return CumulantEstimate(value=float(central), stderr=float(re_err), samples=S,
                            imag=float(im_central), imag_stderr=float(im_err))


@dataclass
class StationarityResult:
    """Kolmogorov-Smirnov comparison of D_T = G(1,1) - G(2,2) with Uniform[-1, 1]."""

    T: float
    trajectories: int
    ks: float
    pvalue: float
    D: np.ndarray = field(repr=False)


def haar_stationarity_test(config: ChainConfig, trajectories: int, T: float,
                           rng: Optional[np.random.Generator] = None, scheme: str = "exact") -> StationarityResult:
    """
    Closed two-site chain started from diag(1, 0): distance of the law of D_T to Uniform[-1, 1].

    All trajectories are integrated as one batch; the stream defaults to
    "haar-stationarity" under the chain seed.
    """
    if config.N != 2 or config.topology != "closed":
        raise InvalidArgumentError(f"needs a closed chain with N=2, got N={config.N} {config.topology}")
    if trajectories < 2:
        raise InvalidArgumentError("need at least two trajectories")
    G0 = np.zeros((trajectories, 2, 2), dtype=complex)
    G0[:, 0, 0] = 1.0
    rng = rng or generator(config.seed, "haar-stationarity")
    final = run_trajectory(config, G0=G0, T=T, rng=rng, scheme=scheme).final
    D = np.real(final[:, 0, 0] - final[:, 1, 1])
    result = stats.kstest(D, "uniform", args=(-1.0, 2.0))
    logger.info(f"stationarity test T={T}: KS={result.statistic:.4f} over {trajectories} trajectories")
    return StationarityResult(T=T, trajectories=trajectories, ks=float(result.statistic),
                              pvalue=float(result.pvalue), D=D)


def quantum_cgf_samples(samples: np.ndarray, h) -> Tuple[np.ndarray, int]:
    """
    (1/N) log det(I + G(e^H - I)) per sample, H = diag(h(i/N)).

    Samples whose determinant is not positive (or not finite) are dropped
    and counted.
    """
    arr = _as_array(samples)
    N = arr.shape[1]
    E = np.expm1(as_site_values(h, N))
    mats = np.eye(N)[None, :, :] + arr * E[None, None, :]
    sign, logabs = np.linalg.slogdet(mats)
    good = np.isfinite(logabs) & (np.abs(sign - 1.0) < 1e-8)
    rejected = int((~good).sum())
    if rejected:
        logger.warning(f"N={N}: rejected {rejected} of {arr.shape[0]} samples"
                       " with a singular or non-positive determinant")
    return logabs[good] / N, rejected


@dataclass
class SelfAveragingRow:
    N: int
    mean: float
    std: float
    samples: int
    rejected: int


def self_averaging_test(samples_by_size: Mapping[int, Samples], h,
                        sizes: Optional[Sequence[int]] = None) -> List[SelfAveragingRow]:
    """Mean and standard deviation of (1/N) tr log(I + G(e^H - I)) for every system size."""
    sizes = sorted(samples_by_size) if sizes is None else list(sizes)
    rows = []
    for N in sizes:
        if N not in samples_by_size:
            raise InvalidArgumentError(f"no samples for N={N}")
        arr = _as_array(samples_by_size[N])
        if arr.shape[1] != N:
            raise InvalidArgumentError(f"samples for N={N} have size {arr.shape[1]}")
        values, rejected = quantum_cgf_samples(arr, h)
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        rows.append(SelfAveragingRow(N=N, mean=float(values.mean()) if values.size else math.nan, std=std,
                                     samples=int(values.size), rejected=rejected))
        logger.info(f"self-averaging N={N}: mean {rows[-1].mean:.6g}, std {std:.4g}, rejected {rejected}")
    return rows


def disjoint_cycle_cumulant(samples: Samples, loops: Sequence[Union[LoopSpec, Sequence[int]]],
                            blocks: Optional[int] = None, min_samples: int = MIN_SAMPLES) -> CumulantEstimate:
    """
    Joint cumulant of r loop products Y_k = prod over the edges of loop k.

    Unscaled; compare sizes with `fit_scaling_exponent`.
    """
    loops = [lp if isinstance(lp, LoopSpec) else LoopSpec(tuple(lp)) for lp in loops]
    if not loops or len(loops) > MAX_LOOP_CUMULANT:
        raise SizeLimitError("cycles", len(loops), MAX_LOOP_CUMULANT)
    sites = [s for lp in loops for s in lp.sites]
    if len(set(sites)) != len(sites):
        raise InvalidArgumentError("cycles must be vertex-disjoint")
    arr = _as_array(samples)
    S, N = arr.shape[0], arr.shape[1]
    _require_samples(S, min_samples)
    for lp in loops:
        lp.check(N)
    variables = np.stack([np.prod(loop_variables(arr, lp), axis=1) for lp in loops], axis=1)
    central, re_err, im_err = _joint_cumulant(variables, blocks)
    return _split_complex(central, re_err, im_err, S)


def fit_scaling_exponent(sizes: Sequence[int], values: Sequence[float]) -> float:
    """Slope of log|value| against log N."""
    sizes = np.asarray(sizes, dtype=float)
    values = np.abs(np.asarray(values, dtype=float))
    if sizes.size < 2 or np.any(values <= 0):
        raise InvalidArgumentError("need at least two sizes with nonzero values")
    slope, _ = np.polyfit(np.log(sizes), np.log(values), 1)
    return float(slope)


RESULT_COLUMNS = ("estimator", "p", "sites", "value", "stderr", "samples", "N", "prediction", "bias")


def write_results_csv(path: str, rows: Sequence[Tuple]) -> str:
    """Rows follow RESULT_COLUMNS; sites are written as i-j-k."""
    return write_csv(path, RESULT_COLUMNS, rows)
