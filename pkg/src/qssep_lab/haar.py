"""
Haar unitaries, orbit ensembles and free-probability predictions for them.

The free compression solver works with the subordination form of the
compressed Cauchy transform: for the ln x ln principal corner of a Haar
orbit with limiting spectrum mu,

    u = z + (1 - l) / G_mu(u),    G_corner(z) = G_mu(u) / l,

which solves R_corner(w) = R_mu(l w), i.e. kappa_k(corner) = l^{k-1} kappa_k(mu),
written without truncating the R-series. The truncated series is still
computed and reported as a diagnostic.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import qr
from scipy.special import logsumexp

from .errors import DomainError, InvalidArgumentError, SolverError
from .freeprob import ConstantCumulants, LocalCumulants, loop_moment_density, univariate_free_cumulants
from .ensemble import CumulantEstimate
from .grid import as_site_values
from .utils import generator, write_csv
from fastmcp.utilities.logging import get_logger

logger = get_logger(__name__)

MASS_TOL = 1e-12
UNITARITY_TOL = 1e-10
RESIDUAL_TOL = 1e-10
ETAS = (0.05, 0.025, 0.0125)
SERIES_ORDER = 12
HCIZ_ORDER = 6


@dataclass(frozen=True, eq=False)
class SpectralMeasure:
    """
    Probability measure on the real line, as weighted atoms or as a histogram.

    kind "atoms": `points` and `weights`; kind "histogram": bin `edges` and
    per-bin `weights` (mass spread uniformly inside each bin).
    """

    kind: str
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.kind not in ("atoms", "histogram"):
            raise InvalidArgumentError(f"unknown measure kind {self.kind!r}")
        points = np.asarray(self.points, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        expected = weights.size + 1 if self.kind == "histogram" else weights.size
        if points.ndim != 1 or points.size != expected or weights.size == 0:
            raise InvalidArgumentError(f"{self.kind} measure needs {expected} points for {weights.size} weights")
        if np.any(weights < 0):
            raise InvalidArgumentError("weights must be >= 0")
        if abs(weights.sum() - 1.0) > MASS_TOL:
            raise InvalidArgumentError(f"total mass {weights.sum():.15f} differs from 1")
        if self.kind == "histogram" and np.any(np.diff(points) <= 0):
            raise InvalidArgumentError("histogram edges must increase")
        points.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def atomic(cls, points: Sequence[float], weights: Optional[Sequence[float]] = None) -> "SpectralMeasure":
        points = np.asarray(points, dtype=float)
        weights = np.full(points.size, 1.0 / points.size) if weights is None else np.asarray(weights, dtype=float)
        return cls("atoms", points, weights / weights.sum())

    @classmethod
    def bernoulli(cls, p: float = 0.5) -> "SpectralMeasure":
        return cls.atomic([0.0, 1.0], [1.0 - p, p])

    @classmethod
    def histogram(cls, edges: Sequence[float], masses: Sequence[float]) -> "SpectralMeasure":
        masses = np.clip(np.asarray(masses, dtype=float), 0.0, None)
        total = masses.sum()
        if total <= 0:
            raise InvalidArgumentError("histogram has no mass")
        return cls("histogram", np.asarray(edges, dtype=float), masses / total)

    @classmethod
    def parse(cls, text: str) -> "SpectralMeasure":
        """
        Measure from a short CLI spec.

        Accepted forms: `bernoulli:p`, `atoms:x1,x2,...` (equal weights),
        `atoms:x1,x2,...;w1,w2,...` and `uniform:lo,hi[,bins]`.
        """
        kind, _, arg = text.partition(":")
        try:
            if kind == "bernoulli":
                return cls.bernoulli(float(arg) if arg else 0.5)
            if kind == "atoms" and arg:
                pts, _, wts = arg.partition(";")
                points = [float(v) for v in pts.split(",")]
                weights = [float(v) for v in wts.split(",")] if wts else None
                if weights is not None and len(weights) != len(points):
                    raise InvalidArgumentError(f"{len(points)} atoms but {len(weights)} weights in {text!r}")
                return cls.atomic(points, weights)
            if kind == "uniform" and arg:
                nums = [float(v) for v in arg.split(",")]
                if len(nums) in (2, 3) and nums[1] > nums[0]:
                    bins = int(nums[2]) if len(nums) == 3 else 100
                    return cls.histogram(np.linspace(nums[0], nums[1], bins + 1), np.ones(bins))
        except ValueError:
            raise InvalidArgumentError(f"cannot parse measure {text!r}")
        raise InvalidArgumentError(f"unknown measure spec {text!r}")

    @classmethod
    def from_samples(cls, eigenvalues: np.ndarray, bins: Optional[Union[int, np.ndarray]] = None) -> "SpectralMeasure":
        """Empirical measure: equal-weight atoms, or a histogram when `bins` is given."""
        eigs = np.asarray(eigenvalues, dtype=float).ravel()
        if bins is None:
            return cls.atomic(eigs)
        counts, edges = np.histogram(eigs, bins=bins)
        return cls.histogram(edges, counts)

    @property
    def support(self) -> Tuple[float, float]:
        return float(self.points.min()), float(self.points.max())

    def moments(self, P: int) -> List[float]:
        """m_1 .. m_P."""
        if self.kind == "atoms":
            return [float(np.sum(self.weights * self.points ** k)) for k in range(1, P + 1)]
        left, right = self.points[:-1], self.points[1:]
        out = []
        for k in range(1, P + 1):
            per_bin = (right ** (k + 1) - left ** (k + 1)) / ((k + 1) * (right - left))
            out.append(float(np.sum(self.weights * per_bin)))
        return out

    def mean(self) -> float:
        return self.moments(1)[0]

    def free_cumulants(self, P: int) -> List[float]:
        return [float(k) for k in univariate_free_cumulants(self.moments(P))]

    def cdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "atoms":
            order = np.argsort(self.points)
            cum = np.concatenate([[0.0], np.cumsum(self.weights[order])])
            return cum[np.searchsorted(self.points[order], x, side="right")]
        cum = np.concatenate([[0.0], np.cumsum(self.weights)])
        return np.interp(x, self.points, cum, left=0.0, right=1.0)

    def cdf_left(self, x: np.ndarray) -> np.ndarray:
        """lim_{y -> x-} F(y)."""
        if self.kind == "histogram":
            return self.cdf(x)
        order = np.argsort(self.points)
        cum = np.concatenate([[0.0], np.cumsum(self.weights[order])])
        return cum[np.searchsorted(self.points[order], np.asarray(x, dtype=float), side="left")]

    def cauchy_transform(self, z: Union[complex, np.ndarray], derivative: bool = False):
        """G(z) = int dmu(t)/(z - t); with `derivative` also returns G'(z)."""
        z = np.asarray(z, dtype=complex)
        if self.kind == "atoms":
            diff = z[..., None] - self.points
            G = np.sum(self.weights / diff, axis=-1)
            dG = -np.sum(self.weights / diff ** 2, axis=-1)
        else:
            left, right = self.points[:-1], self.points[1:]
            dens = self.weights / (right - left)
            zl = z[..., None] - left
            zr = z[..., None] - right
            G = np.sum(dens * (np.log(zl) - np.log(zr)), axis=-1)
            dG = np.sum(dens * (1.0 / zl - 1.0 / zr), axis=-1)
        return (G, dG) if derivative else G

    def csv_rows(self) -> List[Tuple[float, float, float]]:
        """(bin_left, bin_right, mass); atoms are zero-width bins."""
        if self.kind == "atoms":
            order = np.argsort(self.points)
            return [(float(self.points[k]), float(self.points[k]), float(self.weights[k])) for k in order]
        return [(float(self.points[k]), float(self.points[k + 1]), float(self.weights[k]))
                for k in range(self.weights.size)]


@dataclass(frozen=True, eq=False)
class StieltjesGrid:
    """Evaluation points z = E + i eta on one horizontal line."""

    energies: np.ndarray
    eta: float = ETAS[0]

    def __post_init__(self):
        if not self.eta > 0:
            raise InvalidArgumentError(f"eta must be > 0, got {self.eta}")
        energies = np.asarray(self.energies, dtype=float)
        if energies.ndim != 1 or energies.size < 2 or np.any(np.diff(energies) <= 0):
            raise InvalidArgumentError("grid energies must be an increasing 1-d array")
        object.__setattr__(self, "energies", energies)

    @property
    def z(self) -> np.ndarray:
        return self.energies + 1j * self.eta

    @property
    def spacing(self) -> float:
        return float(self.energies[1] - self.energies[0])

    def with_eta(self, eta: float) -> "StieltjesGrid":
        return StieltjesGrid(self.energies, eta)

    @classmethod
    def uniform(cls, lo: float, hi: float, points: int = 1001, eta: float = ETAS[0]) -> "StieltjesGrid":
        return cls(np.linspace(lo, hi, points), eta)


def write_measure_csv(path: str, measure: SpectralMeasure) -> str:
    return write_csv(path, ("bin_left", "bin_right", "mass"), measure.csv_rows())


def kolmogorov_distance(mu: SpectralMeasure, nu: SpectralMeasure) -> float:
    """sup_x |F_mu(x) - F_nu(x)|, evaluated at every breakpoint with both one-sided limits."""
    xs = np.unique(np.concatenate([mu.points, nu.points]))
    right = np.abs(mu.cdf(xs) - nu.cdf(xs))
    left = np.abs(mu.cdf_left(xs) - nu.cdf_left(xs))
    return float(max(right.max(), left.max()))


def sample_haar_unitary(N: int, rng: np.random.Generator) -> np.ndarray:
    """QR of a complex Ginibre matrix with the phases of diag(R) moved into Q."""
    if N < 1:
        raise InvalidArgumentError(f"N must be >= 1, got {N}")
    Z = (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) / math.sqrt(2.0)
    Q, R = qr(Z)
    d = np.diag(R)
    U = Q * (d / np.abs(d))[None, :]
    err = float(np.max(np.abs(U.conj().T @ U - np.eye(N))))
    if err > UNITARITY_TOL:
        logger.warning(f"Haar sample unitarity residual {err:.3e}")
    return U


def orbit_sample(D: Union[Sequence[float], np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """U* D U for a Haar unitary U; D is a real diagonal (vector or matrix)."""
    D = np.asarray(D)
    if D.ndim == 2:
        if np.max(np.abs(D - np.diag(np.diag(D)))) > 0:
            raise InvalidArgumentError("D must be diagonal")
        D = np.diag(D)
    if np.iscomplexobj(D) and np.max(np.abs(D.imag)) > 0:
        raise InvalidArgumentError("D must be real")
    d = np.real(D).astype(float)
    U = sample_haar_unitary(d.size, rng)
    M = (U.conj().T * d[None, :]) @ U
    return 0.5 * (M + M.conj().T)


def orbit_ensemble(D: Sequence[float], samples: int, rng: np.random.Generator) -> np.ndarray:
    d = np.asarray(D, dtype=float)
    return np.stack([orbit_sample(d, rng) for _ in range(samples)])


def diagonal_for(measure: SpectralMeasure, N: int) -> np.ndarray:
    """N eigenvalues whose empirical law approximates `measure` (atom counts rounded)."""
    if measure.kind == "atoms":
        counts = np.floor(measure.weights * N + 0.5).astype(int)
        counts[-1] = N - counts[:-1].sum()
        if counts[-1] < 0:
            raise InvalidArgumentError(f"cannot split {N} eigenvalues over weights {measure.weights}")
        return np.repeat(measure.points, counts)
    # quantiles of the histogram at the midpoints
    cum = np.concatenate([[0.0], np.cumsum(measure.weights)])
    return np.interp((np.arange(N) + 0.5) / N, cum, measure.points)


def wigner_sample(N: int, rng: np.random.Generator, sigma: float = 1.0) -> np.ndarray:
    """GUE matrix normalised to the semicircle on [-2 sigma, 2 sigma]."""
    A = (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) / math.sqrt(2.0)
    return sigma * (A + A.conj().T) / math.sqrt(2.0 * N)


def semicircle_cdf(x: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    t = np.clip(np.asarray(x, dtype=float) / (2.0 * sigma), -1.0, 1.0)
    return 0.5 + (t * np.sqrt(1.0 - t * t) + np.arcsin(t)) / math.pi


def principal_submatrix_spectrum(M: np.ndarray, fraction: float,
                                 bins: Optional[Union[int, np.ndarray]] = None) -> SpectralMeasure:
    """Eigenvalues of the leading round(l N) x round(l N) block."""
    if not 0 < fraction <= 1:
        raise InvalidArgumentError(f"fraction must lie in (0, 1], got {fraction}")
    N = M.shape[-1]
    k = int(round(fraction * N))
    if k < 1:
        raise InvalidArgumentError(f"fraction {fraction} of N={N} leaves an empty block")
    eigs = np.linalg.eigvalsh(M[..., :k, :k])
    return SpectralMeasure.from_samples(eigs, bins)


@dataclass
class CompressionResult:
    measure: SpectralMeasure
    grid: StieltjesGrid
    density: np.ndarray
    densities: Dict[float, np.ndarray] = field(repr=False)
    diagnostics: Dict[str, Any] = field(default_factory=dict)


def _subordination(z: complex, guess: complex, measure: SpectralMeasure, fraction: float,
                   tol: float, max_iter: int) -> Tuple[complex, float, int]:
    """Solve u = z + (1 - l)/G(u) from `guess`; returns (u, residual, iterations)."""
    c = 1.0 - fraction

    def residual(u: complex) -> complex:
        return u - z - c / complex(measure.cauchy_transform(u))

    u = guess if guess.imag > 0 else z
    r = abs(residual(u))
    theta = 0.5
    history = [r]
    it = 0
    # damped fixed point until Newton's basin is reached
    while r > 1e-6 and it < max_iter:
        it += 1
        target = z + c / complex(measure.cauchy_transform(u))
        cand = (1.0 - theta) * u + theta * target
        rc = abs(residual(cand))
        if rc > r:
            theta *= 0.5
            if theta < 1e-4:
                break
            continue
        u, r = cand, rc
        history.append(r)
    for _ in range(50):
        if r / fraction < tol:
            break
        G, dG = measure.cauchy_transform(u, derivative=True)
        G, dG = complex(G), complex(dG)
        phi = u - z - c / G
        step = phi / (1.0 + c * dG / (G * G))
        lam = 1.0
        while lam > 1e-6:
            cand = u - lam * step
            if cand.imag > 0 and abs(residual(cand)) < r:
                break
            lam *= 0.5
        else:
            break
        u = cand
        r = abs(residual(u))
        history.append(r)
        it += 1
    if r / fraction >= tol:
        raise SolverError("free compression solver did not converge", residuals=history, z=z)
    return u, r / fraction, it


def free_compression_predict(measure: SpectralMeasure, fraction: float, grid: StieltjesGrid,
                             P: int = SERIES_ORDER, etas: Sequence[float] = ETAS,
                             tol: float = RESIDUAL_TOL, max_iter: int = 2000) -> CompressionResult:
    """
    Limiting spectrum of the leading l N block of a Haar orbit with spectrum `measure`.

    The corner Cauchy transform is solved at z = E + i eta for every eta
    in `etas` (descending, each line seeded by the previous one), the
    Stieltjes-Perron densities are extrapolated to eta -> 0 with the
    Richardson weights (8, -6, 1)/3, clipped at zero and normalised on the
    grid cells.
    """
    if not 0 < fraction <= 1:
        raise InvalidArgumentError(f"fraction must lie in (0, 1], got {fraction}")
    kappas = measure.free_cumulants(P)
    compressed = [k * fraction ** n for n, k in enumerate(kappas)]
    diagnostics: Dict[str, Any] = {
        "fraction": fraction,
        "free_cumulants": kappas,
        "compressed_free_cumulants": compressed,
        "series_tail_ratio": abs(compressed[-1]) / max(abs(compressed[-2]), 1e-300) if P >= 2 else 0.0,
        "etas": list(etas),
    }
    E = grid.energies
    step = grid.spacing
    edges = np.concatenate([[E[0] - step / 2], E + step / 2])

    if fraction == 1.0:
        masses = np.diff(measure.cdf(edges))
        density = masses / step
        diagnostics.update({"identity": True, "max_residual": 0.0, "raw_mass": float(masses.sum())})
        return CompressionResult(measure=measure, grid=grid, density=density, densities={}, diagnostics=diagnostics)

    if len(etas) != 3:
        raise InvalidArgumentError("Richardson extrapolation needs three eta values")
    etas = sorted(etas, reverse=True)
    if not (math.isclose(etas[1], etas[0] / 2) and math.isclose(etas[2], etas[0] / 4)):
        raise InvalidArgumentError(f"etas must halve twice, got {etas}")
    densities: Dict[float, np.ndarray] = {}
    max_residual = 0.0
    iterations = 0
    previous: Optional[np.ndarray] = None
    for eta in etas:
        zs = E + 1j * eta
        us = np.empty(E.size, dtype=complex)
        guess = zs[0] + 1j * eta
        for k, z in enumerate(zs):
            if previous is not None:
                guess = complex(previous[k].real, max(previous[k].imag, eta))
            u, res, it = _subordination(complex(z), guess, measure, fraction, tol, max_iter)
            us[k] = u
            guess = u
            max_residual = max(max_residual, res)
            iterations += it
        previous = us
        w = measure.cauchy_transform(us) / fraction
        densities[eta] = -np.imag(w) / math.pi
        logger.debug(f"free compression eta={eta}: max residual so far {max_residual:.2e}")
    d1, d2, d4 = (densities[eta] for eta in etas)
    extrapolated = (8.0 * d4 - 6.0 * d2 + d1) / 3.0
    raw_mass = float(extrapolated.sum() * step)
    clipped = np.clip(extrapolated, 0.0, None)
    if clipped.sum() <= 0:
        raise SolverError("extrapolated density has no positive mass")
    density = clipped / (clipped.sum() * step)
    diagnostics.update({"identity": False, "max_residual": max_residual, "iterations": iterations,
                        "raw_mass": raw_mass, "clipped_mass": float((clipped - extrapolated).sum() * step)})
    logger.info(f"free compression l={fraction}: {E.size} points, residual {max_residual:.2e}, raw mass {raw_mass:.6f}")
    return CompressionResult(measure=SpectralMeasure.histogram(edges, density * step), grid=grid,
                             density=density, densities=densities, diagnostics=diagnostics)


def bernoulli_free_compression_density(x: np.ndarray) -> np.ndarray:
    """Half-corner of a Haar orbit of a trace-1/2 projection: the arcsine law on (0, 1)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = (x > 0) & (x < 1)
    out[inside] = 1.0 / (math.pi * np.sqrt(x[inside] * (1.0 - x[inside])))
    return out


def arcsine_cdf(x: np.ndarray) -> np.ndarray:
    return 2.0 / math.pi * np.arcsin(np.sqrt(np.clip(np.asarray(x, dtype=float), 0.0, 1.0)))


@dataclass
class HcizCheck:
    """Rank-one spherical integral: Monte Carlo left side against the truncated cumulant series."""

    z: float
    N: int
    samples: int
    monte_carlo: float
    stderr: float
    series: float
    terms: List[float]
    budget: float

    @property
    def agrees(self) -> bool:
        return abs(self.monte_carlo - self.series) <= self.budget

    def to_dict(self) -> Dict[str, Any]:
        return {"z": self.z, "N": self.N, "samples": self.samples, "monte_carlo": self.monte_carlo,
                "stderr": self.stderr, "series": self.series, "terms": self.terms, "budget": self.budget,
                "agrees": self.agrees}


def hciz_series_check(measure: SpectralMeasure, a: float, z: float, N: int = 200, samples: int = 4000,
                      rng: Optional[np.random.Generator] = None, order: int = HCIZ_ORDER) -> HcizCheck:
    """
    (1/N) log E[exp(z N tr(A U* G0 U))] for A = a v v^*, against sum_n kappa_n (z a)^n / n.

    U v is a uniform unit vector, so the left side only needs
    sum_k lambda_k |y_k|^2 for Gaussian-normalised y. Raises DomainError
    when the series terms do not decay.
    """
    kappas = measure.free_cumulants(order)
    theta = z * a
    terms = [kappas[n - 1] * theta ** n / n for n in range(1, order + 1)]
    head = max(abs(t) for t in terms[:2])
    tail = max(abs(t) for t in terms[-2:])
    if head > 0 and tail > 0.5 * head:
        raise DomainError(f"cumulant series does not decay at z*a={theta}: |tail|/|head| = {tail / head:.3g}")
    series = float(sum(terms))
    lam = diagonal_for(measure, N)
    rng = rng or generator(0, "hciz")
    g = rng.standard_normal((samples, N)) + 1j * rng.standard_normal((samples, N))
    y2 = np.abs(g) ** 2
    X = (y2 @ lam) / y2.sum(axis=1)
    expo = z * N * a * X
    log_mean = float(logsumexp(expo) - math.log(samples))
    ratios = np.exp(expo - expo.max())
    rel = float(ratios.std(ddof=1) / ratios.mean() / math.sqrt(samples)) if samples > 1 else 0.0
    value = log_mean / N
    stderr = rel / N
    budget = 3.0 * stderr + abs(terms[-1]) + theta ** 2 / N
    logger.info(f"HCIZ check z={z} N={N}: mc {value:.6g} +- {stderr:.2g}, series {series:.6g}")
    return HcizCheck(z=z, N=N, samples=samples, monte_carlo=value, stderr=stderr, series=series,
                     terms=[float(t) for t in terms], budget=budget)


@dataclass
class TraceCheck:
    empirical: CumulantEstimate
    prediction: float
    N: int

    @property
    def bias(self) -> float:
        return self.empirical.value - self.prediction

    @property
    def tolerance(self) -> float:
        return 3.0 * self.empirical.stderr

    @property
    def agrees(self) -> bool:
        return abs(self.bias) <= self.tolerance


def structured_traces(samples: np.ndarray, test_functions: Sequence) -> np.ndarray:
    """(1/N) tr(M D_1 M D_2 ... M D_p) per sample, D_j = diag(psi_j(i/N))."""
    samples = np.asarray(samples)
    N = samples.shape[-1]
    prod = None
    for psi in test_functions:
        factor = samples * as_site_values(psi, N)[None, None, :]
        prod = factor if prod is None else prod @ factor
    return np.real(np.trace(prod, axis1=-2, axis2=-1)) / N


def structured_trace_check(samples: np.ndarray, test_functions: Sequence,
                           model: Optional[LocalCumulants] = None, M: int = 200) -> TraceCheck:
    """
    Empirical N^{-1} E[tr(M D_1 ... M D_p)] against `loop_moment_density`
    summed over the N site points.

    `model` defaults to the open-QSSEP indicator cumulants; pass
    ConstantCumulants for Haar orbits.
    """
    samples = np.asarray(samples)
    if samples.ndim != 3 or samples.shape[0] < 2:
        raise InvalidArgumentError("need a stack of at least two samples")
    values = structured_traces(samples, test_functions)
    S, N = samples.shape[0], samples.shape[-1]
    estimate = CumulantEstimate(value=float(values.mean()), stderr=float(values.std(ddof=1) / math.sqrt(S)),
                                samples=S)
    prediction = loop_moment_density(test_functions, model, M=M, sites=N)
    logger.info(f"structured trace p={len(test_functions)} N={N}: {estimate.value:.6g} +- {estimate.stderr:.2g} "
                f"vs {prediction:.6g}")
    return TraceCheck(empirical=estimate, prediction=prediction, N=N)


def haar_model(measure: SpectralMeasure, P: int = 8) -> ConstantCumulants:
    """Constant loop cumulants g_p = kappa_p(mu) of a Haar orbit."""
    return ConstantCumulants(measure.free_cumulants(P))
