"""
Stochastic evolution of the QSSEP two-point matrix G(i,j) = Tr(rho c_i^dag c_j).

All routines accept a single N x N matrix or a stack (..., N, N) of
independent trajectories. Closed and periodic chains evolve by exact
unitary conjugation G -> e^{-i dh} G e^{i dh}; the open chain adds an
Euler boundary substep after the unitary one (Lie splitting) and restores
Hermiticity by symmetrisation.

Noise convention: dh carries dW^{(j)} on the superdiagonal and its
conjugate on the subdiagonal; periodic chains add the wrap edge in the
corners.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ChainConfig
from .errors import InvalidArgumentError, NumericalBlowupError
from .utils import spawn_generators, stream_generators, write_csv
from fastmcp.utilities.logging import get_logger

logger = get_logger(__name__)

HERMITIAN_TOL = 1e-12
SCHEMES = ("exact", "bond")
NOISE_BLOCK = 256


@dataclass(frozen=True, eq=False)
class EdgeNoise:
    """Complex increments dW^{(j)} for one time step, shape (..., edges)."""

    dW: np.ndarray
    topology: str
    dt: float

    @property
    def edges(self) -> int:
        return self.dW.shape[-1]

    def mirrored(self) -> "EdgeNoise":
        return EdgeNoise(-self.dW, self.topology, self.dt)

    @classmethod
    def from_brownian(cls, dB1: np.ndarray, dB2: np.ndarray, topology: str, dt: float) -> "EdgeNoise":
        """dW = (dB1 + i dB2)/sqrt(2) from real Brownian increments of variance dt."""
        dW = (np.asarray(dB1) + 1j * np.asarray(dB2)) / math.sqrt(2.0)
        return cls(np.atleast_1d(dW).astype(complex), topology, dt)


@dataclass
class Trajectory:
    """Final state of one or more trajectories plus recorded snapshots."""

    final: np.ndarray
    times: List[float] = field(default_factory=list)
    snapshots: List[np.ndarray] = field(default_factory=list)


@dataclass
class StationaryEnsemble:
    """Stationary snapshots ordered by (trajectory id, time)."""

    samples: np.ndarray
    trajectory_ids: np.ndarray
    times: np.ndarray
    config: ChainConfig

    @property
    def N(self) -> int:
        return self.samples.shape[-1]

    def __len__(self) -> int:
        return self.samples.shape[0]


def sample_noise(config: ChainConfig, rng: np.random.Generator, batch: Optional[int] = None) -> EdgeNoise:
    """One complex Gaussian increment per edge with E[dW dW^*] = dt and E[dW dW] = 0."""
    shape = (config.edge_count,) if batch is None else (batch, config.edge_count)
    xi = rng.standard_normal((2,) + shape)
    dW = (xi[0] + 1j * xi[1]) * math.sqrt(config.dt / 2.0)
    return EdgeNoise(dW, config.topology, config.dt)


class TrajectoryNoise:
    """
    Noise for a stack of trajectories, each driven by its own generator.

    Trajectory k draws its increments in blocks of `block` steps from
    `rngs[k]` only, so its path does not depend on which other trajectories
    share the stack.
    """

    def __init__(self, config: ChainConfig, rngs: Sequence[np.random.Generator], block: int = NOISE_BLOCK):
        if block < 1:
            raise InvalidArgumentError(f"noise block must be >= 1, got {block}")
        self.config = config
        self.rngs = list(rngs)
        self.block = block
        self._buffer: Optional[np.ndarray] = None
        self._pos = block

    def __len__(self) -> int:
        return len(self.rngs)

    def next(self) -> EdgeNoise:
        if self._pos == self.block:
            shape = (2, self.block, self.config.edge_count)
            # (2, block, batch, edges)
            xi = np.stack([g.standard_normal(shape) for g in self.rngs], axis=2)
            self._buffer = (xi[0] + 1j * xi[1]) * math.sqrt(self.config.dt / 2.0)
            self._pos = 0
        dW = self._buffer[self._pos]
        self._pos += 1
        return EdgeNoise(dW, self.config.topology, self.config.dt)


def check_noise(noise: EdgeNoise, config: ChainConfig) -> None:
    if noise.edges != config.edge_count:
        raise InvalidArgumentError(
            f"noise has {noise.edges} edges, a {config.topology} chain of N={config.N} needs {config.edge_count}")
    if (noise.topology == "periodic") != (config.topology == "periodic"):
        raise InvalidArgumentError(f"noise drawn for a {noise.topology} chain used on a {config.topology} chain")


def increment_matrix(noise: EdgeNoise, config: ChainConfig) -> np.ndarray:
    """Hermitian one-particle increment dh (tridiagonal, plus corners when periodic)."""
    check_noise(noise, config)
    N = config.N
    batch = noise.dW.shape[:-1]
    dh = np.zeros(batch + (N, N), dtype=complex)
    idx = np.arange(N - 1)
    dh[..., idx, idx + 1] = noise.dW[..., :N - 1]
    dh[..., idx + 1, idx] = np.conj(noise.dW[..., :N - 1])
    if config.topology == "periodic":
        dh[..., 0, N - 1] += np.conj(noise.dW[..., N - 1])
        dh[..., N - 1, 0] += noise.dW[..., N - 1]
    return dh


def _require_hermitian(m: np.ndarray, what: str) -> None:
    scale = 1.0 + float(np.max(np.abs(m))) if m.size else 1.0
    err = float(np.max(np.abs(m - np.conj(np.swapaxes(m, -1, -2))))) if m.size else 0.0
    if err > HERMITIAN_TOL * scale:
        raise InvalidArgumentError(f"{what} is not Hermitian (deviation {err:.3e})")


def unitary_from_increment(dh: np.ndarray) -> np.ndarray:
    """e^{-i dh} from the eigendecomposition of the Hermitian increment."""
    w, V = np.linalg.eigh(dh)
    return (V * np.exp(-1j * w)[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2))


def step_unitary(G: np.ndarray, dh: np.ndarray) -> np.ndarray:
    """G -> e^{-i dh} G e^{i dh}; the spectrum of G is preserved."""
    _require_hermitian(dh, "increment dh")
    U = unitary_from_increment(dh)
    return U @ G @ np.conj(np.swapaxes(U, -1, -2))


def _boundary_substep(G: np.ndarray, config: ChainConfig) -> np.ndarray:
    N, dt = config.N, config.dt
    decay = np.zeros(N)
    inject = np.zeros(N)
    decay[0] += config.alpha1 + config.beta1
    decay[N - 1] += config.alphaN + config.betaN
    inject[0] += config.alpha1
    inject[N - 1] += config.alphaN
    factor = 1.0 - 0.5 * (decay[:, None] + decay[None, :]) * dt
    out = G * factor
    idx = np.arange(N)
    out[..., idx, idx] += inject * dt
    return 0.5 * (out + np.conj(np.swapaxes(out, -1, -2)))


def step_open(G: np.ndarray, dh: np.ndarray, config: ChainConfig) -> np.ndarray:
    """Unitary substep followed by the Euler boundary substep of the open chain."""
    if config.topology != "open":
        raise InvalidArgumentError(f"step_open needs an open chain, got {config.topology}")
    return _boundary_substep(step_unitary(G, dh), config)


def _bond_layers(config: ChainConfig) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    N = config.N
    layers = []
    for parity in (0, 1):
        left = np.arange(parity, N - 1, 2)
        if left.size:
            layers.append((left, left + 1, left))
    if config.topology == "periodic":
        layers.append((np.array([N - 1]), np.array([0]), np.array([N - 1])))
    return layers


def step_bonds(G: np.ndarray, noise: EdgeNoise, config: ChainConfig) -> np.ndarray:
    """
    Brickwork alternative to the exact step: even bonds, odd bonds, then the wrap bond.

    Each bond factor exp(-i [[0, w], [w*, 0]]) is exact, so G stays unitarily
    conjugated; the layer splitting keeps the Ito drift of the exact step and
    is first order in the weak sense. Costs O(N^2) per step.
    """
    check_noise(noise, config)
    G = np.array(G, dtype=complex, copy=True)
    for left, right, edge in _bond_layers(config):
        w = noise.dW[..., edge]
        r = np.abs(w)
        c = np.cos(r)
        s = np.sinc(r / np.pi)
        u_ll, u_lr, u_rl, u_rr = c, -1j * s * w, -1j * s * np.conj(w), c
        Gl, Gr = G[..., left, :], G[..., right, :]
        G[..., left, :] = u_ll[..., None] * Gl + u_lr[..., None] * Gr
        G[..., right, :] = u_rl[..., None] * Gl + u_rr[..., None] * Gr
        Gl, Gr = G[..., :, left], G[..., :, right]
        G[..., :, left] = Gl * np.conj(u_ll)[..., None, :] + Gr * np.conj(u_lr)[..., None, :]
        G[..., :, right] = Gl * np.conj(u_rl)[..., None, :] + Gr * np.conj(u_rr)[..., None, :]
    if config.topology == "open":
        return _boundary_substep(G, config)
    return G


def ito_increment(G: np.ndarray, dh: np.ndarray) -> np.ndarray:
    """Euler form dG = -i[dh, G] - 1/2 [dh, [dh, G]]; agrees with step_unitary to O(dh^3)."""
    comm = dh @ G - G @ dh
    return -1j * comm - 0.5 * (dh @ comm - comm @ dh)


def default_initial(config: ChainConfig) -> np.ndarray:
    """Open chains start on the linear profile n_a + (i/N)(n_b - n_a); others with one particle on site 1."""
    N = config.N
    if config.topology == "open":
        n_a = 0.0 if math.isnan(config.n_a) else config.n_a
        n_b = 0.0 if math.isnan(config.n_b) else config.n_b
        return np.diag(n_a + np.arange(1, N + 1) / N * (n_b - n_a)).astype(complex)
    G0 = np.zeros((N, N), dtype=complex)
    G0[0, 0] = 1.0
    return G0


def advance(G: np.ndarray, config: ChainConfig, rng: Union[np.random.Generator, TrajectoryNoise], steps: int,
            scheme: str = "exact", offset: int = 0) -> np.ndarray:
    """
    Advance G (or a stack of trajectories) by `steps` time steps.

    `rng` is either one generator shared by the whole stack or a
    TrajectoryNoise with one stream per trajectory.
    """
    if scheme not in SCHEMES:
        raise InvalidArgumentError(f"unknown scheme {scheme!r}")
    batch = G.shape[0] if G.ndim == 3 else None
    per_trajectory = isinstance(rng, TrajectoryNoise)
    if per_trajectory and len(rng) != (batch or 0):
        raise InvalidArgumentError(f"{len(rng)} noise streams for a stack of {batch} trajectories")
    for k in range(1, steps + 1):
        noise = rng.next() if per_trajectory else sample_noise(config, rng, batch)
        if scheme == "bond":
            G = step_bonds(G, noise, config)
        elif config.topology == "open":
            G = step_open(G, increment_matrix(noise, config), config)
        else:
            G = step_unitary(G, increment_matrix(noise, config))
        if not np.all(np.isfinite(G)):
            logger.error(f"non-finite G at step {offset + k}")
            raise NumericalBlowupError(offset + k)
    return G


def run_trajectory(config: ChainConfig, G0: Optional[np.ndarray] = None, T: float = 1.0,
                   snapshot_every: Optional[float] = None, rng: Optional[np.random.Generator] = None,
                   scheme: str = "exact") -> Trajectory:
    """
    Integrate up to time T, recording snapshots every `snapshot_every` time units.

    Args:
        config: chain description (dt and seed are taken from it)
        G0: initial matrix or stack of matrices; defaults to `default_initial`
        T: horizon, rounded to a whole number of steps
        snapshot_every: snapshot interval in time units, None records nothing
        rng: explicit generator; defaults to the chain's "trajectory" stream
        scheme: "exact" (eigendecomposition) or "bond" (brickwork)

    Returns:
        Trajectory with the final matrix and the recorded snapshots
    """
    if T < 0:
        raise InvalidArgumentError(f"horizon must be >= 0, got {T}")
    G = np.array(default_initial(config) if G0 is None else G0, dtype=complex, copy=True)
    if G.shape[-2:] != (config.N, config.N):
        raise InvalidArgumentError(f"G0 has shape {G.shape}, expected ({config.N}, {config.N})")
    _require_hermitian(G, "G0")
    rng = rng or spawn_generators(config.seed, "trajectory", 1)[0]
    steps = int(round(T / config.dt))
    every = int(round(snapshot_every / config.dt)) if snapshot_every else 0
    result = Trajectory(final=G)
    done = 0
    while done < steps:
        chunk = steps - done if not every else min(every - done % every, steps - done)
        G = advance(G, config, rng, chunk, scheme, offset=done)
        done += chunk
        if every and done % every == 0:
            result.times.append(done * config.dt)
            result.snapshots.append(G.copy())
    result.final = G
    logger.debug(f"trajectory N={config.N} {config.topology} T={T}: {steps} steps, {len(result.snapshots)} snapshots")
    return result


def _stationary_chunk(args) -> Tuple[int, np.ndarray]:
    config, chunk_id, start, size, burn_steps, every_steps, snapshots, scheme = args
    rng = TrajectoryNoise(config, stream_generators(config.seed, "stationary", start, size))
    G = np.repeat(default_initial(config)[None], size, axis=0)
    G = advance(G, config, rng, burn_steps, scheme)
    out = np.empty((snapshots, size, config.N, config.N), dtype=complex)
    for s in range(snapshots):
        G = advance(G, config, rng, every_steps, scheme, offset=burn_steps + s * every_steps)
        out[s] = G
    return chunk_id, out


def stationary_samples(config: ChainConfig, trajectories: int, snapshots: int = 1,
                       burn_in: Optional[float] = None, interval: Optional[float] = None,
                       scheme: str = "exact", workers: int = 1, chunk_size: int = 250) -> StationaryEnsemble:
    """
    Stationary snapshots of the open chain.

    Each trajectory starts from `default_initial`, discards t < burn_in
    (default 4 N^2) and then records `snapshots` matrices every `interval`
    (default N^2/4). Trajectory k is driven by the k-th child stream of the
    "stationary" seed sequence, so the output depends neither on `workers`
    nor on `chunk_size`.
    """
    N = config.N
    burn_in = 4.0 * N * N if burn_in is None else burn_in
    interval = N * N / 4.0 if interval is None else interval
    burn_steps = int(round(burn_in / config.dt))
    every_steps = max(1, int(round(interval / config.dt)))
    starts = list(range(0, trajectories, chunk_size))
    jobs = [(config, k, start, min(chunk_size, trajectories - start), burn_steps, every_steps, snapshots, scheme)
            for k, start in enumerate(starts)]
    logger.info(f"stationary sampling N={N}: {trajectories} trajectories x {snapshots} snapshots, "
                f"burn-in {burn_in} every {interval}, scheme={scheme}, workers={workers}")
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_stationary_chunk, jobs))
    else:
        results = [_stationary_chunk(job) for job in jobs]
    results.sort(key=lambda r: r[0])
    # (snapshots, size, N, N) per chunk -> trajectory-major order
    blocks = [np.swapaxes(out, 0, 1) for _, out in results]
    samples = np.concatenate(blocks, axis=0).reshape(-1, N, N)
    ids = np.repeat(np.arange(trajectories), snapshots)
    times = np.tile(burn_steps * config.dt + every_steps * config.dt * np.arange(1, snapshots + 1), trajectories)
    return StationaryEnsemble(samples=samples, trajectory_ids=ids, times=times, config=config)


def mean_stationary_profile(config: ChainConfig) -> np.ndarray:
    """Exact finite-N stationary mean of the diagonal of G (the SSEP density profile)."""
    if config.topology != "open":
        raise InvalidArgumentError("the stationary profile is defined for open chains")
    N = config.N
    A = np.zeros((N, N))
    b = np.zeros(N)
    for j in range(N - 1):
        A[j, j] -= 1.0
        A[j + 1, j + 1] -= 1.0
        A[j, j + 1] += 1.0
        A[j + 1, j] += 1.0
    A[0, 0] -= config.alpha1 + config.beta1
    A[N - 1, N - 1] -= config.alphaN + config.betaN
    b[0] -= config.alpha1
    b[N - 1] -= config.alphaN
    return np.linalg.solve(A, b)


def n2_reduced_step(D, R, I, dB1, dB2, dt: float):
    """One Euler-Maruyama step of the (D, R, I) system of the closed N=2 chain with one particle."""
    sq2 = math.sqrt(2.0)
    D_new = D - 2.0 * D * dt + 2.0 * sq2 * (R * dB2 - I * dB1)
    R_new = R - D * dB2 / sq2 - R * dt
    I_new = I + D * dB1 / sq2 - I * dt
    return D_new, R_new, I_new


def n2_coordinates(G: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(D, R, I) = (G11 - G22, Re G12, Im G12)."""
    D = np.real(G[..., 0, 0] - G[..., 1, 1])
    return D, np.real(G[..., 0, 1]), np.imag(G[..., 0, 1])


def write_snapshots_csv(path: str, ensemble: StationaryEnsemble) -> str:
    N = ensemble.N

    def rows():
        for k in range(len(ensemble)):
            G = ensemble.samples[k]
            for i in range(N):
                for j in range(N):
                    yield (int(ensemble.trajectory_ids[k]), float(ensemble.times[k]), i + 1, j + 1,
                           float(G[i, j].real), float(G[i, j].imag))

    return write_csv(path, ("trajectory_id", "t", "i", "j", "re", "im"), rows())
