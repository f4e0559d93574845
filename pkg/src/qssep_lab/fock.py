"""
Exact Fock-space oracle for chains of at most four sites.

Basis states are occupation bitstrings with site 1 as the most significant
bit, i.e. the first Kronecker factor; the Jordan-Wigner string runs over
the sites before k. Density matrices may carry leading batch axes so that
many noise paths evolve in one call.

Conventions against the G-matrix integrator: with G(i,j) = Tr(rho c_i^dag c_j)
and dH = sum_j c_{j+1}^dag c_j dW_j + h.c., the one-particle block of dH is
the transpose of `gmatrix.increment_matrix`, and conjugating rho by
e^{-i dH} moves G like `gmatrix.step_unitary` driven by the mirrored noise
(`mirror_noise`). Both laws coincide since dW and -dW have the same law.
"""

from dataclasses import replace
from functools import lru_cache, reduce
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import ChainConfig
from .errors import InvalidArgumentError, SizeLimitError
from .gmatrix import EdgeNoise, check_noise, increment_matrix, sample_noise, step_open, step_unitary
from fastmcp.utilities.logging import get_logger

logger = get_logger(__name__)

MAX_SITES = 4
TOL = 1e-10

_ANNIHILATOR = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
_SIGN = np.diag([1.0, -1.0]).astype(complex)
_ID = np.eye(2, dtype=complex)


def _check_sites(N: int) -> None:
    if N < 1 or N > MAX_SITES:
        raise SizeLimitError("N", N, MAX_SITES)


def _dagger(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


@lru_cache(maxsize=None)
def _annihilators(N: int) -> Tuple[np.ndarray, ...]:
    ops = []
    for k in range(1, N + 1):
        factors = [_SIGN] * (k - 1) + [_ANNIHILATOR] + [_ID] * (N - k)
        op = reduce(np.kron, factors)
        op.setflags(write=False)
        ops.append(op)
    return tuple(ops)


def jordan_wigner_annihilator(N: int, k: int) -> np.ndarray:
    """c_k on N sites: (k-1) sign factors, the 2x2 annihilator, then identities."""
    _check_sites(N)
    if k < 1 or k > N:
        raise InvalidArgumentError(f"site {k} outside 1..{N}")
    return _annihilators(N)[k - 1].copy()


def number_operator(N: int, k: int) -> np.ndarray:
    c = jordan_wigner_annihilator(N, k)
    return _dagger(c) @ c


def occupations(N: int) -> np.ndarray:
    """occupations[s, k] = n_{k+1} of basis state s."""
    states = np.arange(2 ** N)
    return ((states[:, None] >> (N - 1 - np.arange(N))[None, :]) & 1).astype(float)


def fock_quadratic_operator(A: np.ndarray) -> np.ndarray:
    """sum_{i,j} c_i^dag A_ij c_j for an N x N matrix A."""
    A = np.asarray(A, dtype=complex)
    N = A.shape[-1]
    _check_sites(N)
    cs = _annihilators(N)
    out = np.zeros(A.shape[:-2] + (2 ** N, 2 ** N), dtype=complex)
    for i in range(N):
        cd = _dagger(cs[i])
        for j in range(N):
            out = out + A[..., i, j, None, None] * (cd @ cs[j])
    return out


def one_particle_block(op: np.ndarray, N: int) -> np.ndarray:
    """K_ab = <0| c_a op c_b^dag |0>, the action of op on the one-particle sector."""
    _check_sites(N)
    states = [1 << (N - 1 - k) for k in range(N)]
    idx = np.array(states)
    return op[..., idx[:, None], idx[None, :]]


def hamiltonian_increment_full(N: int, noise: EdgeNoise, topology: str) -> np.ndarray:
    """dH = sum_j c_{j+1}^dag c_j dW_j + h.c.; periodic chains add c_1^dag c_N dW_N."""
    _check_sites(N)
    edges = N if topology == "periodic" else N - 1
    if noise.edges != edges:
        raise InvalidArgumentError(f"noise has {noise.edges} edges, a {topology} chain of N={N} needs {edges}")
    K = np.zeros(noise.dW.shape[:-1] + (N, N), dtype=complex)
    for j in range(N - 1):
        K[..., j + 1, j] += noise.dW[..., j]
    if topology == "periodic":
        K[..., 0, N - 1] += noise.dW[..., N - 1]
    lowered = fock_quadratic_operator(K)
    return lowered + _dagger(lowered)


def mirror_noise(noise: EdgeNoise) -> EdgeNoise:
    """Noise driving `gmatrix.step_unitary` along the same path as the Fock evolution."""
    return noise.mirrored()


def _unitary(dH: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(dH)
    return (V * np.exp(-1j * w)[..., None, :]) @ _dagger(V)


def evolve_density(rho: np.ndarray, dH: np.ndarray) -> np.ndarray:
    """rho -> e^{-i dH} rho e^{i dH} with the exact exponential."""
    if rho.shape[-1] != dH.shape[-1]:
        raise InvalidArgumentError(f"dimension mismatch {rho.shape} vs {dH.shape}")
    if np.max(np.abs(dH - _dagger(dH))) > TOL * (1.0 + np.max(np.abs(dH))):
        raise InvalidArgumentError("Hamiltonian increment is not Hermitian")
    U = _unitary(dH)
    return U @ rho @ _dagger(U)


def _site_index(N: int, site: int) -> int:
    if site not in (1, N):
        raise InvalidArgumentError(f"boundary site must be 1 or {N}, got {site}")
    return site - 1


def _dissipate(rho: np.ndarray, op: np.ndarray) -> np.ndarray:
    opd = _dagger(op)
    anti = opd @ op
    return op @ rho @ opd - 0.5 * (anti @ rho + rho @ anti)


def boundary_dissipator(rho: np.ndarray, N: int, site: int, alpha: float, beta: float, dt: float) -> np.ndarray:
    """(alpha L_site^+ + beta L_site^-)(rho) dt; L^+ injects with c^dag, L^- extracts with c."""
    _check_sites(N)
    if alpha < 0 or beta < 0:
        raise InvalidArgumentError("rates must be >= 0")
    c = _annihilators(N)[_site_index(N, site)]
    return (alpha * _dissipate(rho, _dagger(c)) + beta * _dissipate(rho, c)) * dt


def _boundary_lindbladian(rho: np.ndarray, config: ChainConfig) -> np.ndarray:
    N = config.N
    out = np.zeros_like(rho)
    if config.topology != "open":
        return out
    if config.alpha1 or config.beta1:
        out = out + boundary_dissipator(rho, N, 1, config.alpha1, config.beta1, 1.0)
    if config.alphaN or config.betaN:
        out = out + boundary_dissipator(rho, N, N, config.alphaN, config.betaN, 1.0)
    return out


def _hopping_operators(config: ChainConfig) -> Sequence[np.ndarray]:
    N = config.N
    cs = _annihilators(N)
    pairs = [(j, j + 1) for j in range(N - 1)]
    if config.topology == "periodic":
        pairs.append((N - 1, 0))
    return [_dagger(cs[b]) @ cs[a] for a, b in pairs]


def lindbladian(rho: np.ndarray, config: ChainConfig) -> np.ndarray:
    """
    Noise-averaged generator: each edge hops both ways at unit rate, plus the boundary terms.

    L(rho) = sum_j D[l_j] + D[l_j^dag] + boundary, l_j = c_{j+1}^dag c_j,
    D[l](rho) = l rho l^dag - 1/2 {l^dag l, rho}.
    """
    _check_sites(config.N)
    out = _boundary_lindbladian(rho, config)
    for hop in _hopping_operators(config):
        out = out + _dissipate(rho, hop) + _dissipate(rho, _dagger(hop))
    return out


def lindbladian_matrix(config: ChainConfig) -> np.ndarray:
    """Superoperator of `lindbladian` acting on row-major vec(rho)."""
    D = 2 ** config.N
    basis = np.eye(D * D, dtype=complex).reshape(D * D, D, D)
    return lindbladian(basis, config).reshape(D * D, D * D).T


def averaged_lindblad_step(rho: np.ndarray, dt: float, config: ChainConfig) -> np.ndarray:
    """Explicit midpoint step of d rho = L(rho) dt."""
    if dt <= 0:
        raise InvalidArgumentError(f"dt must be > 0, got {dt}")
    half = rho + 0.5 * dt * lindbladian(rho, config)
    return rho + dt * lindbladian(half, config)


def _boundary_midpoint(rho: np.ndarray, config: ChainConfig) -> np.ndarray:
    dt = config.dt
    half = rho + 0.5 * dt * _boundary_lindbladian(rho, config)
    return rho + dt * _boundary_lindbladian(half, config)


def evolve_step(rho: np.ndarray, noise: EdgeNoise, config: ChainConfig) -> np.ndarray:
    """One stochastic step: unitary conjugation, then (open chains) a midpoint boundary step."""
    check_noise(noise, config)
    rho = evolve_density(rho, hamiltonian_increment_full(config.N, noise, config.topology))
    if config.topology == "open":
        rho = _boundary_midpoint(rho, config)
        rho = 0.5 * (rho + _dagger(rho))
    return rho


def quadratic_state(M: np.ndarray) -> np.ndarray:
    """
    rho = exp(-sum c^dag M c)/Z.

    The two-point matrix of this state is the transpose of
    e^{-M}(I + e^{-M})^{-1}; both agree for real symmetric M.
    """
    M = np.asarray(M, dtype=complex)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidArgumentError("M must be square")
    _check_sites(M.shape[0])
    if np.max(np.abs(M - _dagger(M))) > TOL:
        raise InvalidArgumentError("M is not Hermitian")
    w, V = np.linalg.eigh(fock_quadratic_operator(M))
    # shift by the ground energy so the exponential never overflows
    weights = np.exp(-(w - w.min()))
    rho = (V * weights[None, :]) @ _dagger(V)
    return rho / np.trace(rho).real


def fermi_matrix(M: np.ndarray) -> np.ndarray:
    """e^{-M}(I + e^{-M})^{-1} via the eigendecomposition of M."""
    w, V = np.linalg.eigh(np.asarray(M, dtype=complex))
    f = 1.0 / (1.0 + np.exp(w))
    return (V * f[None, :]) @ _dagger(V)


def two_point_matrix(rho: np.ndarray) -> np.ndarray:
    """G(i,j) = Tr(rho c_i^dag c_j)."""
    D = rho.shape[-1]
    N = int(round(np.log2(D)))
    if 2 ** N != D:
        raise InvalidArgumentError(f"dimension {D} is not a power of two")
    _check_sites(N)
    cs = _annihilators(N)
    G = np.empty(rho.shape[:-2] + (N, N), dtype=complex)
    for i in range(N):
        cd = _dagger(cs[i])
        for j in range(N):
            G[..., i, j] = np.trace(rho @ (cd @ cs[j]), axis1=-2, axis2=-1)
    return G


def wick_check(rho: np.ndarray, sites: Sequence[int]) -> Tuple[float, float]:
    """(Tr(rho n_{j1}...n_{jk}), det G[sites, sites]) for distinct 1-based sites."""
    sites = list(sites)
    if len(set(sites)) != len(sites):
        raise InvalidArgumentError(f"sites must be distinct, got {sites}")
    D = rho.shape[-1]
    N = int(round(np.log2(D)))
    for s in sites:
        if s < 1 or s > N:
            raise InvalidArgumentError(f"site {s} outside 1..{N}")
    prod = reduce(np.matmul, (number_operator(N, s) for s in sites), np.eye(D, dtype=complex))
    direct = np.trace(rho @ prod).real
    G = two_point_matrix(rho)
    idx = np.array(sites) - 1
    det = np.linalg.det(G[np.ix_(idx, idx)]).real
    return float(direct), float(det)


def determinant_identity(rho: np.ndarray, A: np.ndarray) -> Tuple[complex, complex]:
    """
    (Tr(rho e^{sum c^dag A c}), det[I + G^T (e^A - I)]) for Hermitian A.

    G^T is the matrix Tr(rho c_j^dag c_i); for diagonal A the transpose is immaterial.
    """
    A = np.asarray(A, dtype=complex)
    w, V = np.linalg.eigh(fock_quadratic_operator(A))
    lhs = np.trace(rho @ ((V * np.exp(w)[None, :]) @ _dagger(V)))
    wa, Va = np.linalg.eigh(A)
    expA = (Va * np.exp(wa)[None, :]) @ _dagger(Va)
    G = two_point_matrix(rho)
    rhs = np.linalg.det(np.eye(A.shape[0]) + G.T @ (expA - np.eye(A.shape[0])))
    return complex(lhs), complex(rhs)


def mgf_observable(h: Sequence[float]) -> np.ndarray:
    """Diagonal operator e^{sum_j h_j n_j}."""
    h = np.asarray(h, dtype=float)
    _check_sites(h.size)
    return np.diag(np.exp(occupations(h.size) @ h)).astype(complex)


def basis_state(bits: Sequence[int]) -> np.ndarray:
    """|n_1 ... n_N><n_1 ... n_N| for an occupation bitstring."""
    N = len(bits)
    _check_sites(N)
    index = int("".join(str(int(b)) for b in bits), 2)
    rho = np.zeros((2 ** N, 2 ** N), dtype=complex)
    rho[index, index] = 1.0
    return rho


def check_density(rho: np.ndarray, tol: float = TOL) -> None:
    """Raise InvalidArgumentError unless rho is Hermitian, unit trace and positive."""
    if np.max(np.abs(rho - _dagger(rho))) > tol:
        raise InvalidArgumentError("density matrix is not Hermitian")
    tr = np.trace(rho, axis1=-2, axis2=-1)
    if np.max(np.abs(tr - 1.0)) > tol:
        raise InvalidArgumentError(f"trace deviates from 1 by {np.max(np.abs(tr - 1.0)):.3e}")
    if np.min(np.linalg.eigvalsh(0.5 * (rho + _dagger(rho)))) < -tol:
        raise InvalidArgumentError("density matrix has negative eigenvalues")


def _default_bits(N: int) -> Tuple[int, ...]:
    return tuple((k + 1) % 2 for k in range(N))


def coupled_path_errors(config: ChainConfig, T: float, rng: np.random.Generator,
                        bits: Optional[Sequence[int]] = None, levels: int = 2) -> List[float]:
    """
    Drive Fock states and G-matrices with one shared Brownian path.

    Level k steps with dt / 2^k; the coarse increments are sums of the
    finest ones, so all levels see the same path. Starts from the basis
    state `bits` (alternating occupations by default) and returns, per
    level, max_t max_ij |Tr(rho_t c_i^dag c_j) - G_t(i,j)|.
    """
    _check_sites(config.N)
    if levels < 1:
        raise InvalidArgumentError(f"levels must be >= 1, got {levels}")
    bits = tuple(bits) if bits is not None else _default_bits(config.N)
    if len(bits) != config.N:
        raise InvalidArgumentError(f"need {config.N} occupation bits, got {len(bits)}")
    configs = [replace(config, dt=config.dt / 2 ** k) for k in range(levels)]
    rhos = [basis_state(bits) for _ in configs]
    Gs = [np.diag(np.asarray(bits, dtype=float)).astype(complex) for _ in configs]
    worst = [0.0] * levels
    fine = 2 ** (levels - 1)
    steps = max(1, int(round(T / config.dt)))

    def advance(k: int, dW: np.ndarray) -> None:
        cfg = configs[k]
        noise = EdgeNoise(dW, cfg.topology, cfg.dt)
        rhos[k] = evolve_step(rhos[k], noise, cfg)
        dh = increment_matrix(mirror_noise(noise), cfg)
        Gs[k] = step_open(Gs[k], dh, cfg) if cfg.topology == "open" else step_unitary(Gs[k], dh)
        worst[k] = max(worst[k], float(np.max(np.abs(two_point_matrix(rhos[k]) - Gs[k]))))

    for _ in range(steps):
        dW = sample_noise(configs[-1], rng, batch=fine).dW
        for k in range(levels):
            width = fine // 2 ** k
            for chunk in dW.reshape(2 ** k, width, -1).sum(axis=1):
                advance(k, chunk)
    logger.debug(f"coupled paths N={config.N} dt={config.dt} steps={steps}: deviations {worst}")
    return worst


def noise_averaged_mgf(config: ChainConfig, h: Sequence[float], T: float, paths: int,
                       rng: np.random.Generator, bits: Optional[Sequence[int]] = None) -> Tuple[float, float]:
    """
    Monte Carlo mean and standard error of Tr(rho_T e^{sum h_j n_j}) over noise paths.

    All paths evolve as one batch from the basis state `bits`.
    """
    _check_sites(config.N)
    if paths < 2:
        raise InvalidArgumentError(f"need at least 2 paths, got {paths}")
    bits = tuple(bits) if bits is not None else _default_bits(config.N)
    obs = mgf_observable(h)
    rho = np.broadcast_to(basis_state(bits), (paths,) + (2 ** config.N,) * 2).copy()
    steps = max(1, int(round(T / config.dt)))
    for _ in range(steps):
        rho = evolve_step(rho, sample_noise(config, rng, batch=paths), config)
    values = np.trace(rho @ obs, axis1=-2, axis2=-1).real
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(paths))
