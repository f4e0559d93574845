"""
Saddle-point and variational problems built on the F0 series.

With A(x) = int_x^1 a and I_p(a) = int g_p prod a = kappa_p(A, ..., A):

    F0(a)  = sum_p I_p / p,     F0~(a) = sum_p (-1)^{p+1} I_p / p = -F0(-a).

The resolvent problem solves a = h/(z - h b), b = dF0/da and returns
F(h; z) = int [log(1 - h b / z) + a b] - F0(a). The SSEP problem extremises

    J(a, b) = int [log(1 + b (e^h - 1)) - a b] + F0~(a),

whose stationary point gives a = (e^h - 1)/(1 + b (e^h - 1)), b = dF0~/da.
Both are solved by damped fixed-point iteration on piecewise-constant grid
functions; no boundary values are imposed on a or b.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import DomainError, InvalidArgumentError, SingularityError, SolverError
from .freeprob import MAX_LOOP_ORDER, IndicatorCumulants, LocalCumulants
from .grid import GridFunction
from .utils import write_csv, write_json
from fastmcp.utilities.logging import get_logger

logger = get_logger(__name__)

DEFAULT_ORDER = 8
DAMPING = 0.5
MIN_DAMPING = 1e-3
SINGULAR_TOL = 1e-8
CONTINUATION_STEP = 0.5


def _check_order(P: int) -> None:
    if P < 1 or P > MAX_LOOP_ORDER:
        raise InvalidArgumentError(f"truncation order must lie in 1..{MAX_LOOP_ORDER}, got {P}")


def check_decay(terms: np.ndarray, what: str = "series") -> None:
    """Raise DomainError unless the last term is below half of the larger of the two before it."""
    mags = np.abs(np.asarray(terms, dtype=float))
    if mags.size < 3 or mags.max() == 0.0:
        return
    last = mags[-1]
    if last <= 1e-14 * mags.max():
        return
    if last >= 0.5 * mags[-3:-1].max():
        raise DomainError(f"{what} terms do not decay: |t_P| = {last:.3e}, previous {mags[-3:-1].max():.3e}")


def series_terms(a: GridFunction, P: int = DEFAULT_ORDER, model: Optional[LocalCumulants] = None) -> np.ndarray:
    """I_p / p for p = 1..P."""
    _check_order(P)
    model = model or IndicatorCumulants()
    return model.loop_integrals(a, P) / np.arange(1, P + 1)


def f0_series(a: GridFunction, P: int = DEFAULT_ORDER, model: Optional[LocalCumulants] = None,
              check: bool = True) -> float:
    """F0(a) = sum_p (1/p) int g_p prod a, truncated at order P."""
    terms = series_terms(a, P, model)
    if check:
        check_decay(terms, "F0")
    return float(terms.sum())


def f0_tilde_series(a: GridFunction, P: int = DEFAULT_ORDER, model: Optional[LocalCumulants] = None,
                    check: bool = True) -> float:
    """F0~(a) = sum_k (-1)^{k+1}/k kappa_k(A), A(x) = int_x^1 a."""
    terms = series_terms(a, P, model)
    if check:
        check_decay(terms, "F0~")
    signs = (-1.0) ** np.arange(P)
    return float((signs * terms).sum())


def f0_gradient(a: GridFunction, P: int = DEFAULT_ORDER, model: Optional[LocalCumulants] = None,
                alternating: bool = False) -> np.ndarray:
    """dF0/da(x_m) (or dF0~/da with `alternating`) at the grid midpoints."""
    _check_order(P)
    model = model or IndicatorCumulants()
    grads = model.loop_gradients(a, P)
    if alternating:
        grads = grads * ((-1.0) ** np.arange(P))[:, None]
    return grads.sum(axis=0)


def functional_derivative_check(a: GridFunction, P: int = DEFAULT_ORDER, model: Optional[LocalCumulants] = None,
                                eps: float = 1e-6, directions: int = 4,
                                rng: Optional[np.random.Generator] = None) -> float:
    """
    Largest relative gap between the analytic derivative and central differences of F0.

    Directions are random grid functions; the analytic side is
    sum_m dF0/da(x_m) delta_m / M.
    """
    model = model or IndicatorCumulants()
    rng = rng or np.random.default_rng(0)
    grad = f0_gradient(a, P, model)
    worst = 0.0
    for _ in range(directions):
        delta = rng.standard_normal(a.M)
        plus = f0_series(GridFunction(a.values + eps * delta), P, model, check=False)
        minus = f0_series(GridFunction(a.values - eps * delta), P, model, check=False)
        numeric = (plus - minus) / (2.0 * eps)
        analytic = float(np.dot(grad, delta)) / a.M
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), 1e-12))
    return worst


@dataclass
class SaddleSolution:
    a: GridFunction
    b: GridFunction
    value: float
    residual: float
    iterations: int = 0
    z: float = 0.0
    P: int = DEFAULT_ORDER
    history: List[float] = field(default_factory=list, repr=False)

    def report(self) -> Dict[str, Any]:
        return {"problem": "saddle", "z": self.z, "truncation_order": self.P, "iterations": self.iterations,
                "residual": self.residual, "value": self.value, "grid": self.a.M}


def saddle_functional(h: GridFunction, z: float, a: GridFunction, b: GridFunction, P: int = DEFAULT_ORDER,
                      model: Optional[LocalCumulants] = None) -> float:
    """int [log(1 - h b / z) + a b] - F0(a) for arbitrary a, b."""
    arg = 1.0 - h.values * b.values / z
    if np.any(arg <= 0):
        raise DomainError("1 - h b / z must stay positive")
    return float(np.mean(np.log(arg) + a.values * b.values)) - f0_series(a, P, model, check=False)


def solve_saddle(h: GridFunction, z: float, model: Optional[LocalCumulants] = None, P: int = DEFAULT_ORDER,
                 tol: float = 1e-8, max_iter: int = 5000, damping: float = DAMPING) -> SaddleSolution:
    """
    Solve a = h/(z - h b), b = dF0/da by damped fixed-point iteration.

    Starts from the order-one closed form a = h/(z - h g_1). The damping is
    halved whenever the residual grows.

    Raises:
        SingularityError: when some z - h(x) b(x) comes within 1e-8 of zero
        SolverError: without convergence after `max_iter` iterations
    """
    _check_order(P)
    if z == 0:
        raise InvalidArgumentError("z must be nonzero")
    model = model or IndicatorCumulants()
    hv = h.values
    zero = GridFunction(np.zeros(h.M))
    b = f0_gradient(zero, 1, model)
    a = hv / (z - hv * b)
    theta = damping
    history: List[float] = []
    residual = math.inf
    for it in range(1, max_iter + 1):
        b_target = f0_gradient(GridFunction(a), P, model)
        denom = z - hv * b_target
        if np.min(np.abs(denom)) < SINGULAR_TOL:
            raise SingularityError("z - h b vanishes", residuals=history, z=z)
        a_target = hv / denom
        new_residual = float(max(np.max(np.abs(a_target - a)), np.max(np.abs(b_target - b))))
        if new_residual > residual and theta > MIN_DAMPING:
            theta *= 0.5
            logger.warning(f"saddle z={z}: residual grew to {new_residual:.3e}, damping {theta}")
        residual = new_residual
        history.append(residual)
        logger.debug(f"saddle z={z} iteration {it}: residual {residual:.3e}")
        if residual < tol:
            a_grid, b_grid = GridFunction(a), GridFunction(b_target)
            value = saddle_functional(h, z, a_grid, b_grid, P, model)
            check_decay(series_terms(a_grid, P, model), "F0")
            logger.info(f"saddle z={z}: converged in {it} iterations, F={value:.10g}")
            return SaddleSolution(a=a_grid, b=b_grid, value=value, residual=residual, iterations=it, z=z, P=P,
                                  history=history)
        a = a + theta * (a_target - a)
        b = b_target
    raise SolverError(f"saddle iteration did not converge in {max_iter} iterations", residuals=history, z=z)


def saddle_stieltjes(solution: SaddleSolution, h: GridFunction) -> float:
    """G(z) = int dx / (z - h b), the z-derivative of F(h; z) plus 1/z."""
    return float(np.mean(1.0 / (solution.z - h.values * solution.b.values)))


@dataclass
class FssepSolution:
    a: GridFunction
    b: GridFunction
    value: float
    residual: float
    iterations: int = 0
    P: int = DEFAULT_ORDER
    continuation: List[float] = field(default_factory=list)
    history: List[float] = field(default_factory=list, repr=False)

    def report(self) -> Dict[str, Any]:
        return {"problem": "fssep", "truncation_order": self.P, "iterations": self.iterations,
                "residual": self.residual, "value": self.value, "grid": self.a.M,
                "continuation": self.continuation, "branch": "continuation from h = 0"}


def ssep_functional(h: GridFunction, a: GridFunction, b: GridFunction, P: int = DEFAULT_ORDER,
                    model: Optional[LocalCumulants] = None) -> float:
    """J(a, b) = int [log(1 + b (e^h - 1)) - a b] + F0~(a)."""
    E = np.expm1(h.values)
    arg = 1.0 + b.values * E
    if np.any(arg <= 0):
        raise DomainError("1 + b (e^h - 1) must stay positive")
    return float(np.mean(np.log(arg) - a.values * b.values)) + f0_tilde_series(a, P, model, check=False)


def _fssep_stage(E: np.ndarray, a: np.ndarray, P: int, model: LocalCumulants, tol: float, max_iter: int,
                 history: List[float]) -> Tuple[np.ndarray, np.ndarray, float, int]:
    theta = DAMPING
    residual = math.inf
    for it in range(1, max_iter + 1):
        b_target = f0_gradient(GridFunction(a), P, model, alternating=True)
        arg = 1.0 + b_target * E
        if np.any(arg <= SINGULAR_TOL):
            raise DomainError("iterate left the domain of the logarithm")
        a_target = E / arg
        new_residual = float(np.max(np.abs(a_target - a)))
        if new_residual > residual and theta > MIN_DAMPING:
            theta *= 0.5
            logger.warning(f"fssep: residual grew to {new_residual:.3e}, damping {theta}")
        residual = new_residual
        history.append(residual)
        if residual < tol:
            return a_target, b_target, residual, it
        step = theta * (a_target - a)
        # halve the step while the next b would leave the log domain
        for _ in range(30):
            trial = a + step
            b_trial = f0_gradient(GridFunction(trial), P, model, alternating=True)
            if np.all(1.0 + b_trial * E > SINGULAR_TOL):
                break
            step = 0.5 * step
            logger.warning("fssep: step halved to stay in the log domain")
        else:
            raise DomainError("step halving could not keep 1 + b (e^h - 1) positive")
        a = trial
    raise SolverError(f"fssep iteration did not converge in {max_iter} iterations", residuals=history)


def f_ssep(h: GridFunction, P: int = DEFAULT_ORDER, tol: float = 1e-8, model: Optional[LocalCumulants] = None,
           max_iter: int = 5000) -> FssepSolution:
    """
    Stationary value of J(a, b) for the 0-1 reservoir profile.

    The stationarity equations are iterated along h_k = (k/K) h with
    K = ceil(sup|h| / 0.5), each stage warm-started from the previous one,
    so the branch connected to the trivial solution at h = 0 is followed.
    """
    _check_order(P)
    model = model or IndicatorCumulants()
    stages = max(1, math.ceil(h.sup() / CONTINUATION_STEP))
    a = np.zeros(h.M)
    b = f0_gradient(GridFunction(a), P, model, alternating=True)
    history: List[float] = []
    fractions = []
    iterations = 0
    residual = 0.0
    for k in range(1, stages + 1):
        s = k / stages
        E = np.expm1(s * h.values)
        a = E / (1.0 + b * E) if np.all(1.0 + b * E > SINGULAR_TOL) else a
        a, b, residual, it = _fssep_stage(E, a, P, model, tol, max_iter, history)
        iterations += it
        fractions.append(s)
    a_grid, b_grid = GridFunction(a), GridFunction(b)
    check_decay(series_terms(a_grid, P, model), "F0~")
    value = ssep_functional(h, a_grid, b_grid, P, model)
    logger.info(f"fssep: {stages} continuation stages, {iterations} iterations, value {value:.10g}")
    return FssepSolution(a=a_grid, b=b_grid, value=value, residual=residual, iterations=iterations, P=P,
                         continuation=fractions, history=history)


def resolvent_log_samples(samples: np.ndarray, h: GridFunction, z: float) -> np.ndarray:
    """(1/N) tr log(1 - M_h / z) per sample, M_h sharing its spectrum with M diag(h(i/N))."""
    N = samples.shape[-1]
    hv = h.at(np.arange(1, N + 1) / N)
    eigs = np.linalg.eigvals(samples * hv[None, None, :])
    return np.real(np.sum(np.log(1.0 - eigs / z), axis=-1)) / N


def write_solver_outputs(output_dir: str, name: str, solution, inputs: Dict[str, Any]) -> List[str]:
    """`<name>.json` solver report and `<name>_profile.csv` with columns x, a, b."""
    report = dict(solution.report())
    report["inputs"] = inputs
    json_path = write_json(f"{output_dir}/{name}.json", report)
    x = solution.a.x
    csv_path = write_csv(f"{output_dir}/{name}_profile.csv", ("x", "a", "b"),
                         zip(x, solution.a.values, solution.b.values))
    return [json_path, csv_path]
