"""
Experiment handles behind the `qssep` subcommands.

Each handle owns one ExperimentConfig. Raw methods compute and write
artifacts and raise on failure; `describe_*` methods wrap them and render a
Markdown report that starts with `# ok:` or `# error:`. Every successful or
failed run that produced files also writes `manifest.json`.
"""

import itertools
import math
import os
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ChainConfig, ExperimentConfig
from .ensemble import (
    LoopSpec, eulerian_test, estimate_loop_cumulant, haar_stationarity_test, is_balanced, loop_prediction,
    parse_edges, self_averaging_test, write_results_csv,
)
from .errors import ConfigError, InvalidArgumentError, InvariantViolation, QssepError, SizeLimitError
from .fock import (
    MAX_SITES, coupled_path_errors, determinant_identity, lindbladian_matrix, noise_averaged_mgf,
    quadratic_state, wick_check,
)
from .freeprob import IndicatorCumulants
from .gmatrix import StationaryEnsemble, mean_stationary_profile, stationary_samples, write_snapshots_csv
from .grid import GridFunction
from .haar import (
    SpectralMeasure, StieltjesGrid, diagonal_for, free_compression_predict, haar_model, hciz_series_check,
    kolmogorov_distance, orbit_ensemble, principal_submatrix_spectrum, structured_trace_check,
    write_measure_csv,
)
from .report import curves_svg, histogram_svg
from .ssep import (
    BoundaryRates, SsepState, build_generator, cgf_exact, empirical_profile, extrapolate_cgf, generator_from_chain,
    gillespie_run, mgf_at_time, profile, write_trajectory_csv,
)
from .utils import generator, markdown_table, write_csv, write_json, write_manifest
from .variational import f_ssep, saddle_stieltjes, solve_saddle, write_solver_outputs
from fastmcp.utilities.logging import get_logger

logger = get_logger(__name__)

USAGE_ERRORS = (ConfigError, InvalidArgumentError, SizeLimitError)
USAGE_PREFIX = "# error: usage"


class ExperimentHandle:
    """
    Shared plumbing: output directory, named random streams, artifact list and manifest.
    """

    experiment = "experiment"

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.output_dir = config.output_dir
        self.artifacts: List[str] = []

    @property
    def chain(self) -> ChainConfig:
        return self.config.chain

    @property
    def params(self) -> Dict[str, Any]:
        return self.config.params

    def rng(self, stream: str) -> np.random.Generator:
        return generator(self.config.seed, stream)

    def path(self, filename: str) -> str:
        os.makedirs(self.output_dir, exist_ok=True)
        return os.path.join(self.output_dir, filename)

    def record(self, *paths: str) -> None:
        self.artifacts.extend(paths)

    def write_manifest(self) -> str:
        return write_manifest(self.output_dir, self.artifacts, extra={
            "experiment": self.config.name,
            "seed": self.config.seed,
            "chain": self.chain.to_dict(),
            "params": self.params,
        })

    def _describe(self, title: str, body: Callable[[], str]) -> str:
        """
        Run `body` and render its Markdown, or the error it raised.

        Returns:
            `# ok: <title>` followed by the body, or `# error: ...`
        """
        try:
            text = body()
            status = f"# ok: {title}\n{text}"
        except USAGE_ERRORS as e:
            logger.error(f"{title}: {e}")
            status = f"{USAGE_PREFIX}: {title}\n{type(e).__name__}: {e}"
        except InvariantViolation as e:
            logger.error(f"{title}: invariant violated: {e}")
            status = f"# error: {title} failed a check\n{e}"
        except QssepError as e:
            logger.error(f"{title}: {type(e).__name__}: {e}")
            status = f"# error: {title} failed\n{type(e).__name__}: {e}"
        if self.artifacts:
            manifest = self.write_manifest()
            status += f"\n\nartifacts: {len(self.artifacts)} files, manifest {manifest}"
        return status


class OracleHandle(ExperimentHandle):
    """Fock-space cross-checks on chains of at most four sites."""

    experiment = "oracle"

    def run_checks(self, N: int = 3, T: float = 1.0, paths: int = 2000, coupling_dt: float = 1e-4,
                   average_dt: float = 1e-3) -> List[Dict[str, Any]]:
        """
        Wick factorisation, determinant identity, Lindbladian against the SSEP
        generator, pathwise Fock/G coupling with its order check, and the
        noise-averaged moment generating function against the master equation.
        """
        if N < 2 or N > MAX_SITES:
            raise SizeLimitError("N", N, MAX_SITES)
        rng = self.rng("oracle")
        checks = []

        def add(name: str, value: float, tolerance: float, passed: Optional[bool] = None):
            ok = value <= tolerance if passed is None else passed
            checks.append({"check": name, "value": float(value), "tolerance": float(tolerance), "passed": bool(ok)})

        X = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
        rho = quadratic_state(0.5 * (X + X.conj().T))
        wick = 0.0
        for size in range(1, N + 1):
            for sites in itertools.combinations(range(1, N + 1), size):
                direct, det = wick_check(rho, sites)
                wick = max(wick, abs(direct - det))
        add("wick", wick, 1e-10)

        Y = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
        lhs, rhs = determinant_identity(rho, 0.5 * (Y + Y.conj().T))
        add("determinant_identity", abs(lhs - rhs) / max(1.0, abs(lhs)), 1e-10)

        open_chain = ChainConfig(N=N, topology="open", alpha1=0.7, beta1=0.3, alphaN=0.2, betaN=0.9)
        D = 2 ** N
        diag = np.arange(D) * (D + 1)
        for cfg in (ChainConfig(N=N, topology="closed"), ChainConfig(N=N, topology="periodic"), open_chain):
            S = lindbladian_matrix(cfg)[np.ix_(diag, diag)]
            L = generator_from_chain(cfg).dense()
            add(f"lindbladian_{cfg.topology}", float(np.max(np.abs(S - L))), 1e-12)

        coupling = replace(open_chain, dt=coupling_dt)
        errors = coupled_path_errors(coupling, T, self.rng("oracle-coupling"), levels=2)
        add("coupling_dt", errors[0], 1e-3)
        ratio = errors[0] / errors[1] if errors[1] > 0 else math.inf
        add("coupling_order", ratio, 2.5, passed=1.5 <= ratio <= 2.5)

        average = replace(open_chain, dt=average_dt)
        h = rng.uniform(-1.0, 1.0, N)
        bits = tuple((k + 1) % 2 for k in range(N))
        mean, stderr = noise_averaged_mgf(average, h, T, paths, self.rng("oracle-paths"), bits=bits)
        exact = mgf_at_time(generator_from_chain(average), h, T, SsepState(bits))
        add("correspondence", abs(mean - exact), 3.0 * stderr)

        self.record(write_json(self.path("oracle.json"), {
            "N": N, "T": T, "paths": paths, "h": h, "coupling_errors": errors,
            "mgf": {"monte_carlo": mean, "stderr": stderr, "exact": exact}, "checks": checks,
        }))
        return checks

    def describe_checks(self, N: int = 3, T: float = 1.0, paths: int = 2000) -> str:
        def body():
            checks = self.run_checks(N=N, T=T, paths=paths)
            table = markdown_table(("check", "value", "tolerance", "passed"),
                                   [(c["check"], c["value"], c["tolerance"], c["passed"]) for c in checks])
            failed = [c["check"] for c in checks if not c["passed"]]
            if failed:
                raise InvariantViolation(f"failed: {', '.join(failed)}\n{table}")
            return table

        return self._describe(f"Fock oracle checks (N={N})", body)


class ChainHandle(ExperimentHandle):
    """QSSEP ensembles: trajectories, stationarity, loop cumulants, Eulerian products, self-averaging."""

    experiment = "chain"

    def sample(self, config: Optional[ChainConfig] = None) -> StationaryEnsemble:
        p = self.params
        return stationary_samples(config or self.chain, trajectories=self.config.ensemble_size,
                                  snapshots=int(p.get("snapshots", 1)), burn_in=p.get("burn_in"),
                                  interval=p.get("interval"), scheme=p.get("scheme", "exact"),
                                  workers=self.config.workers)

    def _require_open(self) -> IndicatorCumulants:
        if self.chain.topology != "open":
            raise InvalidArgumentError(f"needs an open chain, got {self.chain.topology}")
        return IndicatorCumulants(self.chain.n_a, self.chain.n_b)

    def _config_loops(self) -> List[LoopSpec]:
        loops = self.params.get("loops")
        if not loops or not isinstance(loops, list):
            raise ConfigError("params.loops", "the loop estimator needs a list of site tuples such as \"5,15\"")
        return [LoopSpec.parse(t) if isinstance(t, str) else LoopSpec(tuple(int(s) for s in t)) for t in loops]

    def _config_edges(self) -> List[Tuple[int, int]]:
        edges = self.params.get("edges")
        if not edges or not isinstance(edges, str):
            raise ConfigError("params.edges", "the eulerian estimator needs an edge list such as \"1-2,2-3\"")
        return parse_edges(edges)

    def simulate(self) -> Tuple[StationaryEnsemble, np.ndarray, np.ndarray]:
        """
        Stationary snapshots plus the mean diagonal profile with per-trajectory standard errors.

        The config's `estimators` add loop cumulants (`params.loops`) and the
        Eulerian product test (`params.edges`) on the same ensemble.
        """
        estimators = self.config.estimators
        loops = self._config_loops() if "loop" in estimators else []
        edges = self._config_edges() if "eulerian" in estimators else []
        if loops:
            self._require_open()
            for loop in loops:
                loop.check(self.chain.N)
        ensemble = self.sample()
        diag = np.real(np.diagonal(ensemble.samples, axis1=1, axis2=2))
        per_traj = diag.reshape(self.config.ensemble_size, -1, ensemble.N).mean(axis=1)
        mean = per_traj.mean(axis=0)
        stderr = per_traj.std(axis=0, ddof=1) / math.sqrt(per_traj.shape[0]) if per_traj.shape[0] > 1 \
            else np.zeros(ensemble.N)
        exact = mean_stationary_profile(self.chain) if self.chain.topology == "open" else np.full(ensemble.N, np.nan)
        N = ensemble.N
        self.record(write_snapshots_csv(self.path("snapshots.csv"), ensemble))
        self.record(write_csv(self.path("profile.csv"), ("i", "x", "mean", "stderr", "exact"),
                              zip(range(1, N + 1), np.arange(1, N + 1) / N, mean, stderr, exact)))
        if loops:
            self.loop_cumulants(loops, ensemble=ensemble)
        if edges:
            self.eulerian(edges, ensemble=ensemble)
        return ensemble, mean, stderr

    def describe_simulate(self) -> str:
        def body():
            ensemble, mean, stderr = self.simulate()
            rows = [(i + 1, mean[i], stderr[i]) for i in range(ensemble.N)]
            text = (f"{len(ensemble)} snapshots from {self.config.ensemble_size} trajectories, "
                    f"N={ensemble.N} {self.chain.topology}\n\n" + markdown_table(("i", "E[G(i,i)]", "stderr"), rows))
            extra = [name for name in self.config.estimators if name != "profile"]
            if extra:
                text += f"\n\nestimators: {', '.join(extra)}"
            return text

        return self._describe("QSSEP simulation", body)

    def stationary_test(self, times: Sequence[float], max_ks: Optional[float] = None) -> List[Dict[str, Any]]:
        """Law of G(1,1) - G(2,2) against Uniform[-1, 1] at every time in `times`."""
        results = []
        for T in times:
            res = haar_stationarity_test(self.chain, self.config.ensemble_size, T,
                                         rng=self.rng(f"haar-stationarity:{T!r}"),
                                         scheme=self.params.get("scheme", "exact"))
            tag = f"{T:g}"
            self.record(histogram_svg(self.path(f"stationarity_t{tag}.svg"), res.D, bins=40, range_=(-1.0, 1.0),
                                      title=f"t = {tag}", xlabel="G(1,1) - G(2,2)",
                                      reference=(np.array([-1.0, 1.0]), np.array([0.5, 0.5]))))
            results.append({"T": T, "trajectories": res.trajectories, "ks": res.ks, "pvalue": res.pvalue})
        self.record(write_json(self.path("stationarity.json"), {"results": results}))
        if max_ks is not None:
            last = results[-1]
            if last["ks"] >= max_ks:
                raise InvariantViolation(f"KS distance {last['ks']:.4f} at t={last['T']} is not below {max_ks}")
        return results

    def describe_stationary_test(self, times: Sequence[float], max_ks: Optional[float] = None) -> str:
        def body():
            results = self.stationary_test(times, max_ks)
            return markdown_table(("t", "trajectories", "KS", "p-value"),
                                  [(r["T"], r["trajectories"], r["ks"], r["pvalue"]) for r in results])

        return self._describe("Haar stationarity test", body)

    def loop_cumulants(self, loops: Sequence[LoopSpec], strict: bool = False,
                       ensemble: Optional[StationaryEnsemble] = None) -> List[Tuple]:
        """Scaled loop cumulants with the indicator-cumulant prediction, one CSV row per loop."""
        model = self._require_open()
        N = self.chain.N
        for loop in loops:
            loop.check(N)
        if ensemble is None:
            ensemble = self.sample()
        blocks = self.params.get("blocks")
        rows, misses = [], []
        for loop in loops:
            est = estimate_loop_cumulant(ensemble, loop, blocks=blocks)
            target = loop_prediction(loop, N, model)
            bias = est.value - target
            rows.append(("loop", loop.p, "-".join(str(s) for s in loop.sites), est.value, est.stderr, est.samples,
                         N, target, bias))
            if abs(bias) > 3.0 * est.stderr:
                misses.append(str(loop))
        self.record(write_results_csv(self.path("loop_cumulants.csv"), rows))
        if strict and misses:
            raise InvariantViolation(f"loops outside 3 s.e. of the prediction: {'; '.join(misses)}")
        return rows

    def describe_loop_cumulants(self, loops: Sequence[LoopSpec], strict: bool = False) -> str:
        def body():
            rows = self.loop_cumulants(loops, strict)
            header = ("p", "sites", "estimate", "stderr", "samples", "prediction", "bias", "within 3 s.e.")
            return markdown_table(header, [(r[1], r[2], r[3], r[4], r[5], r[7], r[8], abs(r[8]) <= 3.0 * r[4])
                                           for r in rows])

        return self._describe("loop cumulants", body)

    def eulerian(self, edges: Sequence[Tuple[int, int]],
                 ensemble: Optional[StationaryEnsemble] = None) -> Dict[str, Any]:
        """Mean edge product; a non-Eulerian multiset must vanish within 3 s.e."""
        if ensemble is None:
            ensemble = self.sample()
        est = eulerian_test(ensemble, edges, blocks=self.params.get("blocks"))
        balanced = is_balanced(edges)
        label = ",".join(f"{i}-{j}" for i, j in edges)
        self.record(write_results_csv(self.path("eulerian.csv"), [
            ("eulerian", len(edges), label, est.value, est.stderr, est.samples, ensemble.N, "" if balanced else 0.0,
             "" if balanced else est.value),
        ]))
        result = {"edges": label, "balanced": balanced, **est.to_dict()}
        if not balanced:
            off = abs(est.value) > 3.0 * est.stderr or abs(est.imag) > 3.0 * est.imag_stderr
            if off:
                raise InvariantViolation(f"non-Eulerian product {label} has mean {est.value:.4g}+{est.imag:.4g}i, "
                                         f"beyond 3 s.e. ({est.stderr:.3g}, {est.imag_stderr:.3g})")
        return result

    def describe_eulerian(self, edges: Sequence[Tuple[int, int]]) -> str:
        def body():
            r = self.eulerian(edges)
            kind = "Eulerian" if r["balanced"] else "non-Eulerian, vanishes within 3 s.e."
            return markdown_table(("edges", "kind", "mean", "stderr", "imag", "samples"),
                                  [(r["edges"], kind, r["value"], r["stderr"], r["imag"], r["samples"])])

        return self._describe("Eulerian product test", body)

    def self_averaging(self, sizes: Sequence[int], h: GridFunction) -> List[Dict[str, Any]]:
        """Spread of (1/N) tr log(I + G(e^H - I)) across stationary samples for each size."""
        self._require_open()
        samples = {N: self.sample(replace(self.chain, N=N)) for N in sizes}
        rows = self_averaging_test(samples, h, sizes)
        out = [{"N": r.N, "mean": r.mean, "std": r.std, "samples": r.samples, "rejected": r.rejected} for r in rows]
        self.record(write_csv(self.path("self_averaging.csv"), ("N", "mean", "std", "samples", "rejected"),
                              [(r.N, r.mean, r.std, r.samples, r.rejected) for r in rows]))
        if h.sup() == 0 and any(r.mean != 0 or r.std != 0 for r in rows):
            raise InvariantViolation("h = 0 must give exactly zero for every sample")
        return out

    def describe_self_averaging(self, sizes: Sequence[int], h: GridFunction) -> str:
        def body():
            rows = self.self_averaging(sizes, h)
            table = markdown_table(("N", "mean", "std", "samples", "rejected"),
                                   [(r["N"], r["mean"], r["std"], r["samples"], r["rejected"]) for r in rows])
            ratios = [rows[k + 1]["std"] / rows[k]["std"] for k in range(len(rows) - 1) if rows[k]["std"] > 0]
            if ratios:
                table += "\n\nstd ratios: " + ", ".join(f"{r:.3f}" for r in ratios)
            return table

        return self._describe("self-averaging", body)


class HaarHandle(ExperimentHandle):
    """Haar orbits: free compression of principal corners, the rank-one HCIZ series and T_p traces."""

    experiment = "haar"

    def orbits(self, measure: SpectralMeasure, N: int, samples: int) -> np.ndarray:
        return orbit_ensemble(diagonal_for(measure, N), samples, self.rng("haar-orbit"))

    def compression(self, measure: SpectralMeasure, fraction: float, N: int, samples: int,
                    points: int = 1001, max_distance: Optional[float] = None) -> Dict[str, Any]:
        """Empirical corner spectrum of orbit samples against `free_compression_predict`."""
        lo, hi = measure.support
        pad = 0.1 * (hi - lo) + 0.05
        grid = StieltjesGrid.uniform(lo - pad, hi + pad, points=points)
        result = free_compression_predict(measure, fraction, grid)
        empirical = principal_submatrix_spectrum(self.orbits(measure, N, samples), fraction)
        eigs = empirical.points
        distance = kolmogorov_distance(empirical, result.measure)
        self.record(write_measure_csv(self.path("compression_predicted.csv"), result.measure))
        self.record(write_measure_csv(self.path("compression_empirical.csv"),
                                      SpectralMeasure.from_samples(eigs, bins=result.measure.points)))
        self.record(write_json(self.path("compression.json"), {
            "fraction": fraction, "N": N, "samples": samples, "kolmogorov_distance": distance,
            "diagnostics": result.diagnostics,
        }))
        self.record(histogram_svg(self.path("compression.svg"), eigs.ravel(), bins=60, range_=(lo - pad, hi + pad),
                                  title=f"corner fraction {fraction:g}", xlabel="eigenvalue",
                                  reference=(grid.energies, result.density)))
        if max_distance is not None and distance >= max_distance:
            raise InvariantViolation(f"Kolmogorov distance {distance:.4f} is not below {max_distance}")
        return {"kolmogorov_distance": distance, "diagnostics": result.diagnostics}

    def hciz(self, measure: SpectralMeasure, a: float, zs: Sequence[float], N: int, samples: int) -> List[Dict]:
        checks = [hciz_series_check(measure, a, z, N=N, samples=samples, rng=self.rng(f"hciz:{z!r}")) for z in zs]
        self.record(write_json(self.path("hciz.json"), {"a": a, "checks": [c.to_dict() for c in checks]}))
        bad = [c for c in checks if not c.agrees]
        if bad:
            raise InvariantViolation("; ".join(f"z={c.z}: |{c.monte_carlo:.6g} - {c.series:.6g}| > {c.budget:.3g}"
                                               for c in bad))
        return [c.to_dict() for c in checks]

    def describe_haar(self, measure: SpectralMeasure, fraction: float, N: int, samples: int,
                      zs: Sequence[float] = (), a: float = 1.0, max_distance: Optional[float] = None) -> str:
        def body():
            out = self.compression(measure, fraction, N, samples, max_distance=max_distance)
            diag = out["diagnostics"]
            text = (f"corner fraction {fraction:g}, N={N}, {samples} orbit samples\n\n"
                    + markdown_table(("kolmogorov distance", "max residual", "raw mass"),
                                     [(out["kolmogorov_distance"], diag.get("max_residual"), diag.get("raw_mass"))]))
            if zs:
                rows = self.hciz(measure, a, zs, N, samples)
                text += "\n\n" + markdown_table(("z", "monte carlo", "stderr", "series", "budget", "agrees"),
                                                [(r["z"], r["monte_carlo"], r["stderr"], r["series"], r["budget"],
                                                  r["agrees"]) for r in rows])
            return text

        return self._describe("Haar orbit", body)

    def traces(self, test_functions: Sequence[GridFunction], N: int, samples: int, source: str = "haar",
               measure: Optional[SpectralMeasure] = None) -> Dict[str, Any]:
        """N^{-1} E[tr(M D_1 ... M D_p)] on Haar orbits or stationary QSSEP against the T_p prediction."""
        if source == "haar":
            measure = measure or SpectralMeasure.bernoulli(0.5)
            stack = self.orbits(measure, N, samples)
            model = haar_model(measure)
        elif source == "qssep":
            chain = replace(self.chain, N=N)
            if chain.topology != "open":
                raise InvalidArgumentError("qssep traces need an open chain")
            stack = ChainHandle(replace(self.config, chain=chain, ensemble_size=samples)).sample().samples
            model = IndicatorCumulants(chain.n_a, chain.n_b)
        else:
            raise InvalidArgumentError(f"unknown trace source {source!r}")
        check = structured_trace_check(stack, test_functions, model=model)
        result = {"p": len(test_functions), "N": N, "source": source, "empirical": check.empirical.to_dict(),
                  "prediction": check.prediction, "bias": check.bias, "tolerance": check.tolerance,
                  "agrees": check.agrees}
        self.record(write_json(self.path("traces.json"), result))
        if not check.agrees:
            raise InvariantViolation(f"trace {check.empirical.value:.6g} differs from {check.prediction:.6g} "
                                     f"by {check.bias:.3g}, more than 3 s.e. = {check.tolerance:.3g}")
        return result

    def describe_traces(self, test_functions: Sequence[GridFunction], N: int, samples: int, source: str = "haar",
                        measure: Optional[SpectralMeasure] = None) -> str:
        def body():
            r = self.traces(test_functions, N, samples, source, measure)
            return markdown_table(("p", "source", "empirical", "stderr", "prediction", "bias", "3 s.e."),
                                  [(r["p"], r["source"], r["empirical"]["value"], r["empirical"]["stderr"],
                                    r["prediction"], r["bias"], r["tolerance"])])

        return self._describe("structured traces", body)


class VariationalHandle(ExperimentHandle):
    """Saddle-point equations of the resolvent functional and the SSEP large-deviation functional."""

    experiment = "variational"

    def saddle(self, h: GridFunction, z: float, P: int, measure: Optional[SpectralMeasure] = None) -> Dict[str, Any]:
        model = haar_model(measure, P) if measure is not None else None
        solution = solve_saddle(h, z, model=model, P=P)
        stieltjes = saddle_stieltjes(solution, h)
        self.record(*write_solver_outputs(self.output_dir, "saddle", solution, {
            "h": h.values, "z": z, "P": P, "measure": None if measure is None else measure.kind,
            "stieltjes": stieltjes,
        }))
        return {**solution.report(), "stieltjes": stieltjes}

    def describe_saddle(self, h: GridFunction, z: float, P: int, measure: Optional[SpectralMeasure] = None) -> str:
        def body():
            r = self.saddle(h, z, P, measure)
            return markdown_table(("z", "value", "G(z)", "residual", "iterations"),
                                  [(r["z"], r["value"], r["stieltjes"], r["residual"], r["iterations"])])

        return self._describe("saddle equations", body)

    def fssep(self, h: GridFunction, P: int, oracle_sizes: Sequence[int] = (),
              max_rel_error: float = 0.05) -> Dict[str, Any]:
        """F_ssep(h), optionally compared with the 1/N-extrapolated exact SSEP generating function."""
        solution = f_ssep(h, P=P)
        inputs: Dict[str, Any] = {"h": h.values, "P": P}
        report = dict(solution.report())
        if oracle_sizes:
            fit = extrapolate_cgf(h, sizes=oracle_sizes)
            rel = abs(solution.value - fit.limit) / max(abs(fit.limit), 1e-12)
            inputs["oracle"] = {**fit.to_dict(), "relative_error": rel}
            report["oracle"] = inputs["oracle"]
        self.record(*write_solver_outputs(self.output_dir, "fssep", solution, inputs))
        if oracle_sizes and report["oracle"]["relative_error"] > max_rel_error:
            raise InvariantViolation(f"F_ssep {solution.value:.6g} differs from the extrapolated SSEP value "
                                     f"{report['oracle']['limit']:.6g} by more than {max_rel_error:.0%}")
        return report

    def describe_fssep(self, h: GridFunction, P: int, oracle_sizes: Sequence[int] = ()) -> str:
        def body():
            r = self.fssep(h, P, oracle_sizes)
            rows = [("F_ssep", r["value"]), ("residual", r["residual"]), ("iterations", r["iterations"]),
                    ("continuation stages", len(r["continuation"]))]
            if "oracle" in r:
                rows += [("extrapolated SSEP", r["oracle"]["limit"]), ("relative error", r["oracle"]["relative_error"])]
            return markdown_table(("quantity", "value"), rows)

        return self._describe("F_ssep", body)


class SsepHandle(ExperimentHandle):
    """Classical SSEP runs: exact stationary state for small chains, Gillespie trajectories for long ones."""

    experiment = "ssep"

    def rates(self) -> BoundaryRates:
        return BoundaryRates.from_chain(self.chain)

    def exact(self, h: Optional[GridFunction] = None) -> Dict[str, Any]:
        N = self.chain.N
        gen = build_generator(N, *self.rates().as_tuple(), periodic=self.chain.topology == "periodic")
        mean = profile(gen)
        self.record(write_csv(self.path("ssep_exact_profile.csv"), ("i", "x", "density"),
                              zip(range(1, N + 1), np.arange(1, N + 1) / N, mean)))
        out: Dict[str, Any] = {"N": N, "profile": mean}
        if h is not None:
            out["cgf"] = cgf_exact(gen, h)
        self.record(write_json(self.path("ssep_exact.json"), out))
        return out

    def gillespie(self, T: float, sample_interval: float = 1.0, burn_in: float = 0.0) -> Dict[str, Any]:
        N = self.chain.N
        traj = gillespie_run(N, self.rates(), T, rng=self.rng("gillespie"), sample_interval=sample_interval)
        self.record(write_trajectory_csv(self.path("ssep_trajectory.csv"), traj))
        mean, stderr = empirical_profile(traj, burn_in=burn_in)
        x = np.arange(1, N + 1) / N
        self.record(write_csv(self.path("ssep_profile.csv"), ("i", "x", "mean", "stderr"),
                              zip(range(1, N + 1), x, mean, stderr)))
        self.record(curves_svg(self.path("ssep_profile.svg"), x, [("gillespie", mean)],
                               title=f"SSEP density, N={N}", xlabel="i/N", ylabel="density"))
        return {"N": N, "T": T, "events": len(traj.events), "mean": mean, "stderr": stderr}

    def describe_ssep(self, T: float, h: Optional[GridFunction] = None, sample_interval: float = 1.0,
                      burn_in: float = 0.0, exact: bool = True) -> str:
        def body():
            parts = []
            if exact:
                r = self.exact(h)
                line = f"exact stationary state, N={r['N']}"
                if "cgf" in r:
                    line += f", log E[exp(sum h_i n_i)] = {r['cgf']:.10g}"
                parts.append(line)
            if T > 0:
                g = self.gillespie(T, sample_interval, burn_in)
                rows = [(i + 1, g["mean"][i], g["stderr"][i]) for i in range(min(g["N"], 20))]
                parts.append(f"gillespie T={T}: {g['events']} site changes\n\n"
                             + markdown_table(("i", "density", "stderr"), rows))
            return "\n\n".join(parts) or "nothing to run"

        return self._describe("classical SSEP", body)
