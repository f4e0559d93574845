#!/usr/bin/env python3
"""
qssep command line.

One subcommand per experiment. Each prints a Markdown report to stdout
(`# ok: ...` or `# error: ...`), writes its CSV/JSON/SVG artifacts and a
`manifest.json` under the output directory, and exits with 0 on success,
1 when a check or a numerical method failed and 2 on usage or configuration
errors.
"""

import argparse
import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import Dict, List, Optional

from .config import ChainConfig, ExperimentConfig, load_config, log_home
from .ensemble import LoopSpec, parse_edges
from .errors import ConfigError, InvalidArgumentError, SizeLimitError
from .grid import GridFunction
from .haar import SpectralMeasure
from .lab import USAGE_PREFIX, ChainHandle, HaarHandle, OracleHandle, SsepHandle, VariationalHandle
from fastmcp.utilities.logging import get_logger

logger = get_logger(__name__)

DEFAULT_CHAINS: Dict[str, ChainConfig] = {
    "oracle": ChainConfig(N=3, topology="open", alpha1=0.7, beta1=0.3, alphaN=0.2, betaN=0.9),
    "stationary-test": ChainConfig(N=2, topology="closed"),
    "ssep": ChainConfig.open_chain(10),
}


def setup_file_logging() -> None:
    """Configure rotating file logging for the application."""
    log_dir = os.path.join(log_home(), ".logs")
    try:
        os.makedirs(log_dir, exist_ok=True)
    except Exception:
        pass
    log_file = os.path.join(log_dir, "qssep.log")

    root_logger = logging.getLogger()
    level_name = os.environ.get("LOG_LEVEL", "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)
    root_logger.setLevel(level)

    # Avoid adding duplicate handlers for the same file
    for h in root_logger.handlers:
        if isinstance(h, RotatingFileHandler) and os.path.abspath(getattr(h, "baseFilename", "")) == os.path.abspath(log_file):
            return
    try:
        fh = RotatingFileHandler(log_file, maxBytes=5 * 1024 * 1024, backupCount=3, encoding="utf-8")
    except OSError as e:
        logger.warning(f"file logging disabled: {e}")
        return
    fh.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s"))
    fh.setLevel(level)
    root_logger.addHandler(fh)


def _csv_ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment JSON file; flags override its values")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--output", help="output directory (default $QSSEP_OUTPUT or ./qssep-out)")
    parser.add_argument("--workers", type=int, help="worker processes for ensemble runs")
    chain = parser.add_argument_group("chain")
    chain.add_argument("--n", type=int, help="number of sites")
    chain.add_argument("--topology", choices=("periodic", "closed", "open"))
    chain.add_argument("--dt", type=float, help="integrator time step")
    chain.add_argument("--alpha1", type=float)
    chain.add_argument("--beta1", type=float)
    chain.add_argument("--alphaN", type=float)
    chain.add_argument("--betaN", type=float)
    chain.add_argument("--n-a", type=float, help="left reservoir density (unit total rate)")
    chain.add_argument("--n-b", type=float, help="right reservoir density (unit total rate)")
    ens = parser.add_argument_group("ensemble")
    ens.add_argument("--trajectories", type=int, help="number of trajectories (ensemble size)")
    ens.add_argument("--snapshots", type=int, help="stationary snapshots per trajectory")
    ens.add_argument("--burn-in", type=float, help="discarded initial time (default 4 N^2)")
    ens.add_argument("--interval", type=float, help="time between snapshots (default N^2/4)")
    ens.add_argument("--scheme", choices=("exact", "bond"), help="unitary step scheme")
    ens.add_argument("--blocks", type=int, help="jackknife blocks (default leave-one-out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qssep", description="QSSEP numerical laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle", help="Fock-space checks on N <= 4 sites")
    _common(p)
    p.add_argument("--t", type=float, default=1.0, help="evolution time")
    p.add_argument("--paths", type=int, default=2000, help="noise paths for the averaged generating function")

    p = sub.add_parser("simulate", help="stationary G-matrix snapshots and the mean profile")
    _common(p)

    p = sub.add_parser("stationary-test", help="KS distance of G(1,1)-G(2,2) to Uniform[-1,1] (N=2 closed)")
    _common(p)
    p.add_argument("--t", type=float, action="append", help="time horizon, repeatable (default 10)")
    p.add_argument("--max-ks", type=float, help="fail when the last KS distance is not below this")

    p = sub.add_parser("loop-cumulants", help="scaled loop cumulants against g_p")
    _common(p)
    p.add_argument("--p", type=int, help="loop order; must match every --sites list")
    p.add_argument("--sites", action="append", required=True, help="comma separated sites, repeatable")
    p.add_argument("--strict", action="store_true", help="fail when an estimate misses its prediction")

    p = sub.add_parser("eulerian-test", help="mean of an edge product; non-Eulerian products must vanish")
    _common(p)
    p.add_argument("--edges", required=True, help="edge list such as 1-2,2-3")

    p = sub.add_parser("self-averaging", help="spread of (1/N) tr log(I + G(e^H - I)) across sizes")
    _common(p)
    p.add_argument("--sizes", type=_csv_ints, default=[20, 40])
    p.add_argument("--h", default="const:0.5", help="profile spec for h")
    p.add_argument("--grid", type=int, default=200)

    p = sub.add_parser("haar", help="Haar orbit: corner spectrum vs free compression, HCIZ series")
    _common(p)
    p.add_argument("--measure", default="bernoulli:0.5", help="spectrum of D")
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--points", type=int, default=1001, help="energy grid points")
    p.add_argument("--z", type=float, action="append", help="HCIZ check at this z, repeatable")
    p.add_argument("--a", type=float, default=1.0, help="eigenvalue of the rank-one HCIZ matrix")
    p.add_argument("--max-distance", type=float, help="fail when the Kolmogorov distance is not below this")

    p = sub.add_parser("traces", help="N^-1 E tr(M D_1 ... M D_p) against the T_p prediction")
    _common(p)
    p.add_argument("--psi", action="append", required=True, help="test function spec, one per factor")
    p.add_argument("--source", choices=("haar", "qssep"), default="haar")
    p.add_argument("--measure", default="bernoulli:0.5")
    p.add_argument("--samples", type=int, default=2000)

    p = sub.add_parser("saddle", help="saddle-point equations of F(h; z)")
    _common(p)
    p.add_argument("--h", default="const:1")
    p.add_argument("--z", type=float, default=4.0)
    p.add_argument("--order", type=int, default=8, help="truncation order P")
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--measure", help="use constant Haar-orbit cumulants of this spectrum")

    p = sub.add_parser("fssep", help="SSEP large-deviation functional F_ssep(h)")
    _common(p)
    p.add_argument("--h", default="const:1")
    p.add_argument("--order", type=int, default=8, help="truncation order P")
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--oracle-sizes", type=_csv_ints, default=[], help="compare with exact SSEP at these N, e.g. 8,10,12")

    p = sub.add_parser("ssep", help="classical SSEP: exact stationary state and Gillespie runs")
    _common(p)
    p.add_argument("--t", type=float, default=0.0, help="Gillespie horizon (0 skips the run)")
    p.add_argument("--h", help="profile spec for the exact generating function")
    p.add_argument("--sample-interval", type=float, default=1.0)
    p.add_argument("--no-exact", action="store_true", help="skip the master-equation solve")
    return parser


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or the subcommand defaults) with the command line flags applied on top."""
    if args.config:
        config = load_config(args.config)
    else:
        chain = DEFAULT_CHAINS.get(args.command, ChainConfig.open_chain(20))
        config = ExperimentConfig(name=args.command, chain=chain)
    changes = {
        "seed": args.seed, "output_dir": args.output, "workers": args.workers, "ensemble_size": args.trajectories,
        "chain_N": args.n, "chain_topology": args.topology, "chain_dt": args.dt,
        "chain_alpha1": args.alpha1, "chain_beta1": args.beta1, "chain_alphaN": args.alphaN, "chain_betaN": args.betaN,
        "params": {"snapshots": args.snapshots, "burn_in": args.burn_in, "interval": args.interval,
                   "scheme": args.scheme, "blocks": args.blocks},
    }
    if args.n_a is not None:
        changes.update(chain_alpha1=args.n_a, chain_beta1=1.0 - args.n_a)
    if args.n_b is not None:
        changes.update(chain_alphaN=args.n_b, chain_betaN=1.0 - args.n_b)
    return config.with_overrides(**changes)


def _loops(args: argparse.Namespace) -> List[LoopSpec]:
    loops = [LoopSpec.parse(text) for text in args.sites]
    if args.p is not None:
        for loop in loops:
            if loop.p != args.p:
                raise InvalidArgumentError(f"--p {args.p} does not match the {loop.p} sites of {loop}")
    return loops


def dispatch(args: argparse.Namespace, config: ExperimentConfig) -> str:
    cmd = args.command
    if cmd == "oracle":
        return OracleHandle(config).describe_checks(N=config.chain.N, T=args.t, paths=args.paths)
    if cmd == "simulate":
        return ChainHandle(config).describe_simulate()
    if cmd == "stationary-test":
        return ChainHandle(config).describe_stationary_test(args.t or [10.0], args.max_ks)
    if cmd == "loop-cumulants":
        return ChainHandle(config).describe_loop_cumulants(_loops(args), args.strict)
    if cmd == "eulerian-test":
        return ChainHandle(config).describe_eulerian(parse_edges(args.edges))
    if cmd == "self-averaging":
        return ChainHandle(config).describe_self_averaging(args.sizes, GridFunction.parse(args.h, args.grid))
    if cmd == "haar":
        return HaarHandle(config).describe_haar(SpectralMeasure.parse(args.measure), args.fraction,
                                                 config.chain.N, args.samples, zs=args.z or (), a=args.a,
                                                 max_distance=args.max_distance)
    if cmd == "traces":
        psis = [GridFunction.parse(text) for text in args.psi]
        return HaarHandle(config).describe_traces(psis, config.chain.N, args.samples, args.source,
                                                  SpectralMeasure.parse(args.measure))
    if cmd == "saddle":
        measure = SpectralMeasure.parse(args.measure) if args.measure else None
        return VariationalHandle(config).describe_saddle(GridFunction.parse(args.h, args.grid), args.z, args.order,
                                                         measure)
    if cmd == "fssep":
        return VariationalHandle(config).describe_fssep(GridFunction.parse(args.h, args.grid), args.order,
                                                        args.oracle_sizes)
    if cmd == "ssep":
        h = GridFunction.parse(args.h) if args.h else None
        return SsepHandle(config).describe_ssep(args.t, h, args.sample_interval, burn_in=args.burn_in or 0.0,
                                                exact=not args.no_exact)
    raise InvalidArgumentError(f"unknown command {cmd!r}")


def exit_code(report: str) -> int:
    if report.startswith("# ok"):
        return 0
    if report.startswith(USAGE_PREFIX):
        return 2
    return 1


def run(argv: Optional[List[str]] = None) -> int:
    """Parse, run one subcommand, print its report and return the exit status."""
    args = build_parser().parse_args(argv)
    setup_file_logging()
    try:
        config = build_config(args)
        logger.info(f"qssep {args.command}: seed={config.seed} output={config.output_dir}")
        report = dispatch(args, config)
    except (ConfigError, InvalidArgumentError, SizeLimitError) as e:
        logger.error(f"{args.command}: {e}")
        report = f"{USAGE_PREFIX}: {args.command}\n{type(e).__name__}: {e}"
    print(report)
    code = exit_code(report)
    logger.info(f"qssep {args.command} finished with exit status {code}")
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    # Allow direct execution via python -m or script run
    main()
