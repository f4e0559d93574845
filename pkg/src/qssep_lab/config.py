"""
Run configuration.

ChainConfig describes one QSSEP / SSEP chain, ExperimentConfig wraps it with
the ensemble and output settings of a CLI run. Both load from plain JSON
documents; validation errors carry the dotted path of the offending field.
Process-wide defaults come from environment variables:

- QSSEP_HOME: root of the `.logs` directory (falls back to the home directory)
- QSSEP_OUTPUT: default output directory
- QSSEP_WORKERS: default worker count for ensemble runs
- LOG_LEVEL: logging level
"""

import json
import math
import os
from dataclasses import dataclass, field, fields, asdict, replace
from typing import Any, Dict, List, Optional, Tuple

from .errors import ConfigError
from fastmcp.utilities.logging import get_logger

logger = get_logger(__name__)

TOPOLOGIES = ("periodic", "closed", "open")

# estimators the simulate run evaluates on its own ensemble
ESTIMATORS = ("profile", "loop", "eulerian")


@dataclass(frozen=True)
class ChainConfig:
    """
    Chain geometry, boundary rates and time step.

    Args:
        N: number of sites
        topology: periodic, closed or open
        alpha1, beta1: injection / extraction rates at site 1 (open only)
        alphaN, betaN: injection / extraction rates at site N (open only)
        dt: time step of the stochastic integrator
        seed: master seed
    """

    N: int = 2
    topology: str = "closed"
    alpha1: float = 0.0
    beta1: float = 0.0
    alphaN: float = 0.0
    betaN: float = 0.0
    dt: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.N, int) or self.N < 2:
            raise ConfigError("chain.N", f"must be an integer >= 2, got {self.N!r}")
        if self.topology not in TOPOLOGIES:
            raise ConfigError("chain.topology", f"must be one of {', '.join(TOPOLOGIES)}, got {self.topology!r}")
        for name in ("alpha1", "beta1", "alphaN", "betaN"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"chain.{name}", f"rate must be finite and >= 0, got {value!r}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("chain.dt", f"must be > 0, got {self.dt!r}")
        if self.topology == "open" and not any(self.rates):
            raise ConfigError("chain", "open topology needs at least one positive boundary rate")
        if self.topology != "open" and any(self.rates):
            raise ConfigError("chain.topology", "boundary rates are only allowed for the open topology")

    @property
    def rates(self) -> Tuple[float, float, float, float]:
        return (self.alpha1, self.beta1, self.alphaN, self.betaN)

    @property
    def edge_count(self) -> int:
        return self.N if self.topology == "periodic" else self.N - 1

    @property
    def n_a(self) -> float:
        total = self.alpha1 + self.beta1
        return self.alpha1 / total if total > 0 else math.nan

    @property
    def n_b(self) -> float:
        total = self.alphaN + self.betaN
        return self.alphaN / total if total > 0 else math.nan

    @classmethod
    def open_chain(cls, N: int, n_a: float = 0.0, n_b: float = 1.0, dt: float = 1e-2, seed: int = 0) -> "ChainConfig":
        """Open chain with unit total rate at each end and the given reservoir densities."""
        return cls(N=N, topology="open", alpha1=n_a, beta1=1.0 - n_a, alphaN=n_b, betaN=1.0 - n_b, dt=dt, seed=seed)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], path: str = "chain") -> "ChainConfig":
        return _build(cls, data, path)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    One CLI run: the experiment name, its chain, ensemble size, estimators and output.

    `params` holds subcommand specific options (site tuples, h profiles, ...)
    and is passed through untouched.
    """

    name: str
    chain: ChainConfig = field(default_factory=ChainConfig)
    ensemble_size: int = 1000
    estimators: List[str] = field(default_factory=list)
    output_dir: str = field(default_factory=lambda: os.getenv("QSSEP_OUTPUT", "qssep-out"))
    seed: int = 0
    workers: int = field(default_factory=lambda: default_workers())
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.name:
            raise ConfigError("name", "experiment name is required")
        if not isinstance(self.ensemble_size, int) or self.ensemble_size < 1:
            raise ConfigError("ensemble_size", f"must be a positive integer, got {self.ensemble_size!r}")
        for k, name in enumerate(self.estimators):
            if name not in ESTIMATORS:
                raise ConfigError(f"estimators[{k}]", f"unknown estimator {name!r}")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers", f"must be a positive integer, got {self.workers!r}")
        parent = os.path.dirname(os.path.abspath(self.output_dir)) or "."
        if os.path.exists(self.output_dir) and not os.access(self.output_dir, os.W_OK):
            raise ConfigError("output_dir", f"{self.output_dir} is not writable")
        if not os.path.exists(self.output_dir) and os.path.isdir(parent) and not os.access(parent, os.W_OK):
            raise ConfigError("output_dir", f"cannot create {self.output_dir}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("$", "config document must be a JSON object")
        data = dict(data)
        chain = data.pop("chain", {}) or {}
        if not isinstance(chain, dict):
            raise ConfigError("chain", "must be an object")
        # the master seed also seeds the chain unless the chain sets its own
        chain.setdefault("seed", data.get("seed", 0))
        data["chain"] = ChainConfig.from_dict(chain)
        return _build(cls, data, "")

    def with_overrides(self, **changes: Any) -> "ExperimentConfig":
        """Return a copy with the non-None overrides applied (CLI flags win over the file)."""
        chain_changes = {k[len("chain_"):]: v for k, v in changes.items() if k.startswith("chain_") and v is not None}
        top = {k: v for k, v in changes.items() if not k.startswith("chain_") and v is not None}
        params = top.pop("params", None)
        chain = self.chain
        if "seed" in top and "seed" not in chain_changes:
            chain_changes["seed"] = top["seed"]
        if chain_changes:
            chain = _build(ChainConfig, {**chain.to_dict(), **chain_changes}, "chain")
        merged = dict(self.params)
        merged.update({k: v for k, v in (params or {}).items() if v is not None})
        return replace(self, chain=chain, params=merged, **top)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _build(cls, data: Dict[str, Any], path: str):
    known = {f.name: f for f in fields(cls)}
    prefix = f"{path}." if path else ""
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown field")
    kwargs = {}
    for key, value in data.items():
        expected = known[key].type
        if expected in ("int", int) and isinstance(value, bool):
            raise ConfigError(f"{prefix}{key}", "expected an integer")
        if expected in ("int", int) and not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            else:
                raise ConfigError(f"{prefix}{key}", f"expected an integer, got {value!r}")
        if expected in ("float", float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{prefix}{key}", f"expected a number, got {value!r}")
            value = float(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str) -> ExperimentConfig:
    """Load an ExperimentConfig from a JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError("$", f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise ConfigError("$", f"invalid JSON at line {e.lineno}: {e.msg}")
    config = ExperimentConfig.from_dict(data)
    logger.info(f"loaded config {path}: experiment={config.name} N={config.chain.N} topology={config.chain.topology}")
    return config


def default_workers() -> int:
    try:
        return max(1, int(os.getenv("QSSEP_WORKERS", "1")))
    except ValueError:
        return 1


def log_home() -> str:
    """Directory holding the `.logs` folder."""
    if home := os.environ.get("QSSEP_HOME"):
        return home
    return os.path.expanduser("~")
