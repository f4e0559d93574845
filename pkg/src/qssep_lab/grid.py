"""
Piecewise-constant functions on the uniform midpoint grid of [0, 1].
"""

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import InvalidArgumentError

MIN_GRID = 50


@dataclass(frozen=True, eq=False)
class GridFunction:
    """
    Real function sampled at x_m = (m - 1/2)/M, m = 1..M.

    The function is constant on each cell [(m-1)/M, m/M); `at` evaluates
    it anywhere in [0, 1] with that convention.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise InvalidArgumentError("grid values must be one-dimensional")
        if values.size < MIN_GRID:
            raise InvalidArgumentError(f"grid needs at least {MIN_GRID} points, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("grid values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def M(self) -> int:
        return self.values.size

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.M) + 0.5) / self.M

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.M + 1)

    def at(self, x: Union[float, np.ndarray]) -> np.ndarray:
        idx = np.clip(np.floor(np.asarray(x, dtype=float) * self.M).astype(int), 0, self.M - 1)
        return self.values[idx]

    def integral(self) -> float:
        return float(self.values.mean())

    def sup(self) -> float:
        return float(np.abs(self.values).max())

    def __add__(self, other: "GridFunction") -> "GridFunction":
        return GridFunction(self.values + other.values)

    def __mul__(self, s: float) -> "GridFunction":
        return GridFunction(self.values * s)

    __rmul__ = __mul__

    @classmethod
    def from_callable(cls, f: Callable[[np.ndarray], np.ndarray], M: int = 200) -> "GridFunction":
        x = (np.arange(M) + 0.5) / M
        return cls(np.broadcast_to(np.asarray(f(x), dtype=float), (M,)).copy())

    @classmethod
    def constant(cls, c: float, M: int = 200) -> "GridFunction":
        return cls(np.full(M, float(c)))

    @classmethod
    def parse(cls, text: str, M: int = 200) -> "GridFunction":
        """
        Build a profile from a short CLI spec.

        Accepted forms: `const:c`, `linear:a,b` (a + b x), `sin:amp[,k]`
        (amp sin(k pi x), k defaults to 1), `poly:c0,c1,...` (sum c_k x^k),
        `step:lo,hi,x0`.
        """
        kind, _, arg = text.partition(":")
        try:
            nums = [float(v) for v in arg.split(",")] if arg else []
        except ValueError:
            raise InvalidArgumentError(f"cannot parse profile {text!r}")
        if kind == "const" and len(nums) == 1:
            return cls.constant(nums[0], M)
        if kind == "linear" and len(nums) == 2:
            a, b = nums
            return cls.from_callable(lambda x: a + b * x, M)
        if kind == "sin" and len(nums) in (1, 2):
            amp = nums[0]
            k = nums[1] if len(nums) == 2 else 1.0
            return cls.from_callable(lambda x: amp * np.sin(k * math.pi * x), M)
        if kind == "poly" and nums:
            coeffs = nums[::-1]
            return cls.from_callable(lambda x: np.polyval(coeffs, x), M)
        if kind == "step" and len(nums) == 3:
            lo, hi, x0 = nums
            return cls.from_callable(lambda x: np.where(x < x0, lo, hi), M)
        raise InvalidArgumentError(f"unknown profile spec {text!r}")


def as_site_values(f: Union[GridFunction, Callable, float], N: int) -> np.ndarray:
    """Evaluate a profile at the lattice points x_i = i/N, i = 1..N."""
    x = np.arange(1, N + 1) / N
    if isinstance(f, GridFunction):
        return f.at(x)
    if callable(f):
        return np.broadcast_to(np.asarray(f(x), dtype=float), (N,)).copy()
    return np.full(N, float(f))
