"""
Flat periodic box geometry: minimal-image displacement, distance and windows.
"""

import math
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

ArrayLike = Union[float, np.ndarray, Tuple[float, ...]]

# A point is a length-d float array with every coordinate in [0, L).
Point = np.ndarray


class TorusDomain(BaseModel):
    """
    The box [0, L)^d with opposite faces identified.
    """

    model_config = ConfigDict(frozen=True)

    d: int = Field(ge=1)
    L: float = Field(gt=0, allow_inf_nan=False)

    @property
    def volume(self) -> float:
        return self.L**self.d

    @property
    def max_distance(self) -> float:
        return 0.5 * self.L * math.sqrt(self.d)


class Window(BaseModel):
    """
    Axis-aligned box [lower, upper) inside the torus.
    Membership is closed below and open above.
    """

    model_config = ConfigDict(frozen=True)

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    @model_validator(mode="after")
    def _check_bounds(self) -> "Window":
        if len(self.lower) != len(self.upper):
            raise ValueError("window bounds must have the same dimension")
        if not self.lower:
            raise ValueError("window must have dimension >= 1")
        for lo, hi in zip(self.lower, self.upper):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError("window bounds must be finite")
            if lo < 0 or lo >= hi:
                raise ValueError(f"invalid window interval [{lo}, {hi})")
        return self

    @classmethod
    def whole(cls, dom: TorusDomain) -> "Window":
        return cls(lower=(0.0,) * dom.d, upper=(dom.L,) * dom.d)

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    @property
    def lower_array(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def upper_array(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    def check(self, dom: TorusDomain) -> "Window":
        """
        Raise ValueError unless the window lies inside the box of `dom`.
        """
        if self.d != dom.d:
            raise ValueError(f"window dimension {self.d} does not match domain dimension {dom.d}")
        if any(hi > dom.L for hi in self.upper):
            raise ValueError(f"window upper bound {self.upper} exceeds box side {dom.L}")
        return self

    def is_whole(self, dom: TorusDomain) -> bool:
        return all(lo == 0.0 for lo in self.lower) and all(hi == dom.L for hi in self.upper)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """
        Boolean mask of the rows of `points` (shape (n, d)) inside the window.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, self.d)
        return np.all((pts >= self.lower_array) & (pts < self.upper_array), axis=1)

    def intersect(self, other: "Window") -> Optional["Window"]:
        lower = tuple(max(a, b) for a, b in zip(self.lower, other.lower))
        upper = tuple(min(a, b) for a, b in zip(self.upper, other.upper))
        if any(lo >= hi for lo, hi in zip(lower, upper)):
            return None
        return Window(lower=lower, upper=upper)

    def uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """
        n points drawn uniformly from the window.
        """
        lo = self.lower_array
        return lo + (self.upper_array - lo) * rng.random((n, self.d))


def wrap(raw: ArrayLike, dom: TorusDomain) -> np.ndarray:
    """
    Reduce coordinates modulo L into [0, L).
    """
    arr = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot wrap non-finite coordinates")
    out = np.mod(arr, dom.L)
    # np.mod of a tiny negative number rounds up to exactly L
    return np.where(out >= dom.L, 0.0, out)


def displacement(x: ArrayLike, y: ArrayLike, dom: TorusDomain) -> np.ndarray:
    """
    Shortest vector v with wrap(y + v) == x, each component in [-L/2, L/2).

    Broadcasts over leading axes, so (n, d) against (m, 1, d) gives (m, n, d).
    """
    L = dom.L
    v = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    v = v - L * np.floor(v / L + 0.5)
    # rounding can leave a component at exactly +L/2; ties go to -L/2
    return np.where(v >= 0.5 * L, v - L, v)


def distance(x: ArrayLike, y: ArrayLike, dom: TorusDomain) -> np.ndarray:
    """
    Torus (minimal-image Euclidean) distance, broadcasting like `displacement`.
    """
    return np.sqrt(np.sum(displacement(x, y, dom) ** 2, axis=-1))
