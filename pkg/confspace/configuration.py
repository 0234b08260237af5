"""
Finite point configurations on the torus and the elementary pairings and counts.
"""

from typing import Callable, Iterator, List, Optional, Union

import numpy as np

from confspace.domain import Point, TorusDomain, Window

# A scalar field maps an (n, d) array of points to n values.
ScalarField = Callable[[np.ndarray], np.ndarray]


class Configuration:
    """
    An immutable finite multiset of points in a torus domain.

    Points are stored as an (n, d) float array. Order is an artifact of
    storage; equality is exact multiset equality.
    """

    __slots__ = ("_points", "dom")

    def __init__(self, points: Union[np.ndarray, List[Point]], dom: TorusDomain, check: bool = True):
        arr = np.array(points, dtype=float)
        if arr.size == 0:
            arr = arr.reshape(0, dom.d)
        elif arr.ndim == 1 and arr.size == dom.d:
            arr = arr.reshape(1, dom.d)
        if arr.ndim != 2 or arr.shape[1] != dom.d:
            raise ValueError(f"points must have shape (n, {dom.d}), got {arr.shape}")
        if check:
            if not np.all(np.isfinite(arr)):
                raise ValueError("configuration coordinates must be finite")
            if np.any(arr < 0.0) or np.any(arr >= dom.L):
                raise ValueError(f"configuration points must lie in [0, {dom.L})^{dom.d}")
        arr.setflags(write=False)
        self._points = arr
        self.dom = dom

    @classmethod
    def empty(cls, dom: TorusDomain) -> "Configuration":
        return cls(np.empty((0, dom.d)), dom, check=False)

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def n(self) -> int:
        return self._points.shape[0]

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self._points)

    def __repr__(self) -> str:
        return f"Configuration(n={self.n}, d={self.dom.d}, L={self.dom.L})"

    def _sorted(self) -> np.ndarray:
        if self.n == 0:
            return self._points
        order = np.lexsort(self._points.T[::-1])
        return self._points[order]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Configuration):
            return NotImplemented
        if self.dom != other.dom or self.n != other.n:
            return False
        return bool(np.array_equal(self._sorted(), other._sorted()))

    __hash__ = None  # type: ignore[assignment]

    def is_simple(self) -> bool:
        """
        True when no two points coincide.
        """
        if self.n < 2:
            return True
        return len(np.unique(self._points, axis=0)) == self.n

    def add_point(self, x: Point) -> "Configuration":
        x = np.asarray(x, dtype=float).reshape(1, self.dom.d)
        return Configuration(np.vstack([self._points, x]), self.dom)

    def remove_point(self, index: int) -> "Configuration":
        if not -self.n <= index < self.n:
            raise ValueError(f"point index {index} out of range for {self.n} points")
        return Configuration(np.delete(self._points, index, axis=0), self.dom, check=False)

    def union(self, other: "Configuration") -> "Configuration":
        if other.dom != self.dom:
            raise ValueError("cannot join configurations on different domains")
        return Configuration(np.vstack([self._points, other._points]), self.dom, check=False)

    def with_points(self, points: np.ndarray) -> "Configuration":
        """
        Same domain, new coordinates (already wrapped into the box).
        """
        return Configuration(points, self.dom)

    def to_snapshot(self) -> str:
        """
        Text snapshot: `d L n`, then one line of d coordinates per point.
        17 significant digits make the round trip bit-exact.
        """
        lines = [f"{self.dom.d} {self.dom.L:.17g} {self.n}"]
        lines.extend(" ".join(f"{c:.17g}" for c in row) for row in self._points)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_snapshot(cls, text: str) -> "Configuration":
        rows = [line for line in text.splitlines() if line.strip() and not line.startswith("#")]
        if not rows:
            raise ValueError("empty snapshot")
        configs = list(iter_snapshots(rows))
        if len(configs) != 1:
            raise ValueError(f"expected one snapshot, found {len(configs)}")
        return configs[0]


def iter_snapshots(rows: List[str]) -> Iterator[Configuration]:
    """
    Parse consecutive snapshot blocks from pre-filtered, non-comment lines.
    """
    i = 0
    while i < len(rows):
        header = rows[i].split()
        if len(header) != 3:
            raise ValueError(f"malformed snapshot header: {rows[i]!r}")
        d, L, n = int(header[0]), float(header[1]), int(header[2])
        dom = TorusDomain(d=d, L=L)
        block = rows[i + 1 : i + 1 + n]
        if len(block) != n:
            raise ValueError(f"snapshot declares {n} points but only {len(block)} follow")
        coords = [[float(c) for c in line.split()] for line in block]
        if any(len(c) != d for c in coords):
            raise ValueError(f"snapshot point with wrong number of coordinates (expected {d})")
        yield Configuration(np.array(coords).reshape(n, d), dom)
        i += 1 + n


def pair(f: ScalarField, gamma: Configuration) -> float:
    """
    <f, gamma> = sum of f over the points of gamma.
    """
    if gamma.n == 0:
        return 0.0
    values = np.asarray(f(gamma.points), dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("scalar field is not finite at every point of the configuration")
    return float(np.sum(values))


def count(window: Window, gamma: Configuration) -> int:
    """
    N_B(gamma): number of points inside the window.
    """
    if gamma.n == 0:
        return 0
    return int(np.count_nonzero(window.contains(gamma.points)))


def restrict(gamma: Configuration, window: Window) -> Configuration:
    if gamma.n == 0:
        return gamma
    return Configuration(gamma.points[window.contains(gamma.points)], gamma.dom, check=False)


def add_point(gamma: Configuration, x: Point) -> Configuration:
    return gamma.add_point(x)


def remove_point(gamma: Configuration, index: int) -> Configuration:
    return gamma.remove_point(index)


def concatenate(gamma: Configuration, other: Optional[Configuration]) -> Configuration:
    if other is None or other.n == 0:
        return gamma
    return gamma.union(other)
