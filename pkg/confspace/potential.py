"""
Pair potentials, cell lists and the energies built from them.

Energies are sums of phi over unordered pairs at torus distance below the
interaction range. +inf is an ordinary value here: it marks hard-core overlap
and propagates through every sum.
"""

import hashlib
import itertools
import logging
import math
from pathlib import Path
from typing import Annotated, Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline

from confspace.configuration import Configuration, concatenate
from confspace.domain import Point, TorusDomain, Window, displacement, distance

LOG = logging.getLogger("confspace")

# Below this many points the all-pairs scan beats building a cell list.
_CELL_LIST_MIN_POINTS = 32


class HardCoreContactError(ValueError):
    """
    A gradient was requested where the potential is infinite or at r = 0.
    """


class PotentialBase(BaseModel):
    """
    Common interface of the radial pair potentials.

    `eval` maps distances to energies, `derivative` gives d(phi)/dr and
    `grad` the gradient with respect to the displacement vector.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    @property
    def cutoff(self) -> float:
        raise NotImplementedError

    @property
    def core(self) -> float:
        """
        Hard-core radius: phi is +inf for r < core.
        """
        return 0.0

    def eval(self, r: Union[float, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def derivative(self, r: Union[float, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def grad(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        r = np.sqrt(np.sum(v**2, axis=-1))
        if np.any(r == 0.0):
            raise HardCoreContactError("potential gradient requested at r = 0")
        if np.any(r < self.core):
            raise HardCoreContactError(
                f"potential gradient requested inside the hard core (r < {self.core})"
            )
        return (self.derivative(r) / r)[..., None] * v

    def fingerprint(self) -> str:
        """
        Short stable hash of the potential parameters, used in file manifests.
        """
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()[:16]


class ZeroPotential(PotentialBase):
    kind: Literal["zero"] = "zero"

    @property
    def cutoff(self) -> float:
        return 0.0

    def eval(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    def derivative(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))


class HardCorePotential(PotentialBase):
    kind: Literal["hard_core"] = "hard_core"
    R: float = Field(gt=0, allow_inf_nan=False)

    @property
    def cutoff(self) -> float:
        return self.R

    @property
    def core(self) -> float:
        return self.R

    def eval(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r < self.R, np.inf, 0.0)

    def derivative(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))


def _taper(r: np.ndarray, r_cut: float, width: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Quintic smoothstep cutoff chi and its derivative: chi = 1 up to
    r_cut - width, chi = 0 from r_cut on, value and two derivatives continuous.
    """
    chi = np.where(r < r_cut, 1.0, 0.0)
    dchi = np.zeros_like(r)
    if width > 0.0:
        t = np.clip((r - (r_cut - width)) / width, 0.0, 1.0)
        smooth = t**3 * (10.0 - 15.0 * t + 6.0 * t**2)
        inside = (r > r_cut - width) & (r < r_cut)
        chi = np.where(inside, 1.0 - smooth, chi)
        dchi = np.where(inside, -30.0 * t**2 * (1.0 - t) ** 2 / width, 0.0)
    return chi, dchi


class LennardJonesPotential(PotentialBase):
    """
    phi(r) = (a / r^12 - b / r^6) * chi(r), with chi the smooth taper.
    An infinite r_cut means the untapered, infinite-range potential.
    """

    kind: Literal["lennard_jones"] = "lennard_jones"
    a: float = Field(default=1.0, gt=0, allow_inf_nan=False)
    b: float = Field(default=1.0, gt=0, allow_inf_nan=False)
    r_cut: float = Field(default=math.inf, gt=0)
    taper_width: float = Field(default=0.0, ge=0, allow_inf_nan=False)

    @model_validator(mode="after")
    def _check_taper(self) -> "LennardJonesPotential":
        if math.isinf(self.r_cut) and self.taper_width > 0:
            raise ValueError("a taper needs a finite r_cut")
        if self.taper_width > self.r_cut:
            raise ValueError("taper_width cannot exceed r_cut")
        return self

    @property
    def cutoff(self) -> float:
        return self.r_cut

    def _raw(self, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            inv6 = 1.0 / r**6
            value = inv6 * (self.a * inv6 - self.b)
            slope = inv6 * (-12.0 * self.a * inv6 + 6.0 * self.b) / r
        value = np.where(r == 0.0, np.inf, value)
        return value, slope

    def eval(self, r):
        r = np.asarray(r, dtype=float)
        value, _ = self._raw(r)
        if math.isinf(self.r_cut):
            return value
        chi, _ = _taper(r, self.r_cut, self.taper_width)
        with np.errstate(invalid="ignore"):
            return np.where(chi == 0.0, 0.0, value * chi)

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        value, slope = self._raw(r)
        if math.isinf(self.r_cut):
            return slope
        chi, dchi = _taper(r, self.r_cut, self.taper_width)
        with np.errstate(invalid="ignore"):
            return np.where(chi == 0.0, 0.0, slope * chi + value * dchi)

    @property
    def minimum_radius(self) -> float:
        """
        Radius of the untapered minimum, (2a/b)^(1/6).
        """
        return (2.0 * self.a / self.b) ** (1.0 / 6.0)


class TabulatedPotential(PotentialBase):
    """
    Cubic Hermite interpolation of tabulated values and radial derivatives.

    Below the first node the potential is +inf (an implicit hard core of
    radius radii[0]); from min(r_cut, radii[-1]) on it is 0.
    """

    kind: Literal["tabulated"] = "tabulated"
    radii: Tuple[float, ...]
    values: Tuple[float, ...]
    derivatives: Tuple[float, ...]
    r_cut: float = Field(gt=0, allow_inf_nan=False)

    _spline: Optional[CubicHermiteSpline] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def _check_table(self) -> "TabulatedPotential":
        n = len(self.radii)
        if n < 2 or len(self.values) != n or len(self.derivatives) != n:
            raise ValueError("table needs at least two nodes and equal-length columns")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError("table radii must be strictly increasing")
        if self.radii[0] < 0:
            raise ValueError("table radii must be nonnegative")
        return self

    def model_post_init(self, __context) -> None:
        self._spline = CubicHermiteSpline(
            np.asarray(self.radii), np.asarray(self.values), np.asarray(self.derivatives)
        )

    @property
    def cutoff(self) -> float:
        return min(self.r_cut, self.radii[-1])

    @property
    def core(self) -> float:
        return self.radii[0]

    def eval(self, r):
        r = np.asarray(r, dtype=float)
        inside = (r >= self.radii[0]) & (r < self.cutoff)
        value = np.where(inside, self._spline(np.clip(r, self.radii[0], self.radii[-1])), 0.0)
        return np.where(r < self.radii[0], np.inf, value)

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        inside = (r >= self.radii[0]) & (r < self.cutoff)
        slope = self._spline.derivative()(np.clip(r, self.radii[0], self.radii[-1]))
        return np.where(inside, slope, 0.0)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "TabulatedPotential":
        """
        Read a table: header `n r_cut`, then n lines `r value derivative`.
        """
        rows = [
            line.split()
            for line in Path(path).read_text().splitlines()
            if line.strip() and not line.lstrip().startswith("#")
        ]
        if not rows or len(rows[0]) != 2:
            raise ValueError(f"{path}: first line must be `n r_cut`")
        n, r_cut = int(rows[0][0]), float(rows[0][1])
        body = rows[1:]
        if len(body) != n or any(len(row) != 3 for row in body):
            raise ValueError(f"{path}: expected {n} lines of `r value derivative`")
        cols = np.array(body, dtype=float)
        return cls(
            radii=tuple(cols[:, 0]),
            values=tuple(cols[:, 1]),
            derivatives=tuple(cols[:, 2]),
            r_cut=r_cut,
        )


PairPotential = Annotated[
    Union[ZeroPotential, HardCorePotential, LennardJonesPotential, TabulatedPotential],
    Field(discriminator="kind"),
]


class CellList:
    """
    Spatial hash of the torus into cubic cells of side >= cutoff.

    Pairs closer than the cutoff are always found in the 3^d block of cells
    around either member. With fewer than three cells per axis the block
    would wrap onto itself, so `usable` is False and callers scan all pairs.
    """

    def __init__(self, points: np.ndarray, dom: TorusDomain, cutoff: float):
        self.points = np.asarray(points, dtype=float).reshape(-1, dom.d)
        self.dom = dom
        self.cutoff = cutoff
        self.n_side = int(dom.L // cutoff) if 0.0 < cutoff < math.inf else 0
        self.usable = self.n_side >= 3
        if not self.usable:
            return
        self.shape = (self.n_side,) * dom.d
        self.side = dom.L / self.n_side
        self.cell_index = self._cell_of(self.points)
        self.cell_ids = (
            np.ravel_multi_index(self.cell_index.T, self.shape)
            if len(self.points)
            else np.empty(0, dtype=int)
        )
        self._order = np.argsort(self.cell_ids, kind="stable")
        sorted_ids = self.cell_ids[self._order]
        all_cells = np.arange(self.n_side**dom.d)
        self._starts = np.searchsorted(sorted_ids, all_cells, side="left")
        self._ends = np.searchsorted(sorted_ids, all_cells, side="right")
        self._offsets = np.array(list(itertools.product((-1, 0, 1), repeat=dom.d)))

    def _cell_of(self, points: np.ndarray) -> np.ndarray:
        idx = np.floor(points / self.side).astype(int)
        return np.clip(idx, 0, self.n_side - 1)

    def members(self, cell: int) -> np.ndarray:
        return self._order[self._starts[cell] : self._ends[cell]]

    def neighbour_cells(self, cell_index: np.ndarray) -> np.ndarray:
        block = np.mod(cell_index + self._offsets, self.n_side)
        return np.ravel_multi_index(block.T, self.shape)

    def candidate_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Index arrays (i, j) covering every unordered pair of points in
        neighbouring cells exactly once.
        """
        first: List[np.ndarray] = []
        second: List[np.ndarray] = []
        for cell in np.unique(self.cell_ids):
            here = self.members(cell)
            index = np.array(np.unravel_index(cell, self.shape))
            for other in self.neighbour_cells(index):
                if other < cell:
                    continue
                there = self.members(other)
                if len(there) == 0:
                    continue
                if other == cell:
                    ii, jj = np.triu_indices(len(here), k=1)
                    first.append(here[ii])
                    second.append(here[jj])
                else:
                    first.append(np.repeat(here, len(there)))
                    second.append(np.tile(there, len(here)))
        if not first:
            return np.empty(0, dtype=int), np.empty(0, dtype=int)
        return np.concatenate(first), np.concatenate(second)

    def candidates_near(self, x: Point) -> np.ndarray:
        """
        Indices of the points in the 3^d cells around an arbitrary location.
        """
        index = self._cell_of(np.asarray(x, dtype=float).reshape(1, -1))[0]
        cells = self.neighbour_cells(index)
        return np.concatenate([self.members(c) for c in cells])


def _use_cells(n: int, dom: TorusDomain, cutoff: float, method: str) -> bool:
    if method not in ("auto", "cells", "naive"):
        raise ValueError(f"unknown pair method {method!r}")
    if method == "naive":
        return False
    usable = 0.0 < cutoff < math.inf and int(dom.L // cutoff) >= 3
    if method == "cells":
        return usable
    return usable and n >= _CELL_LIST_MIN_POINTS


def neighbour_pairs(
    points: np.ndarray, dom: TorusDomain, cutoff: float, method: str = "auto"
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    All unordered pairs (i, j) at torus distance < cutoff.

    Returns (i, j, disp, r) with disp = displacement(points[i], points[j]).
    `method` selects the cell list ("cells"), the all-pairs scan ("naive")
    or picks by size ("auto").
    """
    points = np.asarray(points, dtype=float).reshape(-1, dom.d)
    n = len(points)
    if n < 2 or cutoff <= 0.0:
        empty = np.empty(0, dtype=int)
        return empty, empty, np.empty((0, dom.d)), np.empty(0)
    if _use_cells(n, dom, cutoff, method):
        i, j = CellList(points, dom, cutoff).candidate_pairs()
    else:
        i, j = np.triu_indices(n, k=1)
    disp = displacement(points[i], points[j], dom)
    r = np.sqrt(np.sum(disp**2, axis=-1))
    keep = r < cutoff
    return i[keep], j[keep], disp[keep], r[keep]


def _sum_energy(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    if np.any(np.isposinf(values)):
        return math.inf
    return float(np.sum(values))


def total_energy(phi: PotentialBase, gamma: Configuration, method: str = "auto") -> float:
    """
    Sum of phi over all unordered pairs of gamma (torus distances).
    """
    _, _, _, r = neighbour_pairs(gamma.points, gamma.dom, phi.cutoff, method)
    return _sum_energy(phi.eval(r))


class EnergyBreakdown(BaseModel):
    """
    Internal energy of the window configuration, its interaction W with the
    boundary configuration, and their sum (+inf dominates).
    """

    model_config = ConfigDict(frozen=True)

    internal: float
    boundary: float
    total: float

    @classmethod
    def of(cls, internal: float, boundary: float) -> "EnergyBreakdown":
        total = math.inf if math.inf in (internal, boundary) else internal + boundary
        return cls(internal=internal, boundary=boundary, total=total)


def conditional_energy(
    phi: PotentialBase,
    gamma: Configuration,
    window: Window,
    boundary: Optional[Configuration] = None,
    method: str = "auto",
) -> EnergyBreakdown:
    """
    Energy of gamma restricted to the window, split into the internal pair sum
    and the interaction with the boundary configuration.
    """
    dom = gamma.dom
    inside = gamma.points[window.contains(gamma.points)] if gamma.n else gamma.points
    n_in = len(inside)
    if boundary is not None and boundary.n and np.any(window.contains(boundary.points)):
        raise ValueError("boundary configuration has points inside the window")
    outside = boundary.points if boundary is not None else np.empty((0, dom.d))
    joint = np.vstack([inside, outside])
    i, j, _, r = neighbour_pairs(joint, dom, phi.cutoff, method)
    values = phi.eval(r)
    in_i, in_j = i < n_in, j < n_in
    internal = _sum_energy(values[in_i & in_j])
    cross = _sum_energy(values[in_i ^ in_j])
    return EnergyBreakdown.of(internal, cross)


def point_energies(
    phi: PotentialBase, X: np.ndarray, others: np.ndarray, dom: TorusDomain
) -> np.ndarray:
    """
    For each row x of X, the sum of phi(|x - y|) over the rows y of `others`.
    """
    X = np.asarray(X, dtype=float).reshape(-1, dom.d)
    others = np.asarray(others, dtype=float).reshape(-1, dom.d)
    if len(others) == 0 or phi.cutoff <= 0.0:
        return np.zeros(len(X))
    out = np.empty(len(X))
    # keep the distance matrix around a few million entries
    chunk = max(1, 4_000_000 // max(1, len(others)))
    for start in range(0, len(X), chunk):
        r = distance(X[start : start + chunk, None, :], others[None, :, :], dom)
        values = phi.eval(r)
        with np.errstate(invalid="ignore"):
            sums = np.sum(values, axis=1)
        out[start : start + chunk] = np.where(np.any(np.isposinf(values), axis=1), np.inf, sums)
    return out


def one_point_energy(
    phi: PotentialBase, gamma: Configuration, x: Point, method: str = "auto"
) -> float:
    """
    Energy of adding x to gamma: sum of phi(x - y) over y in gamma.
    """
    if gamma.n == 0 or phi.cutoff <= 0.0:
        return 0.0
    others = gamma.points
    if _use_cells(gamma.n, gamma.dom, phi.cutoff, method):
        others = others[CellList(others, gamma.dom, phi.cutoff).candidates_near(x)]
    return float(point_energies(phi, np.asarray(x).reshape(1, -1), others, gamma.dom)[0])


def pair_forces(phi: PotentialBase, gamma: Configuration, method: str = "auto") -> np.ndarray:
    """
    b(x) = -sum_{y != x} grad phi(x - y) for every point x of gamma, as (n, d).
    """
    forces = np.zeros_like(gamma.points)
    i, j, disp, _ = neighbour_pairs(gamma.points, gamma.dom, phi.cutoff, method)
    if len(i) == 0:
        return forces
    g = phi.grad(disp)
    np.add.at(forces, i, -g)
    np.add.at(forces, j, g)
    return forces


def energy_with(
    phi: PotentialBase, gamma: Configuration, boundary: Optional[Configuration]
) -> float:
    """
    Total torus energy of gamma together with a frozen boundary configuration.
    """
    return total_energy(phi, concatenate(gamma, boundary))


class StabilityReport(BaseModel):
    """
    Empirical stability and superstability diagnostics over a sample set.
    """

    n_samples: int
    infimum_energy_per_point: float
    superstability_A: float
    superstability_B: float


def _unit_cell_occupancy(gamma: Configuration) -> np.ndarray:
    dom = gamma.dom
    per_axis = max(1, int(math.floor(dom.L)))
    side = dom.L / per_axis
    idx = np.clip(np.floor(gamma.points / side).astype(int), 0, per_axis - 1)
    flat = np.ravel_multi_index(idx.T, (per_axis,) * dom.d) if gamma.n else idx[:, 0]
    return np.bincount(flat, minlength=per_axis**dom.d)


def stability_report(phi: PotentialBase, samples: Sequence[Configuration]) -> StabilityReport:
    """
    Infimum of E(gamma)/|gamma| over the samples and a least-squares fit of
    E(gamma) ~ A * sum_r |gamma_r|^2 - B * |gamma| on unit subcells.
    Purely diagnostic: degenerate input yields NaN entries.
    """
    ratios: List[float] = []
    rows: List[Tuple[float, float]] = []
    energies: List[float] = []
    for gamma in samples:
        if gamma.n == 0:
            continue
        energy = total_energy(phi, gamma)
        if not math.isfinite(energy):
            continue
        ratios.append(energy / gamma.n)
        occupancy = _unit_cell_occupancy(gamma)
        rows.append((float(np.sum(occupancy**2)), -float(gamma.n)))
        energies.append(energy)
    infimum = min(ratios) if ratios else math.nan
    A = B = math.nan
    if len(rows) >= 2:
        coef, *_ = np.linalg.lstsq(np.array(rows), np.array(energies), rcond=None)
        A, B = float(coef[0]), float(coef[1])
    LOG.debug(f"stability report over {len(ratios)} configurations: inf E/n = {infimum}")
    return StabilityReport(
        n_samples=len(ratios),
        infimum_energy_per_point=infimum,
        superstability_A=A,
        superstability_B=B,
    )


class DfrReport(BaseModel):
    """
    Pointwise checks of the superstability / lower-regularity criterion on a
    radial grid, plus the integrals it refers to (reported, not decided).
    """

    lower_bound_ok: bool
    upper_bound_ok: bool
    lower_violation_radius: Optional[float] = None
    upper_violation_radius: Optional[float] = None
    lower_integral_partial: float
    upper_integral: float


def dfr_bounds_check(
    phi: PotentialBase,
    d1: float,
    d2: float,
    s1: Callable[[float], float],
    s2: Callable[[float], float],
    d: int,
    n_grid: int = 256,
    r_max: Optional[float] = None,
) -> DfrReport:
    """
    Check phi(r) >= s1(r) on (0, d1] and |phi(r)| <= s2(r) on [d2, r_cut].

    :param d: dimension entering the radial weight t^(d-1).
    :param r_max: end of the upper grid when the potential has infinite range
                  (default 10 * d2).
    """
    if not 0 < d1 < d2:
        raise ValueError("need 0 < d1 < d2")
    lower_grid = np.linspace(d1 / n_grid, d1, n_grid)
    phi_low = phi.eval(lower_grid)
    s1_low = np.array([s1(t) for t in lower_grid])
    lower_bad = ~(phi_low >= s1_low)
    end = phi.cutoff if math.isfinite(phi.cutoff) else (r_max or 10.0 * d2)
    if end > d2:
        upper_grid = np.linspace(d2, end, n_grid)
        upper_grid = upper_grid[upper_grid < phi.cutoff] if math.isfinite(phi.cutoff) else upper_grid
    else:
        upper_grid = np.empty(0)
    phi_up = phi.eval(upper_grid)
    s2_up = np.array([s2(t) for t in upper_grid])
    upper_bad = ~(np.abs(phi_up) <= s2_up)

    upper_end = phi.cutoff if math.isfinite(phi.cutoff) else math.inf
    upper_integral = 0.0
    if upper_end > d2:
        upper_integral, _ = integrate.quad(lambda t: t ** (d - 1) * s2(t), d2, upper_end, limit=200)
    lower_integral, _ = integrate.quad(lambda t: t ** (d - 1) * s1(t), d1 / n_grid, d1, limit=200)
    return DfrReport(
        lower_bound_ok=not bool(np.any(lower_bad)),
        upper_bound_ok=not bool(np.any(upper_bad)),
        lower_violation_radius=float(lower_grid[lower_bad][0]) if np.any(lower_bad) else None,
        upper_violation_radius=float(upper_grid[upper_bad][0]) if np.any(upper_bad) else None,
        lower_integral_partial=float(lower_integral),
        upper_integral=float(upper_integral),
    )
