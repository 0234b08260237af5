"""
Optimal-matching distance between finite configurations and Lipschitz checks
of linear statistics against it.
"""

import itertools
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy import optimize

from confspace.calculus import SmoothField
from confspace.configuration import Configuration, pair
from confspace.domain import TorusDomain, displacement, wrap

LOG = logging.getLogger("confspace")

_BRUTE_FORCE_LIMIT = 8


class MatchingResult(BaseModel):
    """
    cost = sqrt of the minimal sum of squared torus distances; `assignment[i]`
    is the index of the omega point matched to gamma point i. Infinite cost
    (different point counts) comes without an assignment.
    """

    cost: float
    assignment: Optional[List[int]] = None


def _squared_costs(gamma: Configuration, omega: Configuration) -> np.ndarray:
    disp = displacement(gamma.points[:, None, :], omega.points[None, :, :], gamma.dom)
    return np.sum(disp**2, axis=-1)


def _check_same_domain(gamma: Configuration, omega: Configuration) -> None:
    if gamma.dom != omega.dom:
        raise ValueError("configurations live on different domains")


def rho(gamma: Configuration, omega: Configuration) -> MatchingResult:
    """
    Minimum-cost perfect matching on squared torus distances (Kuhn-Munkres).
    """
    _check_same_domain(gamma, omega)
    if gamma.n != omega.n:
        return MatchingResult(cost=math.inf)
    if gamma.n == 0:
        return MatchingResult(cost=0.0, assignment=[])
    costs = _squared_costs(gamma, omega)
    rows, cols = optimize.linear_sum_assignment(costs)
    assignment = [0] * gamma.n
    for r, c in zip(rows, cols):
        assignment[int(r)] = int(c)
    return MatchingResult(cost=math.sqrt(float(costs[rows, cols].sum())), assignment=assignment)


def rho_brute_force(gamma: Configuration, omega: Configuration) -> MatchingResult:
    """
    The same distance by exhausting all n! matchings; only for n <= 8.
    """
    _check_same_domain(gamma, omega)
    if gamma.n != omega.n:
        return MatchingResult(cost=math.inf)
    if gamma.n > _BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force matching is limited to {_BRUTE_FORCE_LIMIT} points")
    if gamma.n == 0:
        return MatchingResult(cost=0.0, assignment=[])
    costs = _squared_costs(gamma, omega)
    best, best_perm = math.inf, tuple(range(gamma.n))
    rows = np.arange(gamma.n)
    for perm in itertools.permutations(range(gamma.n)):
        total = float(costs[rows, list(perm)].sum())
        if total < best:
            best, best_perm = total, perm
    return MatchingResult(cost=math.sqrt(best), assignment=list(best_perm))


def rho_to_set(gamma: Configuration, A: Sequence[Configuration]) -> float:
    """
    min over omega in A of rho(omega, gamma).
    """
    if not A:
        raise ValueError("distance to an empty set of configurations")
    return min(rho(omega, gamma).cost for omega in A)


class LipschitzViolation(AssertionError):
    """
    |<f, gamma> - <f, omega>| exceeded Lip(f) * sqrt(n) * rho(gamma, omega).
    """

    def __init__(self, gamma: Configuration, omega: Configuration, difference: float, bound: float):
        super().__init__(
            f"Lipschitz bound violated: |<f, gamma> - <f, omega>| = {difference:.6g} > {bound:.6g} "
            f"for a pair of {gamma.n}-point configurations"
        )
        self.gamma = gamma
        self.omega = omega
        self.difference = difference
        self.bound = bound


def lipschitz_constant(
    f: SmoothField, dom: TorusDomain, grid_per_axis: int = 64, inflation: float = 1.01
) -> float:
    """
    sup |grad f| over the torus: a grid search polished by a local optimizer
    from the best grid point, then inflated by `inflation`.
    """
    axis = (np.arange(grid_per_axis) + 0.5) * dom.L / grid_per_axis
    grid = np.stack(np.meshgrid(*([axis] * dom.d), indexing="ij"), axis=-1).reshape(-1, dom.d)
    norms = np.linalg.norm(f.gradient(grid), axis=-1)
    start = grid[int(np.argmax(norms))]
    best = float(norms.max())

    def negative_norm(x: np.ndarray) -> float:
        return -float(np.linalg.norm(f.gradient(wrap(x, dom).reshape(1, -1))[0]))

    polished = optimize.minimize(
        negative_norm, start, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14}
    )
    best = max(best, -float(polished.fun))
    return inflation * best


class LipschitzReport(BaseModel):
    lipschitz: float
    n_pairs: int
    max_ratio: float


def lipschitz_certificate(
    f: SmoothField,
    pairs: Sequence[Tuple[Configuration, Configuration]],
    lipschitz: Optional[float] = None,
) -> LipschitzReport:
    """
    Check |<f, gamma> - <f, omega>| <= Lip(f) * sqrt(n) * rho(gamma, omega) for
    every pair of n-point configurations; raise LipschitzViolation on the
    first pair that fails.
    """
    if not pairs:
        raise ValueError("no configuration pairs to check")
    dom = pairs[0][0].dom
    lip = lipschitz if lipschitz is not None else lipschitz_constant(f, dom)
    max_ratio = 0.0
    for gamma, omega in pairs:
        if gamma.n != omega.n:
            raise ValueError(f"pair with different point counts {gamma.n} and {omega.n}")
        difference = abs(pair(f, gamma) - pair(f, omega))
        bound = lip * math.sqrt(gamma.n) * rho(gamma, omega).cost
        if difference > bound:
            raise LipschitzViolation(gamma, omega, difference, bound)
        if bound > 0:
            max_ratio = max(max_ratio, difference / bound)
    LOG.info(f"Lipschitz certificate over {len(pairs)} pairs: Lip={lip:.6g}, max ratio={max_ratio:.4f}")
    return LipschitzReport(lipschitz=lip, n_pairs=len(pairs), max_ratio=max_ratio)
