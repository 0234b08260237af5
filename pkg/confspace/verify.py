"""
Monte Carlo estimators and the statistical identity tests built on them.

Each identity test turns a list of sampled configurations into per-sample
values whose expectation is zero when the identity holds, and reports the
z-score of their mean. Shards of one test merge with `aggregate`.
"""

import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field
from scipy import stats

from confspace.calculus import (
    B_v_phi,
    CylinderFunction,
    SmoothField,
    VectorField,
    as_combination,
    directional_derivative,
    div_gamma,
)
from confspace.configuration import Configuration, concatenate, count
from confspace.domain import Window
from confspace.intensity import IntensityMeasure, QuadratureError, quadrature_nodes
from confspace.potential import HardCoreContactError, PotentialBase, ZeroPotential, point_energies

LOG = logging.getLogger("confspace")

Z_THRESHOLD = 4.0
MAX_REJECTION_FRACTION = 1e-3


class EstimatorResult(BaseModel):
    """
    Sample mean with its standard error, optionally against a known target.
    """

    model_config = ConfigDict(frozen=True)

    n_samples: int = Field(ge=0)
    mean: float
    std_error: float = Field(ge=0)
    target: Optional[float] = None

    @computed_field  # type: ignore[misc]
    @property
    def z_score(self) -> Optional[float]:
        if self.target is None:
            return None
        diff = self.mean - self.target
        if self.std_error > 0:
            return diff / self.std_error
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)

    @classmethod
    def from_samples(
        cls,
        values: Sequence[float],
        target: Optional[float] = None,
        batches: Optional[int] = None,
    ) -> "EstimatorResult":
        """
        :param batches: estimate the standard error from this many consecutive
                        batch means instead of single values (Markov chain output).
        """
        x = np.asarray(values, dtype=float)
        if len(x) < 2:
            raise ValueError(f"need at least 2 samples for a standard error, got {len(x)}")
        if batches is None:
            se = float(np.std(x, ddof=1) / math.sqrt(len(x)))
        else:
            if not 2 <= batches <= len(x):
                raise ValueError(f"batches must lie in [2, {len(x)}], got {batches}")
            means = np.array([chunk.mean() for chunk in np.array_split(x, batches)])
            se = float(np.std(means, ddof=1) / math.sqrt(batches))
        return cls(n_samples=len(x), mean=float(np.mean(x)), std_error=se, target=target)


def aggregate(results: Sequence[EstimatorResult]) -> EstimatorResult:
    """
    Pool shard results: sample-count weighted mean, errors combined as
    sqrt(sum n_i^2 se_i^2) / N. Pooling the shards of one run reproduces the
    mean of the unsharded run.
    """
    if not results:
        raise ValueError("cannot aggregate an empty list of results")
    targets = {r.target for r in results}
    if len(targets) > 1:
        raise ValueError(f"cannot aggregate results with different targets {sorted(map(str, targets))}")
    n = np.array([r.n_samples for r in results], dtype=float)
    total = float(np.sum(n))
    if total == 0:
        raise ValueError("cannot aggregate results without samples")
    means = np.array([r.mean for r in results])
    errors = np.array([r.std_error for r in results])
    return EstimatorResult(
        n_samples=int(total),
        mean=float(np.sum(n * means) / total),
        std_error=float(math.sqrt(np.sum((n * errors) ** 2)) / total),
        target=results[0].target,
    )


def consistent(a: EstimatorResult, b: EstimatorResult, threshold: float = Z_THRESHOLD) -> bool:
    """
    True when the two means agree within `threshold` pooled standard errors.
    """
    pooled = math.sqrt(a.std_error**2 + b.std_error**2)
    diff = abs(a.mean - b.mean)
    return diff <= threshold * pooled if pooled > 0 else diff == 0.0


class IdentityResult(BaseModel):
    """
    Outcome of one identity test: both sides as separate estimates when the
    test has them, and the paired-difference statistic that decides it.
    """

    test: str
    statistic: EstimatorResult
    lhs: Optional[EstimatorResult] = None
    rhs: Optional[EstimatorResult] = None
    rejections: int = 0
    threshold: float = Z_THRESHOLD

    @property
    def rejection_fraction(self) -> float:
        total = self.statistic.n_samples + self.rejections
        return self.rejections / total if total else 0.0

    @property
    def passed(self) -> bool:
        z = self.statistic.z_score
        return (
            z is not None
            and abs(z) < self.threshold
            and self.rejection_fraction <= MAX_REJECTION_FRACTION
        )


def merge_identity(parts: Sequence[IdentityResult]) -> IdentityResult:
    """
    Aggregate shards of the same identity test.
    """
    if not parts:
        raise ValueError("cannot merge an empty list of identity results")
    lhs = [p.lhs for p in parts if p.lhs is not None]
    rhs = [p.rhs for p in parts if p.rhs is not None]
    return IdentityResult(
        test=parts[0].test,
        statistic=aggregate([p.statistic for p in parts]),
        lhs=aggregate(lhs) if len(lhs) == len(parts) else None,
        rhs=aggregate(rhs) if len(rhs) == len(parts) else None,
        rejections=sum(p.rejections for p in parts),
        threshold=parts[0].threshold,
    )


class MeckeFunction:
    """
    A test function h(gamma, x) supported in x inside `window`.

    `at_points` gives h(gamma, x) for the points x of gamma, `at_insertions`
    gives h(gamma + delta_x, x) for arbitrary locations x.
    """

    window: Window

    def at_points(self, gamma: Configuration) -> np.ndarray:
        raise NotImplementedError

    def at_insertions(self, gamma: Configuration, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class WindowIndicator(MeckeFunction):
    def __init__(self, window: Window):
        self.window = window

    def at_points(self, gamma: Configuration) -> np.ndarray:
        return self.window.contains(gamma.points).astype(float)

    def at_insertions(self, gamma: Configuration, X: np.ndarray) -> np.ndarray:
        return self.window.contains(X).astype(float)


class CountTimesIndicator(MeckeFunction):
    """
    h(gamma, x) = gamma(B) * 1_window(x), with B = `count_window` (the window by default).
    """

    def __init__(self, window: Window, count_window: Optional[Window] = None):
        self.window = window
        self.count_window = count_window or window

    def at_points(self, gamma: Configuration) -> np.ndarray:
        return count(self.count_window, gamma) * self.window.contains(gamma.points).astype(float)

    def at_insertions(self, gamma: Configuration, X: np.ndarray) -> np.ndarray:
        counts = count(self.count_window, gamma) + self.count_window.contains(X)
        return counts * self.window.contains(X).astype(float)


class CylinderWeightedIndicator(MeckeFunction):
    """
    h(gamma, x) = F(gamma) * w(x) * 1_window(x) for a cylinder function F and
    a smooth weight w.
    """

    def __init__(self, F: CylinderFunction, weight: SmoothField, window: Window):
        self.F = F
        self.weight = as_combination(weight)
        self.window = window

    def at_points(self, gamma: Configuration) -> np.ndarray:
        if gamma.n == 0:
            return np.zeros(0)
        return self.F(gamma) * self.weight(gamma.points) * self.window.contains(gamma.points)

    def at_insertions(self, gamma: Configuration, X: np.ndarray) -> np.ndarray:
        return self.F.with_insertions(gamma, X) * self.weight(X) * self.window.contains(X)


def _insertion_integrand(
    h: MeckeFunction,
    sigma: IntensityMeasure,
    phi: PotentialBase,
    gamma: Configuration,
    others: Configuration,
    with_boltzmann: bool,
) -> Callable[[np.ndarray], np.ndarray]:
    def integrand(X: np.ndarray) -> np.ndarray:
        values = h.at_insertions(gamma, X) * sigma.density(X)
        if with_boltzmann:
            values = values * np.exp(-point_energies(phi, X, others.points, gamma.dom))
        return values

    return integrand


def _quadrature_check(
    integrand: Callable[[np.ndarray], np.ndarray],
    window: Window,
    order: int,
    panels: int,
    rtol: float,
) -> None:
    nodes, weights = quadrature_nodes(window, order, panels)
    fine_nodes, fine_weights = quadrature_nodes(window, order + 16, panels)
    fine = integrand(fine_nodes)
    value, check = float(weights @ integrand(nodes)), float(fine_weights @ fine)
    if abs(value - check) > rtol * float(fine_weights @ np.abs(fine)):
        raise QuadratureError(
            f"Mecke quadrature with {order} nodes x {panels} panels misses its check by "
            f"{abs(value - check):.3e} (integral {check:.6g}); increase panels"
        )


def mecke_test(
    samples: Sequence[Configuration],
    sigma: IntensityMeasure,
    phi: PotentialBase,
    h: MeckeFunction,
    window_h: Optional[Window] = None,
    boundary: Optional[Configuration] = None,
    order: int = 32,
    panels: int = 1,
    check_samples: int = 3,
    quad_rtol: float = 1e-4,
    drop_boltzmann: bool = False,
    batches: Optional[int] = None,
) -> IdentityResult:
    """
    E sum_{x in gamma} h(gamma, x)  versus  E int h(gamma + delta_x, x) exp(-E_x(gamma)) sigma(dx).

    The x-integral runs over `window_h` (h's window by default) with the
    composite Gauss-Legendre rule; on the first `check_samples` samples the
    rule is checked against a finer one and QuadratureError is raised when
    they disagree. `drop_boltzmann` removes the exp(-E_x) factor, which breaks
    the identity for interacting samples.
    """
    window_h = window_h or h.window
    nodes, weights = quadrature_nodes(window_h, order, panels)
    with_boltzmann = not drop_boltzmann and phi.cutoff > 0.0
    lhs = np.empty(len(samples))
    rhs = np.empty(len(samples))
    for k, gamma in enumerate(samples):
        integrand = _insertion_integrand(
            h, sigma, phi, gamma, concatenate(gamma, boundary), with_boltzmann
        )
        if k < check_samples:
            _quadrature_check(integrand, window_h, order, panels, quad_rtol)
        lhs[k] = float(np.sum(h.at_points(gamma)))
        rhs[k] = float(weights @ integrand(nodes))
    result = IdentityResult(
        test="mecke",
        statistic=EstimatorResult.from_samples(lhs - rhs, target=0.0, batches=batches),
        lhs=EstimatorResult.from_samples(lhs, batches=batches),
        rhs=EstimatorResult.from_samples(rhs, batches=batches),
    )
    LOG.info(f"mecke test over {len(samples)} samples: z={result.statistic.z_score:.3f}")
    return result


def ibp_test(
    samples: Sequence[Configuration],
    phi: Optional[PotentialBase],
    F: CylinderFunction,
    G: CylinderFunction,
    v: VectorField,
    sigma: Optional[IntensityMeasure] = None,
    batches: Optional[int] = None,
) -> IdentityResult:
    """
    E[grad_v F * G + F * grad_v G + F * G * B_v] = 0.

    `phi=None` is the free case, B_v = <div v, gamma>; with `sigma` the
    divergence carries the logarithmic derivative of the density.
    Samples hitting a hard-core contact are counted as rejections.
    """
    phi = phi if phi is not None else ZeroPotential()
    values: List[float] = []
    rejections = 0
    for gamma in samples:
        try:
            b = B_v_phi(phi, v, gamma, sigma)
        except HardCoreContactError:
            rejections += 1
            continue
        f, g = F(gamma), G(gamma)
        values.append(
            directional_derivative(F, v, gamma) * g + f * directional_derivative(G, v, gamma) + f * g * b
        )
    if rejections:
        LOG.warning(f"integration by parts test rejected {rejections} samples with hard-core contact")
    return IdentityResult(
        test="ibp",
        statistic=EstimatorResult.from_samples(values, target=0.0, batches=batches),
        rejections=rejections,
    )


def volume_element_test(
    samples: Sequence[Configuration],
    V: Sequence[Tuple[CylinderFunction, VectorField]],
    F: CylinderFunction,
    sigma: Optional[IntensityMeasure] = None,
    batches: Optional[int] = None,
) -> IdentityResult:
    """
    E[<V, grad F>] + E[div V * F] = 0 for V = sum_i F_i v_i (free case).
    """
    values = np.empty(len(samples))
    for k, gamma in enumerate(samples):
        inner = sum(Fi(gamma) * directional_derivative(F, vi, gamma) for Fi, vi in V)
        values[k] = inner + div_gamma(V, gamma, sigma) * F(gamma)
    return IdentityResult(
        test="volume-element",
        statistic=EstimatorResult.from_samples(values, target=0.0, batches=batches),
    )


class CountTestResult(BaseModel):
    statistic: float
    dof: int
    p_value: float
    threshold: float = 1e-3

    @property
    def passed(self) -> bool:
        return self.p_value > self.threshold


def _merge_small_cells(
    observed: np.ndarray, expected: np.ndarray, minimum: float
) -> Tuple[np.ndarray, np.ndarray]:
    obs_out: List[float] = []
    exp_out: List[float] = []
    acc_obs = acc_exp = 0.0
    for o, e in zip(observed, expected):
        acc_obs += o
        acc_exp += e
        if acc_exp >= minimum:
            obs_out.append(acc_obs)
            exp_out.append(acc_exp)
            acc_obs = acc_exp = 0.0
    if acc_exp > 0 or acc_obs > 0:
        if exp_out:
            obs_out[-1] += acc_obs
            exp_out[-1] += acc_exp
        else:
            obs_out.append(acc_obs)
            exp_out.append(acc_exp)
    return np.array(obs_out), np.array(exp_out)


def poisson_count_test(counts: Sequence[int], mean: float, minimum_expected: float = 5.0) -> CountTestResult:
    """
    Chi-square goodness of fit of the counts to Poisson(mean), pooling cells
    until every expected count reaches `minimum_expected`.
    """
    counts = np.asarray(counts, dtype=int)
    if len(counts) == 0:
        raise ValueError("no counts to test")
    if mean <= 0:
        raise ValueError(f"Poisson mean must be > 0, got {mean}")
    top = int(max(counts.max(), stats.poisson.ppf(1 - 1e-9, mean)))
    observed = np.bincount(counts, minlength=top + 1).astype(float)
    expected = len(counts) * stats.poisson.pmf(np.arange(top + 1), mean)
    expected[-1] += len(counts) * stats.poisson.sf(top, mean)
    observed, expected = _merge_small_cells(observed, expected, minimum_expected)
    if len(observed) < 2:
        raise ValueError("too few samples for a chi-square test")
    chi2, p_value = stats.chisquare(observed, expected * observed.sum() / expected.sum())
    return CountTestResult(statistic=float(chi2), dof=len(observed) - 1, p_value=float(p_value))
