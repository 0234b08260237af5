"""
Intensity measures sigma = rho * m, Poisson and mixed-Poisson sampling in a
window, and the closed-form Laplace targets used as ground truth.
"""

import functools
import logging
import math
from typing import Any, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from confspace.configuration import Configuration, ScalarField
from confspace.domain import TorusDomain, Window

LOG = logging.getLogger("confspace")

# Grids larger than this many nodes are refused rather than refined further.
_MAX_QUADRATURE_NODES = 4_000_000


class QuadratureError(RuntimeError):
    """
    Composite Gauss-Legendre quadrature did not reach its tolerance.
    """


class QuadratureResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    value: float
    error: float
    panels: int = 1


def quadrature_nodes(window: Window, order: int = 32, panels: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nodes (shape (m, d)) and weights of the tensor-product composite
    Gauss-Legendre rule over the window.

    :param order: nodes per panel per axis.
    :param panels: panels per axis.
    """
    nodes, weights = np.polynomial.legendre.leggauss(order)
    axis_nodes: List[np.ndarray] = []
    axis_weights: List[np.ndarray] = []
    for lo, hi in zip(window.lower, window.upper):
        edges = np.linspace(lo, hi, panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[:-1] + edges[1:])
        axis_nodes.append((mid[:, None] + half[:, None] * nodes[None, :]).ravel())
        axis_weights.append((half[:, None] * weights[None, :]).ravel())
    grid = np.stack(np.meshgrid(*axis_nodes, indexing="ij"), axis=-1).reshape(-1, window.d)
    return grid, functools.reduce(np.multiply.outer, axis_weights).ravel()


def gauss_legendre(
    func: ScalarField, window: Window, order: int = 32, panels: int = 1
) -> Tuple[float, float]:
    """
    :return: (integral of func, integral of |func|) under `quadrature_nodes`.
    """
    grid, w = quadrature_nodes(window, order, panels)
    values = np.asarray(func(grid), dtype=float)
    return float(w @ values), float(w @ np.abs(values))


def integrate(
    func: ScalarField,
    window: Window,
    order: int = 32,
    check_order: int = 48,
    rtol: float = 1e-8,
) -> QuadratureResult:
    """
    Integrate over the window, doubling the panels per axis until the
    `order`-node and `check_order`-node rules agree to `rtol` (relative to the
    integral of |func|).
    """
    panels = 1
    while True:
        if (panels * check_order) ** window.d > _MAX_QUADRATURE_NODES:
            raise QuadratureError(
                f"quadrature did not converge to rtol={rtol} before exceeding "
                f"{_MAX_QUADRATURE_NODES} nodes"
            )
        value, scale = gauss_legendre(func, window, order, panels)
        check, _ = gauss_legendre(func, window, check_order, panels)
        error = abs(value - check)
        if not math.isfinite(value):
            raise QuadratureError("integrand is not finite on the quadrature grid")
        if error <= rtol * scale:
            return QuadratureResult(value=value, error=error, panels=panels)
        panels *= 2


class UniformIntensity(BaseModel):
    """
    sigma = z * m.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["uniform"] = "uniform"
    z: float = Field(ge=0, allow_inf_nan=False)

    @property
    def bound(self) -> float:
        return self.z

    def density(self, X: np.ndarray) -> np.ndarray:
        return np.full(len(np.atleast_2d(X)), self.z)

    def log_gradient(self, X: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.atleast_2d(np.asarray(X, dtype=float)))

    def scaled(self, c: float) -> "UniformIntensity":
        return UniformIntensity(z=c * self.z)


class DensityIntensity(BaseModel):
    """
    sigma = scale * rho * m for a nonnegative field rho bounded by rho_max.

    `rho` maps (n, d) points to n values; `log_gradient` needs it to also
    provide `gradient`.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: Literal["density"] = "density"
    rho: Any
    rho_max: float = Field(gt=0, allow_inf_nan=False)
    scale: float = Field(default=1.0, ge=0, allow_inf_nan=False)

    @property
    def bound(self) -> float:
        return self.scale * self.rho_max

    def density(self, X: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(self.rho(np.atleast_2d(X)), dtype=float)

    def log_gradient(self, X: np.ndarray) -> np.ndarray:
        """
        beta = grad(rho) / rho, set to 0 where rho = 0.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        rho = np.asarray(self.rho(X), dtype=float)
        grad = np.asarray(self.rho.gradient(X), dtype=float)
        safe = np.where(rho > 0, rho, 1.0)
        return np.where((rho > 0)[:, None], grad / safe[:, None], 0.0)

    def scaled(self, c: float) -> "DensityIntensity":
        return self.model_copy(update={"scale": c * self.scale})


IntensityMeasure = Union[UniformIntensity, DensityIntensity]


class MixingLaw(BaseModel):
    """
    Finitely supported law of the activity: atoms (z_k, p_k).
    """

    model_config = ConfigDict(frozen=True)

    atoms: Tuple[Tuple[float, float], ...]

    @model_validator(mode="after")
    def _check_atoms(self) -> "MixingLaw":
        if not self.atoms:
            raise ValueError("mixing law needs at least one atom")
        for z, p in self.atoms:
            if not (math.isfinite(z) and z >= 0):
                raise ValueError(f"mixing activity must be finite and >= 0, got {z}")
            if not p > 0:
                raise ValueError(f"mixing weight must be > 0, got {p}")
        total = sum(p for _, p in self.atoms)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"mixing weights must sum to 1, got {total}")
        return self

    @classmethod
    def dirac(cls, z: float) -> "MixingLaw":
        return cls(atoms=((z, 1.0),))

    @property
    def activities(self) -> np.ndarray:
        return np.array([z for z, _ in self.atoms])

    @property
    def weights(self) -> np.ndarray:
        return np.array([p for _, p in self.atoms])

    def mean(self) -> float:
        return float(self.weights @ self.activities)

    def second_moment(self) -> float:
        return float(self.weights @ self.activities**2)

    def variance(self) -> float:
        return self.second_moment() - self.mean() ** 2

    def sample(self, rng: np.random.Generator) -> float:
        return float(self.activities[rng.choice(len(self.atoms), p=self.weights)])


@functools.lru_cache(maxsize=256)
def _density_mass(sigma: DensityIntensity, window: Window, order: int) -> float:
    return integrate(sigma.density, window, order=order).value


def window_mass(sigma: IntensityMeasure, window: Window, order: int = 32) -> float:
    """
    sigma(window): exact for the uniform kind, quadrature (cached) otherwise.
    """
    if isinstance(sigma, UniformIntensity):
        return sigma.z * window.volume
    return _density_mass(sigma, window, order)


def integral(f: ScalarField, sigma: IntensityMeasure, window: Window, order: int = 32) -> QuadratureResult:
    """
    Integral of f against sigma over the window.
    """
    return integrate(lambda X: np.asarray(f(X), dtype=float) * sigma.density(X), window, order=order)


def sample_poisson(
    sigma: IntensityMeasure, window: Window, dom: TorusDomain, rng: np.random.Generator
) -> Configuration:
    """
    Poisson configuration in the window: N ~ Poisson(sigma(window)), then N
    independent points from sigma / sigma(window) (by rejection for densities).
    """
    window.check(dom)
    mass = window_mass(sigma, window)
    n = int(rng.poisson(mass)) if mass > 0 else 0
    if n == 0:
        return Configuration.empty(dom)
    if isinstance(sigma, UniformIntensity):
        return Configuration(window.uniform(rng, n), dom, check=False)
    bound = sigma.bound
    accepted: List[np.ndarray] = []
    need = n
    while need > 0:
        proposals = window.uniform(rng, max(2 * need, 16))
        rho = sigma.density(proposals)
        if np.any(rho > bound):
            raise ValueError(f"density exceeds its declared bound rho_max={sigma.rho_max}")
        keep = proposals[rng.random(len(proposals)) * bound < rho][:need]
        accepted.append(keep)
        need -= len(keep)
    return Configuration(np.vstack(accepted), dom, check=False)


def sample_mixed_poisson(
    law: MixingLaw,
    sigma: IntensityMeasure,
    window: Window,
    dom: TorusDomain,
    rng: np.random.Generator,
) -> Tuple[float, Configuration]:
    """
    Draw z from the mixing law, then a Poisson configuration with intensity z * sigma.
    """
    z = law.sample(rng)
    return z, sample_poisson(sigma.scaled(z), window, dom, rng)


def _log_laplace(f: ScalarField, sigma: IntensityMeasure, window: Window, order: int) -> QuadratureResult:
    def integrand(X: np.ndarray) -> np.ndarray:
        values = np.asarray(f(X), dtype=float)
        if np.any(values > 0):
            raise ValueError("Laplace targets require f <= 0")
        return np.expm1(values) * sigma.density(X)

    return integrate(integrand, window, order=order)


def laplace_transform_target(
    f: ScalarField, sigma: IntensityMeasure, window: Window, order: int = 32
) -> QuadratureResult:
    """
    E[exp <f, gamma>] under the Poisson measure: exp(int (e^f - 1) dsigma).
    """
    inner = _log_laplace(f, sigma, window, order)
    value = math.exp(inner.value)
    return QuadratureResult(value=value, error=value * inner.error, panels=inner.panels)


def mixed_laplace_transform_target(
    law: MixingLaw, f: ScalarField, sigma: IntensityMeasure, window: Window, order: int = 32
) -> QuadratureResult:
    """
    E[exp <f, gamma>] under the mixed Poisson measure: sum_k p_k exp(z_k int (e^f - 1) dsigma).
    """
    inner = _log_laplace(f, sigma, window, order)
    terms = law.weights * np.exp(law.activities * inner.value)
    error = float(np.sum(terms * law.activities)) * inner.error
    return QuadratureResult(value=float(np.sum(terms)), error=error, panels=inner.panels)


def pairing_moments(
    f: ScalarField,
    sigma: IntensityMeasure,
    window: Window,
    law: Optional[MixingLaw] = None,
    order: int = 32,
) -> Tuple[float, float]:
    """
    First and second moments of <f, gamma> for f supported in the window.

    Poisson: E<f,gamma> = int f dsigma and E<f,gamma>^2 = int f^2 dsigma + (int f dsigma)^2.
    With a mixing law the first term scales by E[z] and the squared mean by E[z^2].
    """
    first = integral(f, sigma, window, order).value
    square = integral(lambda X: np.asarray(f(X), dtype=float) ** 2, sigma, window, order).value
    if law is None:
        return first, square + first**2
    return law.mean() * first, law.mean() * square + law.second_moment() * first**2
