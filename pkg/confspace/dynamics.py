"""
Free and interacting particle diffusions on the torus, and the checks that
tie sampled trajectories to semigroup and martingale formulas.

Conventions: the base generator is the Laplacian, so a free coordinate
moves with variance 2t, and the interacting system solves
dX = sqrt(2) dW - grad E(X) dt, which leaves exp(-E) invariant.
"""

import functools
import logging
import math
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats

from confspace import rng as rngs
from confspace.calculus import CylinderFunction, SmoothField, generator_apply
from confspace.configuration import Configuration
from confspace.domain import TorusDomain, Window, wrap
from confspace.gibbs import GibbsSpec
from confspace.intensity import MixingLaw
from confspace.potential import (
    PotentialBase,
    ZeroPotential,
    neighbour_pairs,
    pair_forces,
    total_energy,
)
from confspace.verify import (
    Z_THRESHOLD,
    CountTestResult,
    EstimatorResult,
    IdentityResult,
    consistent,
    poisson_count_test,
)

LOG = logging.getLogger("confspace")

DIFFUSION_SCALE = math.sqrt(2.0)
MAX_HALVINGS = 20


class TrajectoryParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dt: float = Field(gt=0, allow_inf_nan=False)
    n_steps: int = Field(ge=1)
    diffusion_scale: float = Field(default=DIFFUSION_SCALE, gt=0)
    save_every: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps


class Trajectory(BaseModel):
    """
    Saved (time, configuration) pairs of one path. The point count never changes.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    times: List[float]
    configurations: List[Configuration]

    @model_validator(mode="after")
    def _check_conservative(self) -> "Trajectory":
        if len(self.times) != len(self.configurations):
            raise ValueError("one configuration per saved time")
        if len({c.n for c in self.configurations}) > 1:
            raise ValueError("point count changed along the trajectory")
        return self

    @property
    def final(self) -> Configuration:
        return self.configurations[-1]


def free_step(
    gamma: Configuration, dt: float, rng: np.random.Generator, scale: float = DIFFUSION_SCALE
) -> Configuration:
    """
    Independent Gaussian increments with standard deviation scale * sqrt(dt) per coordinate.
    """
    if dt <= 0:
        raise ValueError(f"time step must be > 0, got {dt}")
    if gamma.n == 0:
        return gamma
    noise = rng.standard_normal(gamma.points.shape)
    return gamma.with_points(wrap(gamma.points + scale * math.sqrt(dt) * noise, gamma.dom))


def drift(phi: PotentialBase, gamma: Configuration, method: str = "auto") -> np.ndarray:
    """
    b(x) = -sum_{y != x} grad phi(x - y), shape (n, d).
    """
    return pair_forces(phi, gamma, method)


def _overlaps(phi: PotentialBase, points: np.ndarray, dom: TorusDomain) -> bool:
    if phi.core <= 0.0 or len(points) < 2:
        return False
    i, _, _, _ = neighbour_pairs(points, dom, phi.core)
    return len(i) > 0


def interacting_step(
    phi: PotentialBase,
    gamma: Configuration,
    dt: float,
    rng: np.random.Generator,
    scale: float = DIFFUSION_SCALE,
    method: str = "auto",
) -> Configuration:
    """
    One Euler-Maruyama step of dX = scale dW + b(X) dt with the drift taken at
    the start of the step. A step that pushes two points into a hard core is
    redrawn with half the time step, and the remainder of dt is covered by
    further sub-steps.
    """
    if dt <= 0:
        raise ValueError(f"time step must be > 0, got {dt}")
    if gamma.n == 0:
        return gamma
    dom = gamma.dom
    x = gamma.points
    remaining = dt
    while remaining > 0.0:
        b = drift(phi, Configuration(x, dom, check=False), method)
        h = remaining
        for _ in range(MAX_HALVINGS + 1):
            noise = rng.standard_normal(x.shape)
            proposal = wrap(x + h * b + scale * math.sqrt(h) * noise, dom)
            if not _overlaps(phi, proposal, dom):
                break
            h *= 0.5
        else:
            raise RuntimeError(
                f"hard-core step rejected after {MAX_HALVINGS} halvings of dt={dt}"
            )
        x = proposal
        remaining -= h
        # floating-point leftovers from repeated halving
        if remaining < 1e-15 * dt:
            remaining = 0.0
    return Configuration(x, dom, check=False)


def _simulate(
    phi: Optional[PotentialBase],
    gamma0: Configuration,
    params: TrajectoryParams,
    rng: Optional[np.random.Generator],
) -> Trajectory:
    rng = rng if rng is not None else rngs.stream(params.seed)
    times = [0.0]
    configurations = [gamma0]
    gamma = gamma0
    for step in range(1, params.n_steps + 1):
        if phi is None:
            gamma = free_step(gamma, params.dt, rng, params.diffusion_scale)
        else:
            gamma = interacting_step(phi, gamma, params.dt, rng, params.diffusion_scale)
        if step % params.save_every == 0 or step == params.n_steps:
            times.append(step * params.dt)
            configurations.append(gamma)
    return Trajectory(times=times, configurations=configurations)


def simulate_free(
    gamma0: Configuration, params: TrajectoryParams, rng: Optional[np.random.Generator] = None
) -> Trajectory:
    LOG.info(f"free dynamics: n={gamma0.n}, dt={params.dt}, steps={params.n_steps}")
    return _simulate(None, gamma0, params, rng)


def simulate_interacting(
    phi: PotentialBase,
    gamma0: Configuration,
    params: TrajectoryParams,
    rng: Optional[np.random.Generator] = None,
) -> Trajectory:
    LOG.info(f"interacting dynamics: n={gamma0.n}, dt={params.dt}, steps={params.n_steps}")
    return _simulate(phi, gamma0, params, rng)


def _log1p_field(f: SmoothField, X: np.ndarray) -> np.ndarray:
    values = np.asarray(f(X), dtype=float)
    if np.any(values > 0) or np.any(values <= -1):
        raise ValueError("Laplace functional fields must take values in (-1, 0]")
    return np.log1p(values)


def laplace_functional_test(
    law: MixingLaw,
    fields: Sequence[SmoothField],
    times: Sequence[float],
    dom: TorusDomain,
    n_systems: int,
    n_particles: int,
    seed: int = 0,
    first_stream: int = 0,
    scale: float = DIFFUSION_SCALE,
) -> IdentityResult:
    """
    E exp(sum_i <log(1 + f_i), X_{t_i}>) for free dynamics from a mixed
    Poisson start on the whole torus, against
    sum_k p_k exp(z_k L^d E_x[prod_i (1 + f_i(X_{t_i})) - 1]) with the inner
    expectation over independent single-particle paths from a uniform start.
    """
    if len(fields) != len(times) or not fields:
        raise ValueError("need one field per time and at least one of each")
    if any(t < 0 for t in times) or any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("times must be nondecreasing and >= 0")
    system_rng = rngs.stream(seed, first_stream)
    particle_rng = rngs.stream(seed, first_stream + 1)
    steps = np.sqrt(np.diff(np.concatenate([[0.0], times])))

    activities = system_rng.choice(law.activities, size=n_systems, p=law.weights)
    counts = system_rng.poisson(activities * dom.volume)
    owner = np.repeat(np.arange(n_systems), counts)
    x = dom.L * system_rng.random((len(owner), dom.d))
    log_weight = np.zeros(len(owner))
    for f, step in zip(fields, steps):
        x = wrap(x + scale * step * system_rng.standard_normal(x.shape), dom)
        log_weight += _log1p_field(f, x)
    lhs_values = np.exp(np.bincount(owner, weights=log_weight, minlength=n_systems))

    y = dom.L * particle_rng.random((n_particles, dom.d))
    product = np.ones(n_particles)
    for f, step in zip(fields, steps):
        y = wrap(y + scale * step * particle_rng.standard_normal(y.shape), dom)
        product *= 1.0 + np.asarray(f(y), dtype=float)
    m = EstimatorResult.from_samples(product - 1.0)
    terms = law.weights * np.exp(law.activities * dom.volume * m.mean)
    rhs_value = float(np.sum(terms))
    rhs_se = abs(float(np.sum(terms * law.activities * dom.volume))) * m.std_error

    lhs = EstimatorResult.from_samples(lhs_values)
    rhs = EstimatorResult(n_samples=n_particles, mean=rhs_value, std_error=rhs_se)
    statistic = EstimatorResult(
        n_samples=n_systems,
        mean=lhs.mean - rhs.mean,
        std_error=math.sqrt(lhs.std_error**2 + rhs.std_error**2),
        target=0.0,
    )
    return IdentityResult(test="laplace-functional", statistic=statistic, lhs=lhs, rhs=rhs)


def heat_semigroup(
    f: SmoothField,
    X: np.ndarray,
    t: float,
    dom: TorusDomain,
    scale: float = DIFFUSION_SCALE,
    order: int = 32,
) -> np.ndarray:
    """
    E f(x + scale * W_t) on the torus for every row x of X, by tensor
    Gauss-Hermite quadrature of the Gaussian kernel.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if t == 0.0:
        return np.asarray(f(X), dtype=float)
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / math.sqrt(2.0 * math.pi)
    grid = np.stack(np.meshgrid(*([nodes] * dom.d), indexing="ij"), axis=-1).reshape(-1, dom.d)
    w = functools.reduce(np.multiply.outer, [weights] * dom.d).ravel()
    shifted = wrap(X[:, None, :] + scale * math.sqrt(t) * grid[None, :, :], dom)
    values = np.asarray(f(shifted.reshape(-1, dom.d)), dtype=float).reshape(len(X), len(grid))
    return values @ w


def heat_semigroup_test(
    f: SmoothField,
    gamma0: Configuration,
    t: float,
    n_paths: int,
    seed: int = 0,
    stream_id: int = 0,
    scale: float = DIFFUSION_SCALE,
) -> IdentityResult:
    """
    E exp(<log(1 + f), X_t>) from the fixed start gamma0 against
    prod_{x in gamma0} (1 + (heat semigroup of f)(x)).
    """
    dom = gamma0.dom
    rng = rngs.stream(seed, stream_id)
    target = float(np.prod(1.0 + heat_semigroup(f, gamma0.points, t, dom, scale)))
    if gamma0.n == 0:
        values = np.ones(n_paths)
    else:
        moved = wrap(
            gamma0.points[None, :, :]
            + scale * math.sqrt(t) * rng.standard_normal((n_paths, gamma0.n, dom.d)),
            dom,
        )
        log_values = _log1p_field(f, moved.reshape(-1, dom.d)).reshape(n_paths, gamma0.n)
        values = np.exp(np.sum(log_values, axis=1))
    lhs = EstimatorResult.from_samples(values)
    return IdentityResult(
        test="heat-semigroup",
        statistic=EstimatorResult.from_samples(values - target, target=0.0),
        lhs=lhs,
        rhs=EstimatorResult(n_samples=n_paths, mean=target, std_error=0.0),
    )


def martingale_values(
    phi: PotentialBase,
    F: CylinderFunction,
    starts: Sequence[Configuration],
    horizon: float,
    dt: float,
    seed: int = 0,
    first_stream: int = 0,
) -> np.ndarray:
    """
    F(X_T) - F(X_0) - int_0^T LF(X_s) ds for one path per start, the time
    integral by the trapezoidal rule on the step grid.
    """
    n_steps = max(1, int(round(horizon / dt)))
    out = np.empty(len(starts))
    paths = rngs.streams(seed, len(starts), first_stream)
    for k, (gamma0, rng) in enumerate(zip(starts, paths)):
        gamma = gamma0
        generator = [generator_apply(phi, F, gamma)]
        for _ in range(n_steps):
            gamma = interacting_step(phi, gamma, dt, rng)
            generator.append(generator_apply(phi, F, gamma))
        integral = dt * (0.5 * generator[0] + sum(generator[1:-1]) + 0.5 * generator[-1])
        out[k] = F(gamma) - F(gamma0) - integral
    return out


class MartingaleReport(BaseModel):
    coarse: EstimatorResult
    fine: EstimatorResult
    consistent: bool
    threshold: float = Z_THRESHOLD

    @property
    def passed(self) -> bool:
        return self.consistent and all(
            abs(r.z_score) < self.threshold for r in (self.coarse, self.fine)
        )


def martingale_test(
    phi: PotentialBase,
    F: CylinderFunction,
    starts: Sequence[Configuration],
    horizon: float,
    dt: float,
    seed: int = 0,
) -> MartingaleReport:
    """
    Zero-mean test of the martingale increment at step sizes dt and dt/2.
    Starts may come from a Poisson sampler, a Gibbs chain, or repeat one
    fixed configuration.
    """
    coarse = EstimatorResult.from_samples(
        martingale_values(phi, F, starts, horizon, dt, seed), target=0.0
    )
    fine = EstimatorResult.from_samples(
        martingale_values(phi, F, starts, horizon, 0.5 * dt, seed, first_stream=len(starts)),
        target=0.0,
    )
    report = MartingaleReport(coarse=coarse, fine=fine, consistent=consistent(coarse, fine))
    LOG.info(
        f"martingale test: z(dt)={coarse.z_score:.3f}, z(dt/2)={fine.z_score:.3f}, "
        f"consistent={report.consistent}"
    )
    return report


def bonferroni_threshold(m: int, threshold: float = Z_THRESHOLD) -> float:
    """
    Per-comparison |z| cutoff keeping the family-wise level of a single |z| < threshold test.
    """
    alpha = 2.0 * stats.norm.sf(threshold)
    return float(stats.norm.isf(alpha / (2.0 * m)))


class InvarianceReport(BaseModel):
    bin_edges: List[float]
    bin_z: List[float]
    energy: EstimatorResult
    z_critical: float
    count_test: Optional[CountTestResult] = None

    @property
    def passed(self) -> bool:
        ok = all(abs(z) < self.z_critical for z in self.bin_z)
        ok = ok and abs(self.energy.z_score or 0.0) < self.z_critical
        if self.count_test is not None:
            ok = ok and self.count_test.passed
        return ok


def _pair_histogram(gamma: Configuration, edges: np.ndarray) -> np.ndarray:
    _, _, _, r = neighbour_pairs(gamma.points, gamma.dom, float(edges[-1]))
    hist, _ = np.histogram(r, bins=edges)
    return hist.astype(float)


def invariance_test(
    spec: GibbsSpec,
    samples: Sequence[Configuration],
    horizon: float,
    dt: float,
    bins: Sequence[float],
    seed: int = 0,
    count_window: Optional[Window] = None,
    first_stream: int = 0,
) -> InvarianceReport:
    """
    Evolve torus Gibbs samples by the interacting dynamics and compare, per
    sample, pair-distance histograms and energies before and after
    (Bonferroni-adjusted paired z-scores). For the zero potential the counts
    in `count_window` after evolution are also tested against Poisson.
    """
    if not spec.window.is_whole(spec.dom) or spec.boundary is not None:
        raise ValueError("invariance is tested for the torus Gibbs measure (whole box, no boundary)")
    edges = np.asarray(bins, dtype=float)
    phi = spec.potential
    n_steps = int(round(horizon / dt)) if horizon > 0 else 0
    before = np.stack([_pair_histogram(g, edges) for g in samples])
    energy_before = np.array([total_energy(phi, g) for g in samples])
    evolved: List[Configuration] = []
    for gamma, rng in zip(samples, rngs.streams(seed, len(samples), first_stream)):
        for _ in range(n_steps):
            gamma = interacting_step(phi, gamma, dt, rng)
        evolved.append(gamma)
    after = np.stack([_pair_histogram(g, edges) for g in evolved])
    energy_after = np.array([total_energy(phi, g) for g in evolved])

    diffs = after - before
    bin_z = [EstimatorResult.from_samples(diffs[:, b], target=0.0).z_score for b in range(diffs.shape[1])]
    energy = EstimatorResult.from_samples(energy_after - energy_before, target=0.0)
    count_test = None
    if isinstance(phi, ZeroPotential) and count_window is not None:
        counts = [int(np.count_nonzero(count_window.contains(g.points))) for g in evolved]
        count_test = poisson_count_test(counts, spec.z * count_window.volume)
    report = InvarianceReport(
        bin_edges=edges.tolist(),
        bin_z=bin_z,
        energy=energy,
        z_critical=bonferroni_threshold(len(bin_z) + 1),
        count_test=count_test,
    )
    LOG.info(f"invariance test over {len(samples)} samples, horizon {horizon}: passed={report.passed}")
    return report
