"""
Named verification suites.

A suite is a list of tasks. Sharded tasks run once per shard (`verify.shards`
in the configuration, independent of the worker count), each shard drawing
from its own streams, and their identity results are merged in shard order.
Whole tasks run once. Every task yields `Outcome` records.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from confspace import rng as rngs
from confspace.calculus import (
    BumpCombination,
    BumpVectorField,
    CylinderFunction,
    Polynomial,
    VectorField,
    as_combination,
    bump,
)
from confspace.config import RunConfig
from confspace.configuration import Configuration, count, pair
from confspace.domain import TorusDomain, Window, distance
from confspace.dynamics import (
    InvarianceReport,
    heat_semigroup_test,
    invariance_test,
    laplace_functional_test,
    martingale_values,
)
from confspace.gibbs import GibbsSpec, McmcParams, canonical_sample, gc_sample
from confspace.intensity import (
    MixingLaw,
    UniformIntensity,
    laplace_transform_target,
    mixed_laplace_transform_target,
    pairing_moments,
    sample_mixed_poisson,
    sample_poisson,
    window_mass,
)
from confspace.potential import (
    HardCorePotential,
    PotentialBase,
    ZeroPotential,
    conditional_energy,
)
from confspace.verify import (
    Z_THRESHOLD,
    CountTimesIndicator,
    CylinderWeightedIndicator,
    EstimatorResult,
    IdentityResult,
    WindowIndicator,
    consistent,
    ibp_test,
    mecke_test,
    merge_identity,
    poisson_count_test,
    volume_element_test,
)

LOG = logging.getLogger("confspace")

POWER_THRESHOLD = 6.0
CANONICAL_TV_LIMIT = 0.02
CONDITIONING_TV_LIMIT = 0.05
_MAX_BATCHES = 20
_CANONICAL_BINS = 10
_CANONICAL_REFERENCE_PAIRS = 1_000_000
_CONDITIONING_BINS = 8
_CONDITIONING_MIN_SAMPLES = 10
# phi(r) above this marks a pair inside the repulsive core.
_CORE_ENERGY = 3.0
_POWER_BURN_IN = 10_000

# Stream ids of different tasks never overlap: each task owns a block.
_STREAM_BLOCK = 1 << 32

ShardRun = Callable[[RunConfig, int], Dict[str, IdentityResult]]


class Outcome(BaseModel):
    """
    One line of a suite report.
    """

    test: str
    n: int
    mean: float
    stderr: float
    target: Optional[float] = None
    z: Optional[float] = None
    passed: bool
    detail: Dict[str, Any] = {}

    @classmethod
    def from_identity(cls, result: IdentityResult) -> "Outcome":
        s = result.statistic
        detail: Dict[str, Any] = {}
        if result.rejections:
            detail["rejections"] = result.rejections
        if result.lhs is not None and result.rhs is not None:
            detail["lhs"] = result.lhs.mean
            detail["rhs"] = result.rhs.mean
        return cls(
            test=result.test,
            n=s.n_samples,
            mean=s.mean,
            stderr=s.std_error,
            target=s.target,
            z=s.z_score,
            passed=result.passed,
            detail=detail,
        )

    def to_record(self, params_hash: str, seed: int) -> Dict[str, Any]:
        return {
            "test": self.test,
            "params_hash": params_hash,
            "seed": seed,
            "n": self.n,
            "mean": self.mean,
            "stderr": self.stderr,
            "target": self.target,
            "z": self.z,
            "pass": self.passed,
            **self.detail,
        }


class SuiteTask(BaseModel):
    """
    `per_shard` maps (config, shard) to named identity results; `finalize`
    turns the merged results into outcomes. `whole` runs unsharded.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str
    per_shard: Optional[ShardRun] = None
    finalize: Optional[Callable[[RunConfig, Dict[str, IdentityResult]], List[Outcome]]] = None
    whole: Optional[Callable[[RunConfig], List[Outcome]]] = None


def _stream_id(task: int, offset: int = 0) -> int:
    return task * _STREAM_BLOCK + offset


def _shard_rng(config: RunConfig, task: int, shard: int) -> np.random.Generator:
    return rngs.stream(config.run.seed, _stream_id(task, shard))


def _batches(n: int) -> int:
    return max(2, min(_MAX_BATCHES, n))


def _named(result: IdentityResult, name: str) -> IdentityResult:
    return result.model_copy(update={"test": name})


def _estimate(name: str, values: np.ndarray, target: float) -> IdentityResult:
    return IdentityResult(test=name, statistic=EstimatorResult.from_samples(values, target=target))


def _center(window: Window, dom: TorusDomain) -> Tuple[float, ...]:
    return tuple(float(c) % dom.L for c in 0.5 * (window.lower_array + window.upper_array))


def _side(window: Window) -> float:
    return float(np.min(window.upper_array - window.lower_array))


def _test_field(window: Window, dom: TorusDomain, amplitude: float = 1.0) -> BumpCombination:
    """
    A bump centred in the window, supported well inside it.
    """
    radius = min(0.25 * _side(window), 0.45 * dom.L)
    return as_combination(bump(_center(window, dom), radius, dom, amplitude))


def _mecke_window(config: RunConfig) -> Window:
    window = config.obs_window()
    side = min(config.verify.mecke_side, _side(window))
    lower = tuple(window.lower)
    return Window(lower=lower, upper=tuple(lo + side for lo in lower))


# Gibbs samples are reused by several tasks of the same process.
_GIBBS_CACHE: Dict[Tuple[str, int], List[Configuration]] = {}
_GIBBS_TASK = 1


def gibbs_shard(config: RunConfig, shard: int) -> List[Configuration]:
    """
    Thinned grand canonical samples of the configured specification for one shard.
    """
    key = (config.config_hash(), shard)
    if key not in _GIBBS_CACHE:
        params = config.mcmc_params().model_copy(
            update={"n_samples": config.verify.shard_size("gibbs_samples", shard)}
        )
        LOG.debug(f"gibbs shard {shard}: sampling {params.n_samples} configurations")
        _GIBBS_CACHE[key] = gc_sample(config.gibbs_spec(), params, _shard_rng(config, _GIBBS_TASK, shard))
    return _GIBBS_CACHE[key]


def gibbs_pool(config: RunConfig, n: int) -> List[Configuration]:
    """
    The first n Gibbs samples, taken from shards in order.
    """
    pool: List[Configuration] = []
    for shard in range(config.verify.shards):
        if len(pool) >= n:
            break
        pool.extend(gibbs_shard(config, shard))
    return pool[:n]


def _cycle(samples: List[Configuration], n: int) -> List[Configuration]:
    return [samples[k % len(samples)] for k in range(n)]


# poisson-identities


def poisson_identities_shard(config: RunConfig, shard: int) -> Dict[str, IdentityResult]:
    dom, window, sigma, law = config.dom(), config.obs_window(), config.sigma(), config.law()
    n = config.verify.shard_size("poisson_samples", shard)
    f = _test_field(window, dom)
    f_neg = f.scaled(-1.0)
    rng = _shard_rng(config, 2, shard)
    plain = np.array([pair(f, sample_poisson(sigma, window, dom, rng)) for _ in range(n)])
    plain_neg = np.array([pair(f_neg, sample_poisson(sigma, window, dom, rng)) for _ in range(n)])
    mixed = np.array([pair(f, sample_mixed_poisson(law, sigma, window, dom, rng)[1]) for _ in range(n)])
    mixed_neg = np.array(
        [pair(f_neg, sample_mixed_poisson(law, sigma, window, dom, rng)[1]) for _ in range(n)]
    )
    m1, m2 = pairing_moments(f, sigma, window)
    k1, k2 = pairing_moments(f, sigma, window, law)
    return {
        "laplace-transform": _estimate(
            "laplace-transform", np.exp(plain_neg), laplace_transform_target(f_neg, sigma, window).value
        ),
        "first-moment": _estimate("first-moment", plain, m1),
        "second-moment": _estimate("second-moment", plain**2, m2),
        "mixed-laplace-transform": _estimate(
            "mixed-laplace-transform",
            np.exp(mixed_neg),
            mixed_laplace_transform_target(law, f_neg, sigma, window).value,
        ),
        "mixed-first-moment": _estimate("mixed-first-moment", mixed, k1),
        "mixed-second-moment": _estimate("mixed-second-moment", mixed**2, k2),
    }


def poisson_counts(config: RunConfig) -> List[Outcome]:
    dom, window, sigma = config.dom(), config.obs_window(), config.sigma()
    box = _mecke_window(config)
    rng = rngs.stream(config.run.seed, _stream_id(3))
    n = config.verify.size("poisson_samples")
    counts = [count(box, sample_poisson(sigma, window, dom, rng)) for _ in range(n)]
    expected = window_mass(sigma, box)
    result = poisson_count_test(counts, expected)
    return [
        Outcome(
            test="poisson-count-law",
            n=n,
            mean=float(np.mean(counts)),
            stderr=float(np.std(counts, ddof=1) / math.sqrt(n)),
            target=expected,
            passed=result.passed,
            detail={"chi2": result.statistic, "dof": result.dof, "p_value": result.p_value},
        )
    ]


# mecke


def mecke_poisson_shard(config: RunConfig, shard: int) -> Dict[str, IdentityResult]:
    dom, window, sigma = config.dom(), config.obs_window(), config.sigma()
    box = _mecke_window(config)
    rng = _shard_rng(config, 4, shard)
    n = config.verify.shard_size("poisson_samples", shard)
    samples = [sample_poisson(sigma, window, dom, rng) for _ in range(n)]
    phi = ZeroPotential()
    return {
        "mecke-poisson-window": _named(
            mecke_test(samples, sigma, phi, WindowIndicator(box)), "mecke-poisson-window"
        ),
        "mecke-poisson-count": _named(
            mecke_test(samples, sigma, phi, CountTimesIndicator(box)), "mecke-poisson-count"
        ),
    }


def _mecke_cylinder(config: RunConfig) -> CylinderWeightedIndicator:
    dom, box = config.dom(), _mecke_window(config)
    F = CylinderFunction.linear(_test_field(box, dom)).tanh() + 1.0
    return CylinderWeightedIndicator(F, BumpCombination(constant=1.0), box)


def mecke_gibbs_shard(config: RunConfig, shard: int) -> Dict[str, IdentityResult]:
    samples = gibbs_shard(config, shard)
    sigma = UniformIntensity(z=config.intensity.z)
    phi = config.phi()
    h = _mecke_cylinder(config)
    batches = _batches(len(samples))
    options = dict(panels=4, quad_rtol=1e-3, batches=batches)
    return {
        "mecke-gibbs": _named(mecke_test(samples, sigma, phi, h, **options), "mecke-gibbs"),
        "mecke-gibbs-power": _named(
            mecke_test(samples, sigma, phi, h, drop_boltzmann=True, **options), "mecke-gibbs-power"
        ),
    }


def mecke_gibbs_finalize(config: RunConfig, merged: Dict[str, IdentityResult]) -> List[Outcome]:
    """
    The power check passes when dropping the Boltzmann factor is detected.
    """
    ordinary = Outcome.from_identity(merged["mecke-gibbs"])
    power = Outcome.from_identity(merged["mecke-gibbs-power"])
    power.passed = power.z is not None and abs(power.z) > POWER_THRESHOLD
    power.detail["required_abs_z"] = POWER_THRESHOLD
    return [ordinary, power]


# gibbs


def gibbs_free_count(config: RunConfig) -> List[Outcome]:
    """
    With the zero potential the grand canonical chain samples Poisson(z vol) counts.
    """
    spec = config.gibbs_spec().model_copy(update={"potential": ZeroPotential()})
    params = config.mcmc_params().model_copy(update={"n_samples": config.verify.size("gibbs_samples")})
    samples = gc_sample(spec, params, rngs.stream(config.run.seed, _stream_id(5)))
    counts = [gamma.n for gamma in samples]
    expected = spec.z * spec.window.volume
    result = poisson_count_test(counts, expected)
    return [
        Outcome(
            test="gibbs-free-count-law",
            n=len(counts),
            mean=float(np.mean(counts)),
            stderr=float(np.std(counts, ddof=1) / math.sqrt(len(counts))),
            target=expected,
            passed=result.passed,
            detail={"chi2": result.statistic, "dof": result.dof, "p_value": result.p_value},
        )
    ]


def gibbs_single_slot(config: RunConfig) -> List[Outcome]:
    """
    A hard core wider than the window diagonal admits at most one point, so
    the occupancy probability is z vol / (1 + z vol).
    """
    dom = config.dom()
    side = min(0.5, 0.25 * dom.L)
    window = Window(lower=(0.0,) * dom.d, upper=(side,) * dom.d)
    spec = GibbsSpec(
        z=1.0 / window.volume,
        potential=HardCorePotential(R=2.0 * side * math.sqrt(dom.d)),
        window=window,
        dom=dom,
    )
    n = config.verify.size("gibbs_samples")
    params = McmcParams(burn_in=1000, thinning=10, n_samples=n, seed=config.run.seed)
    samples = gc_sample(spec, params, rngs.stream(config.run.seed, _stream_id(6)))
    zv = spec.z * window.volume
    result = IdentityResult(
        test="gibbs-single-slot-occupancy",
        statistic=EstimatorResult.from_samples(
            [gamma.n for gamma in samples], target=zv / (1.0 + zv), batches=_batches(n)
        ),
    )
    return [Outcome.from_identity(result)]


def _canonical_reference(
    spec: GibbsSpec, edges: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    x = spec.window.uniform(rng, _CANONICAL_REFERENCE_PAIRS)
    y = spec.window.uniform(rng, _CANONICAL_REFERENCE_PAIRS)
    r = distance(x, y, spec.dom)
    weights = np.exp(-np.asarray(spec.potential.eval(r), dtype=float))
    hist, _ = np.histogram(r, bins=edges, weights=weights)
    return hist / hist.sum()


def gibbs_canonical_pair(config: RunConfig) -> List[Outcome]:
    """
    Two points in a small window: the chain's pair-distance law against
    uniform pairs reweighted by exp(-phi(r)).
    """
    dom, phi = config.dom(), config.phi()
    side = min(1.5, 0.25 * dom.L)
    window = Window(lower=(0.0,) * dom.d, upper=(side,) * dom.d)
    spec = GibbsSpec(z=1.0, potential=phi, window=window, dom=dom)
    n = 2 * config.verify.size("gibbs_samples")
    params = McmcParams(burn_in=10_000, thinning=20, n_samples=n, seed=config.run.seed)
    samples = canonical_sample(spec, 2, params, rngs.stream(config.run.seed, _stream_id(7)))
    edges = np.linspace(0.0, side * math.sqrt(dom.d), _CANONICAL_BINS + 1)
    r = np.array([distance(g.points[0], g.points[1], dom) for g in samples])
    observed, _ = np.histogram(r, bins=edges)
    reference = _canonical_reference(spec, edges, rngs.stream(config.run.seed, _stream_id(7, 1)))
    tv = 0.5 * float(np.sum(np.abs(observed / observed.sum() - reference)))
    return [
        Outcome(
            test="gibbs-canonical-pair-law",
            n=n,
            mean=tv,
            stderr=0.0,
            passed=tv <= CANONICAL_TV_LIMIT,
            detail={"total_variation": tv, "limit": CANONICAL_TV_LIMIT},
        )
    ]


def gibbs_energy_halves(config: RunConfig) -> List[Outcome]:
    """
    Stationarity: mean energy over the first and second half of the samples agree.
    """
    samples = gibbs_pool(config, config.verify.size("gibbs_samples"))
    phi, window = config.phi(), config.obs_window()
    energies = np.array([conditional_energy(phi, g, window).total for g in samples])
    half = len(energies) // 2
    first = EstimatorResult.from_samples(energies[:half], batches=_batches(half))
    second = EstimatorResult.from_samples(energies[half:], batches=_batches(len(energies) - half))
    pooled = math.sqrt(first.std_error**2 + second.std_error**2)
    diff = second.mean - first.mean
    return [
        Outcome(
            test="gibbs-energy-halves",
            n=len(energies),
            mean=diff,
            stderr=pooled,
            target=0.0,
            z=diff / pooled if pooled > 0 else 0.0,
            passed=consistent(first, second),
            detail={"first_half": first.mean, "second_half": second.mean},
        )
    ]


def _pair_distance_law(samples: List[Configuration], edges: np.ndarray) -> np.ndarray:
    hist = np.zeros(len(edges) - 1)
    for gamma in samples:
        if gamma.n < 2:
            continue
        i, j = np.triu_indices(gamma.n, k=1)
        hist += np.histogram(distance(gamma.points[i], gamma.points[j], gamma.dom), bins=edges)[0]
    total = hist.sum()
    return hist / total if total > 0 else hist


def gibbs_conditioning(config: RunConfig) -> List[Outcome]:
    """
    Grand canonical samples with n points against the canonical chain at n:
    total variation of the pair-distance laws, for every well populated n.
    """
    spec, dom = config.gibbs_spec(), config.dom()
    pool = gibbs_pool(config, config.verify.size("gibbs_samples"))
    edges = np.linspace(0.0, 0.5 * dom.L * math.sqrt(dom.d), _CONDITIONING_BINS + 1)
    by_count: Dict[int, List[Configuration]] = {}
    for gamma in pool:
        by_count.setdefault(gamma.n, []).append(gamma)
    smallest = max(_CONDITIONING_MIN_SAMPLES, int(0.1 * len(pool)))
    populated = sorted(n for n, group in by_count.items() if n >= 2 and len(group) >= smallest)
    base = config.mcmc_params()
    tv: Dict[str, float] = {}
    for n in populated:
        group = by_count[n]
        params = base.model_copy(
            update={"n_samples": len(group), "thinning": max(5 * n, base.thinning // 10)}
        )
        canonical = canonical_sample(spec, n, params, rngs.stream(config.run.seed, _stream_id(20, n)))
        diff = _pair_distance_law(group, edges) - _pair_distance_law(canonical, edges)
        tv[str(n)] = 0.5 * float(np.sum(np.abs(diff)))
    worst = max(tv.values()) if tv else 0.0
    if not tv:
        LOG.warning(f"no point count holds {smallest} grand canonical samples; conditioning not checked")
    return [
        Outcome(
            test="gibbs-conditioning",
            n=len(pool),
            mean=worst,
            stderr=0.0,
            passed=bool(tv) and worst <= CONDITIONING_TV_LIMIT,
            detail={"total_variation_by_count": tv, "limit": CONDITIONING_TV_LIMIT},
        )
    ]


def core_pair_share(samples: List[Configuration], phi: PotentialBase) -> np.ndarray:
    """
    Per sample with at least two points, the share of pairs with phi(r) above `_CORE_ENERGY`.
    """
    shares = []
    for gamma in samples:
        if gamma.n < 2:
            continue
        i, j = np.triu_indices(gamma.n, k=1)
        energies = np.asarray(phi.eval(distance(gamma.points[i], gamma.points[j], gamma.dom)), dtype=float)
        shares.append(float(np.mean(energies > _CORE_ENERGY)))
    return np.array(shares)


def gibbs_detailed_balance_power(config: RunConfig) -> List[Outcome]:
    """
    A chain that accepts every proposal breaks detailed balance and fills the
    repulsive core uniformly; the check passes when its core pair share is
    told apart from the Gibbs samples by more than the power threshold.
    """
    spec, phi = config.gibbs_spec(), config.phi()
    n = config.verify.size("gibbs_samples")
    broken = McmcParams(
        p_birth=config.mcmc.p_birth,
        p_death=config.mcmc.p_death,
        p_move=config.mcmc.p_move,
        burn_in=_POWER_BURN_IN,
        thinning=10,
        n_samples=n,
        seed=config.run.seed,
        force_accept=True,
    )
    forced = core_pair_share(gc_sample(spec, broken, rngs.stream(config.run.seed, _stream_id(21))), phi)
    reference = core_pair_share(gibbs_pool(config, n), phi)
    if len(forced) < 2 or len(reference) < 2:
        raise ValueError("detailed balance power check needs samples with at least two points")
    a = EstimatorResult.from_samples(forced, batches=_batches(len(forced)))
    b = EstimatorResult.from_samples(reference, batches=_batches(len(reference)))
    pooled = math.sqrt(a.std_error**2 + b.std_error**2)
    diff = a.mean - b.mean
    z = diff / pooled if pooled > 0 else 0.0
    return [
        Outcome(
            test="gibbs-detailed-balance-power",
            n=len(forced),
            mean=diff,
            stderr=pooled,
            target=0.0,
            z=z,
            passed=abs(z) > POWER_THRESHOLD,
            detail={"forced_share": a.mean, "gibbs_share": b.mean, "required_abs_z": POWER_THRESHOLD},
        )
    ]


# ibp


def ibp_triples(
    window: Window, dom: TorusDomain
) -> List[Tuple[CylinderFunction, CylinderFunction, VectorField]]:
    """
    Three (F, G, v) triples built from bumps inside the window.
    """
    side = _side(window)
    center = np.array(_center(window, dom))
    radius = min(0.2 * side, 0.45 * dom.L)
    shift = np.zeros(dom.d)
    shift[0] = 0.15 * side
    f1 = as_combination(bump(tuple(center % dom.L), radius, dom))
    f2 = as_combination(bump(tuple((center + shift) % dom.L), radius, dom))
    e_first = np.eye(dom.d)[0]
    e_last = np.eye(dom.d)[-1]
    diagonal = np.ones(dom.d) / math.sqrt(dom.d)
    one = CylinderFunction(Polynomial.constant(1.0), [f1])
    linear1, linear2 = CylinderFunction.linear(f1), CylinderFunction.linear(f2)
    return [
        (linear1.tanh(), one, BumpVectorField.along(f2, e_first)),
        (linear1.tanh(), linear2.tanh(), BumpVectorField.along(f1, diagonal)),
        (
            linear1 * linear2.tanh(),
            CylinderFunction.linear(f1 + f2).tanh(),
            BumpVectorField.along(f2, e_last) + BumpVectorField.along(f1, e_first),
        ),
    ]


def ibp_free_shard(config: RunConfig, shard: int) -> Dict[str, IdentityResult]:
    dom, window = config.dom(), config.obs_window()
    uniform = UniformIntensity(z=config.intensity.z)
    density = config.intensity.build_density(dom)
    law = config.law()
    n = config.verify.shard_size("ibp_samples", shard)
    rng = _shard_rng(config, 8, shard)
    plain = [sample_poisson(uniform, window, dom, rng) for _ in range(n)]
    weighted = [sample_poisson(density, window, dom, rng) for _ in range(n)]
    mixed = [sample_mixed_poisson(law, uniform, window, dom, rng)[1] for _ in range(n)]
    triples = ibp_triples(window, dom)
    out: Dict[str, IdentityResult] = {}
    for k, (F, G, v) in enumerate(triples, start=1):
        out[f"ibp-free-{k}"] = _named(ibp_test(plain, None, F, G, v), f"ibp-free-{k}")
        out[f"ibp-density-{k}"] = _named(
            ibp_test(weighted, None, F, G, v, sigma=density), f"ibp-density-{k}"
        )
    (F1, _, v1), (F2, _, v2), (F3, _, _) = triples
    out["volume-element-mixed"] = _named(
        volume_element_test(mixed, [(F1, v1), (F2, v2)], F3), "volume-element-mixed"
    )
    return out


def ibp_gibbs_shard(config: RunConfig, shard: int) -> Dict[str, IdentityResult]:
    samples = gibbs_shard(config, shard)
    phi = config.phi()
    batches = _batches(len(samples))
    out: Dict[str, IdentityResult] = {}
    for k, (F, G, v) in enumerate(ibp_triples(config.obs_window(), config.dom()), start=1):
        out[f"ibp-gibbs-{k}"] = _named(ibp_test(samples, phi, F, G, v, batches=batches), f"ibp-gibbs-{k}")
    return out


# semigroup


def _semigroup_fields(dom: TorusDomain) -> Tuple[BumpCombination, BumpCombination]:
    whole = Window.whole(dom)
    f1 = _test_field(whole, dom, amplitude=-0.5)
    shifted = np.array(_center(whole, dom))
    shifted[0] += 0.1 * dom.L
    f2 = as_combination(bump(tuple(shifted % dom.L), 0.2 * dom.L, dom, amplitude=-0.3))
    return f1, f2


def semigroup_shard(config: RunConfig, shard: int) -> Dict[str, IdentityResult]:
    dom, law = config.dom(), config.law()
    v = config.verify
    f1, f2 = _semigroup_fields(dom)
    systems = v.shard_size("semigroup_systems", shard)
    particles = v.shard_size("semigroup_particles", shard)
    seed = config.run.seed
    single = laplace_functional_test(
        law, [f1], [0.05], dom, systems, particles, seed, _stream_id(9, 2 * shard)
    )
    double = laplace_functional_test(
        law, [f1, f2], [0.02, 0.05], dom, systems, particles, seed, _stream_id(10, 2 * shard)
    )
    poisson = MixingLaw.dirac(config.intensity.z)
    poisson_single = laplace_functional_test(
        poisson, [f1], [0.05], dom, systems, particles, seed, _stream_id(18, 2 * shard)
    )
    poisson_double = laplace_functional_test(
        poisson, [f1, f2], [0.02, 0.05], dom, systems, particles, seed, _stream_id(19, 2 * shard)
    )
    n_start = 5
    start = Configuration(
        (np.array(_center(Window.whole(dom), dom)) + np.outer(np.arange(n_start), np.full(dom.d, 0.3)))
        % dom.L,
        dom,
    )
    fixed = heat_semigroup_test(
        f1, start, 0.05, v.shard_size("semigroup_paths", shard), seed, _stream_id(11, shard)
    )
    return {
        "laplace-functional-1": _named(single, "laplace-functional-1"),
        "laplace-functional-2": _named(double, "laplace-functional-2"),
        "laplace-functional-poisson-1": _named(poisson_single, "laplace-functional-poisson-1"),
        "laplace-functional-poisson-2": _named(poisson_double, "laplace-functional-poisson-2"),
        "heat-semigroup": fixed,
    }


# martingale


def _martingale_function(config: RunConfig) -> CylinderFunction:
    dom = config.dom()
    window = config.obs_window()
    return CylinderFunction.linear(_test_field(window, dom, amplitude=0.5)).tanh()


def _martingale_pair(
    config: RunConfig,
    phi: PotentialBase,
    starts: List[Configuration],
    task: int,
    shard: int,
    name: str,
) -> Dict[str, IdentityResult]:
    v = config.verify
    F = _martingale_function(config)
    offset = _stream_id(task, 2 * sum(v.shard_size("martingale_paths", s) for s in range(shard)))
    coarse = martingale_values(phi, F, starts, v.martingale_horizon, v.martingale_dt, config.run.seed, offset)
    fine = martingale_values(
        phi, F, starts, v.martingale_horizon, 0.5 * v.martingale_dt, config.run.seed, offset + len(starts)
    )
    return {
        f"{name}-dt": _estimate(f"{name}-dt", coarse, 0.0),
        f"{name}-dt-half": _estimate(f"{name}-dt-half", fine, 0.0),
    }


def martingale_free_shard(config: RunConfig, shard: int) -> Dict[str, IdentityResult]:
    dom, window, sigma = config.dom(), config.obs_window(), config.sigma()
    rng = _shard_rng(config, 12, shard)
    n = config.verify.shard_size("martingale_paths", shard)
    starts = [sample_poisson(sigma, window, dom, rng) for _ in range(n)]
    return _martingale_pair(config, ZeroPotential(), starts, 13, shard, "martingale-free")


def martingale_gibbs_shard(config: RunConfig, shard: int) -> Dict[str, IdentityResult]:
    n = config.verify.shard_size("martingale_paths", shard)
    starts = _cycle(gibbs_shard(config, shard), n)
    return _martingale_pair(config, config.phi(), starts, 14, shard, "martingale-interacting")


def martingale_finalize(config: RunConfig, merged: Dict[str, IdentityResult]) -> List[Outcome]:
    """
    Each step size must pass on its own and the two must agree.
    """
    outcomes = [Outcome.from_identity(r) for r in merged.values()]
    names = sorted({name[: -len("-dt")] for name in merged if name.endswith("-dt")})
    for name in names:
        coarse, fine = merged[f"{name}-dt"].statistic, merged[f"{name}-dt-half"].statistic
        pooled = math.sqrt(coarse.std_error**2 + fine.std_error**2)
        diff = coarse.mean - fine.mean
        outcomes.append(
            Outcome(
                test=f"{name}-step-consistency",
                n=coarse.n_samples,
                mean=diff,
                stderr=pooled,
                target=0.0,
                z=diff / pooled if pooled > 0 else 0.0,
                passed=consistent(coarse, fine, Z_THRESHOLD),
            )
        )
    return outcomes


# invariance


def _invariance_outcome(name: str, report: InvarianceReport) -> Outcome:
    detail: Dict[str, Any] = {
        "max_abs_bin_z": max((abs(z) for z in report.bin_z), default=0.0),
        "z_critical": report.z_critical,
    }
    if report.count_test is not None:
        detail["count_p_value"] = report.count_test.p_value
    return Outcome(
        test=name,
        n=report.energy.n_samples,
        mean=report.energy.mean,
        stderr=report.energy.std_error,
        target=0.0,
        z=report.energy.z_score,
        passed=report.passed,
        detail=detail,
    )


def invariance_gibbs(config: RunConfig) -> List[Outcome]:
    v = config.verify
    samples = gibbs_pool(config, v.size("invariance_samples"))
    report = invariance_test(
        config.gibbs_spec(),
        samples,
        v.invariance_horizon,
        v.invariance_dt,
        config.correlation.edges(),
        seed=config.run.seed,
        first_stream=_stream_id(15),
    )
    return [_invariance_outcome("invariance-gibbs", report)]


def invariance_free(config: RunConfig) -> List[Outcome]:
    v = config.verify
    dom = config.dom()
    spec = GibbsSpec(z=config.intensity.z, potential=ZeroPotential(), window=Window.whole(dom), dom=dom)
    rng = rngs.stream(config.run.seed, _stream_id(16))
    uniform = UniformIntensity(z=spec.z)
    samples = [sample_poisson(uniform, spec.window, dom, rng) for _ in range(v.size("invariance_samples"))]
    report = invariance_test(
        spec,
        samples,
        v.invariance_horizon,
        v.invariance_dt,
        config.correlation.edges(),
        seed=config.run.seed,
        count_window=_mecke_window(config),
        first_stream=_stream_id(17),
    )
    return [_invariance_outcome("invariance-free", report)]


SUITES: Dict[str, List[SuiteTask]] = {
    "poisson-identities": [
        SuiteTask(name="poisson-moments", per_shard=poisson_identities_shard),
        SuiteTask(name="poisson-count-law", whole=poisson_counts),
    ],
    "mecke": [
        SuiteTask(name="mecke-poisson", per_shard=mecke_poisson_shard),
        SuiteTask(name="mecke-gibbs", per_shard=mecke_gibbs_shard, finalize=mecke_gibbs_finalize),
    ],
    "gibbs": [
        SuiteTask(name="gibbs-free-count-law", whole=gibbs_free_count),
        SuiteTask(name="gibbs-single-slot-occupancy", whole=gibbs_single_slot),
        SuiteTask(name="gibbs-canonical-pair-law", whole=gibbs_canonical_pair),
        SuiteTask(name="gibbs-energy-halves", whole=gibbs_energy_halves),
        SuiteTask(name="gibbs-conditioning", whole=gibbs_conditioning),
        SuiteTask(name="gibbs-detailed-balance-power", whole=gibbs_detailed_balance_power),
    ],
    "ibp": [
        SuiteTask(name="ibp-free", per_shard=ibp_free_shard),
        SuiteTask(name="ibp-gibbs", per_shard=ibp_gibbs_shard),
    ],
    "semigroup": [SuiteTask(name="semigroup", per_shard=semigroup_shard)],
    "martingale": [
        SuiteTask(name="martingale-free", per_shard=martingale_free_shard, finalize=martingale_finalize),
        SuiteTask(
            name="martingale-interacting", per_shard=martingale_gibbs_shard, finalize=martingale_finalize
        ),
    ],
    "invariance": [
        SuiteTask(name="invariance-gibbs", whole=invariance_gibbs),
        SuiteTask(name="invariance-free", whole=invariance_free),
    ],
}

SUITE_NAMES = list(SUITES) + ["all"]


def _run_shards(config: RunConfig, run: ShardRun) -> List[Dict[str, IdentityResult]]:
    shards = list(range(config.verify.shards))
    if config.run.workers > 1:
        with ProcessPoolExecutor(max_workers=config.run.workers) as pool:
            return list(pool.map(run, [config] * len(shards), shards))
    return [run(config, shard) for shard in shards]


def run_task(config: RunConfig, task: SuiteTask) -> List[Outcome]:
    LOG.info(f"Running {task.name}")
    if task.whole is not None:
        return task.whole(config)
    if task.per_shard is None:
        raise ValueError(f"task {task.name} has nothing to run")
    parts = _run_shards(config, task.per_shard)
    merged = {name: merge_identity([part[name] for part in parts]) for name in parts[0]}
    if task.finalize is not None:
        return task.finalize(config, merged)
    return [Outcome.from_identity(result) for result in merged.values()]


def run_suite(config: RunConfig, suite: str) -> List[Outcome]:
    """
    Run a named suite ("all" runs every suite in order).
    """
    if suite == "all":
        names = list(SUITES)
    elif suite in SUITES:
        names = [suite]
    else:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITE_NAMES)}")
    outcomes: List[Outcome] = []
    for name in names:
        LOG.info(f"Suite {name}: {len(SUITES[name])} tasks, {config.verify.shards} shards")
        for task in SUITES[name]:
            for outcome in run_task(config, task):
                LOG.info(
                    f"  {outcome.test}: z={outcome.z if outcome.z is not None else float('nan'):.3f} "
                    f"{'pass' if outcome.passed else 'FAIL'}"
                )
                outcomes.append(outcome)
    return outcomes
