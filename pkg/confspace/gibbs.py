"""
Markov chain samplers for finite-window Gibbs specifications.

The grand canonical chain mixes births, deaths and Gaussian moves; the
canonical chain only moves points, so the count never changes. Acceptance
ratios only involve energy differences, and every energy difference includes
the interaction with the frozen boundary configuration.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import special

from confspace import rng as rngs
from confspace.configuration import Configuration, concatenate
from confspace.domain import Point, TorusDomain, Window, distance, wrap
from confspace.potential import PairPotential, conditional_energy, point_energies

LOG = logging.getLogger("confspace")

_FEASIBLE_START_RESTARTS = 200
_FEASIBLE_POINT_ATTEMPTS = 1000
_REFERENCE_PAIRS = 400_000
# stream id of the fixed reference draws used to normalise subwindow pair counts
_REFERENCE_STREAM = 7


class GibbsSpec(BaseModel):
    """
    Activity z, pair potential, window and frozen boundary configuration of a
    finite-volume Gibbs specification on a torus.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    z: float = Field(default=1.0, gt=0, allow_inf_nan=False)
    potential: PairPotential
    window: Window
    dom: TorusDomain
    boundary: Optional[Configuration] = None

    @model_validator(mode="after")
    def _check_boundary(self) -> "GibbsSpec":
        self.window.check(self.dom)
        if self.boundary is not None:
            if self.boundary.dom != self.dom:
                raise ValueError("boundary configuration lives on a different domain")
            if self.boundary.n and np.any(self.window.contains(self.boundary.points)):
                raise ValueError("boundary configuration has points inside the window")
        return self

    @property
    def boundary_points(self) -> np.ndarray:
        if self.boundary is None:
            return np.empty((0, self.dom.d))
        return self.boundary.points


class McmcParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    p_birth: float = Field(default=0.35, ge=0, le=1)
    p_death: float = Field(default=0.35, ge=0, le=1)
    p_move: float = Field(default=0.30, ge=0, le=1)
    move_scale: Optional[float] = Field(default=None, gt=0)
    burn_in: int = Field(default=100_000, ge=0)
    thinning: int = Field(default=1000, ge=1)
    n_samples: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0)
    force_accept: bool = False

    @model_validator(mode="after")
    def _check_probabilities(self) -> "McmcParams":
        total = self.p_birth + self.p_death + self.p_move
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"p_birth + p_death + p_move must be 1, got {total}")
        if (self.p_birth == 0.0) != (self.p_death == 0.0):
            raise ValueError("births and deaths must both be enabled or both disabled")
        return self

    def scale_for(self, spec: GibbsSpec) -> float:
        """
        The move proposal standard deviation: move_scale, else 0.1 * r_cut
        (0.1 * the shortest window side for potentials without finite range).
        """
        if self.move_scale is not None:
            return self.move_scale
        cutoff = spec.potential.cutoff
        if 0.0 < cutoff < math.inf:
            return 0.1 * cutoff
        return 0.1 * min(hi - lo for lo, hi in zip(spec.window.lower, spec.window.upper))


class ChainStats(BaseModel):
    proposed_births: int = 0
    accepted_births: int = 0
    proposed_deaths: int = 0
    accepted_deaths: int = 0
    proposed_moves: int = 0
    accepted_moves: int = 0

    @staticmethod
    def _rate(accepted: int, proposed: int) -> float:
        return accepted / proposed if proposed else math.nan

    @property
    def birth_rate(self) -> float:
        return self._rate(self.accepted_births, self.proposed_births)

    @property
    def death_rate(self) -> float:
        return self._rate(self.accepted_deaths, self.proposed_deaths)

    @property
    def move_rate(self) -> float:
        return self._rate(self.accepted_moves, self.proposed_moves)


class ChainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: List[Configuration]
    energies: List[float]
    stats: ChainStats


class BirthDeathMoveChain:
    """
    Metropolis-Hastings chain on configurations inside the window.

    The state is kept as an (n, d) array together with its energy
    (internal plus boundary interaction).
    """

    def __init__(
        self,
        spec: GibbsSpec,
        params: McmcParams,
        rng: np.random.Generator,
        state: Optional[np.ndarray] = None,
    ):
        self.spec = spec
        self.params = params
        self.rng = rng
        self.scale = params.scale_for(spec)
        self.state = np.empty((0, spec.dom.d)) if state is None else np.array(state, dtype=float)
        self.energy = conditional_energy(
            spec.potential, self.configuration(), spec.window, spec.boundary
        ).total
        self.stats = ChainStats()
        self._boundary = spec.boundary_points
        self._log_zv = math.log(spec.z * spec.window.volume)
        self._log_ratio = (
            math.log(params.p_death / params.p_birth) if params.p_birth > 0 else 0.0
        )

    def configuration(self) -> Configuration:
        return Configuration(self.state, self.spec.dom, check=False)

    def _energy_of(self, x: np.ndarray, exclude: Optional[int] = None) -> float:
        others = self.state if exclude is None else np.delete(self.state, exclude, axis=0)
        if len(self._boundary):
            others = np.vstack([others, self._boundary])
        return float(point_energies(self.spec.potential, x.reshape(1, -1), others, self.spec.dom)[0])

    def _accept(self, log_ratio: float) -> bool:
        if self.params.force_accept:
            return True
        if log_ratio >= 0.0:
            return True
        return math.log(self.rng.random()) < log_ratio

    def birth_move(self) -> None:
        self.stats.proposed_births += 1
        x = self.spec.window.uniform(self.rng, 1)[0]
        delta = self._energy_of(x)
        n = len(self.state)
        if math.isinf(delta) and not self.params.force_accept:
            return
        log_ratio = self._log_ratio + self._log_zv - math.log(n + 1) - delta
        if self._accept(log_ratio):
            self.state = np.vstack([self.state, x])
            self.energy += delta
            self.stats.accepted_births += 1

    def death_move(self) -> None:
        self.stats.proposed_deaths += 1
        n = len(self.state)
        if n == 0:
            return
        index = int(self.rng.integers(n))
        delta = self._energy_of(self.state[index], exclude=index)
        log_ratio = -self._log_ratio + math.log(n) - self._log_zv + delta
        if self._accept(log_ratio):
            self.state = np.delete(self.state, index, axis=0)
            self.energy -= delta
            self.stats.accepted_deaths += 1

    def update_move(self) -> None:
        self.stats.proposed_moves += 1
        n = len(self.state)
        if n == 0:
            return
        index = int(self.rng.integers(n))
        proposal = wrap(self.state[index] + self.scale * self.rng.standard_normal(self.spec.dom.d), self.spec.dom)
        if not self.spec.window.contains(proposal)[0]:
            return
        old = self._energy_of(self.state[index], exclude=index)
        new = self._energy_of(proposal, exclude=index)
        if math.isinf(new) and not self.params.force_accept:
            return
        delta = new - old
        if self._accept(-delta):
            self.state = self.state.copy()
            self.state[index] = proposal
            self.energy += delta
            self.stats.accepted_moves += 1

    def step(self) -> None:
        u = self.rng.random()
        if u < self.params.p_birth:
            self.birth_move()
        elif u < self.params.p_birth + self.params.p_death:
            self.death_move()
        else:
            self.update_move()

    def run(self) -> ChainResult:
        params = self.params
        for _ in range(params.burn_in):
            self.step()
        samples: List[Configuration] = []
        energies: List[float] = []
        for _ in range(params.n_samples):
            for _ in range(params.thinning):
                self.step()
            samples.append(self.configuration())
            energies.append(self.energy)
        s = self.stats
        LOG.info(
            f"chain finished: {len(samples)} samples, acceptance birth={s.birth_rate:.3f} "
            f"death={s.death_rate:.3f} move={s.move_rate:.3f}"
        )
        return ChainResult(samples=samples, energies=energies, stats=s)


def run_gc_chain(
    spec: GibbsSpec, params: McmcParams, rng: Optional[np.random.Generator] = None
) -> ChainResult:
    if params.p_birth == 0.0:
        raise ValueError("grand canonical sampling needs births and deaths")
    LOG.info(
        f"grand canonical chain: z={spec.z}, window volume={spec.window.volume}, "
        f"burn_in={params.burn_in}, thinning={params.thinning}, samples={params.n_samples}"
    )
    chain = BirthDeathMoveChain(spec, params, rng if rng is not None else rngs.stream(params.seed))
    return chain.run()


def gc_sample(
    spec: GibbsSpec, params: McmcParams, rng: Optional[np.random.Generator] = None
) -> List[Configuration]:
    """
    Samples of the grand canonical specification in the window, started from
    the empty configuration.
    """
    return run_gc_chain(spec, params, rng).samples


def feasible_start(spec: GibbsSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    n points in the window with finite energy, placed one at a time by random search.
    """
    others = spec.boundary_points
    for _ in range(_FEASIBLE_START_RESTARTS):
        state = np.empty((0, spec.dom.d))
        for _ in range(n):
            for _ in range(_FEASIBLE_POINT_ATTEMPTS):
                x = spec.window.uniform(rng, 1)
                energy = point_energies(spec.potential, x, np.vstack([state, others]), spec.dom)[0]
                if math.isfinite(energy):
                    state = np.vstack([state, x])
                    break
            else:
                break
        if len(state) == n:
            return state
    raise RuntimeError(
        f"no feasible start with {n} points found after {_FEASIBLE_START_RESTARTS} restarts"
    )


def run_canonical_chain(
    spec: GibbsSpec, n: int, params: McmcParams, rng: Optional[np.random.Generator] = None
) -> ChainResult:
    if n < 0:
        raise ValueError(f"point count must be >= 0, got {n}")
    rng = rng if rng is not None else rngs.stream(params.seed)
    moves_only = params.model_copy(update={"p_birth": 0.0, "p_death": 0.0, "p_move": 1.0})
    if n == 0:
        empty = Configuration.empty(spec.dom)
        return ChainResult(samples=[empty] * params.n_samples, energies=[0.0] * params.n_samples, stats=ChainStats())
    LOG.info(f"canonical chain: n={n}, burn_in={params.burn_in}, samples={params.n_samples}")
    chain = BirthDeathMoveChain(spec, moves_only, rng, state=feasible_start(spec, n, rng))
    return chain.run()


def canonical_sample(
    spec: GibbsSpec, n: int, params: McmcParams, rng: Optional[np.random.Generator] = None
) -> List[Configuration]:
    """
    Samples with exactly n points in the window, targeting exp(-E - W) on
    the window to the power n. The activity of `spec` plays no role.
    """
    return run_canonical_chain(spec, n, params, rng).samples


def papangelou_intensity(spec: GibbsSpec, gamma: Configuration, x: Point) -> float:
    """
    z * exp(-E_x(gamma)): conditional intensity of adding x to gamma and the boundary.
    """
    others = concatenate(gamma, spec.boundary)
    energy = point_energies(spec.potential, np.asarray(x).reshape(1, -1), others.points, spec.dom)[0]
    return spec.z * math.exp(-energy) if math.isfinite(energy) else 0.0


class CorrelationEstimate(BaseModel):
    """
    Intensity and radial pair correlation with standard errors.

    Bins without any observed pair report value 0 and standard error 0 and
    are flagged in `empty_bins`.
    """

    n_samples: int
    intensity: float
    intensity_stderr: float
    bin_edges: List[float]
    pair_correlation: List[float]
    stderr: List[float]
    empty_bins: List[bool]
    xi_hat: float

    @property
    def bin_centers(self) -> List[float]:
        edges = np.asarray(self.bin_edges)
        return list(0.5 * (edges[:-1] + edges[1:]))


def _ball_volume(r: np.ndarray, d: int) -> np.ndarray:
    return math.pi ** (d / 2.0) / special.gamma(d / 2.0 + 1.0) * np.asarray(r) ** d


def pair_bin_probabilities(window: Window, dom: TorusDomain, edges: np.ndarray) -> np.ndarray:
    """
    P(|X - Y| in bin) for X, Y independent and uniform in the window.

    Exact shell volumes for the whole torus, a fixed-seed Monte Carlo
    reference for a proper subwindow.
    """
    if window.is_whole(dom):
        if edges[-1] > 0.5 * dom.L:
            raise ValueError(f"bin edges beyond L/2 = {0.5 * dom.L} on the whole torus")
        return np.diff(_ball_volume(edges, dom.d)) / dom.volume
    ref = rngs.stream(0, _REFERENCE_STREAM)
    x = window.uniform(ref, _REFERENCE_PAIRS)
    y = window.uniform(ref, _REFERENCE_PAIRS)
    hist, _ = np.histogram(distance(x, y, dom), bins=edges)
    return hist / _REFERENCE_PAIRS


def _ratio_with_stderr(a: np.ndarray, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    sum(a) / sum(c) and its delta-method standard error over the rows.
    """
    total_c = np.sum(c, axis=0)
    ratio = np.divide(np.sum(a, axis=0), total_c, out=np.zeros_like(total_c), where=total_c > 0)
    k = a.shape[0]
    resid = a - ratio * c
    se = np.sqrt(np.sum(resid**2, axis=0) * k / max(k - 1, 1))
    se = np.divide(se, total_c, out=np.zeros_like(total_c), where=total_c > 0)
    return ratio, se


def estimate_correlations(
    samples: Sequence[Configuration],
    window: Window,
    bins: Sequence[float],
    batches: Optional[int] = None,
) -> CorrelationEstimate:
    """
    Intensity (mean count / volume) and pair correlation in the window.

    Pair counts per bin are normalised by the Poisson reference
    N(N-1)/2 * P(|X - Y| in bin), summed over samples (ratio estimator).
    With `batches`, standard errors come from that many consecutive batches
    instead of single samples.

    `xi_hat` estimates a Ruelle bound xi for the correlation functions,
    rho_n <= xi^n, as max(rho, max_bin rho * sqrt(g2)) over the binned radii.
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to estimate correlations")
    dom = samples[0].dom
    window.check(dom)
    edges = np.asarray(bins, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) < 0) or edges[0] < 0:
        raise ValueError("bin edges must be a nondecreasing sequence of at least 2 radii >= 0")
    probs = pair_bin_probabilities(window, dom, edges)

    counts = np.empty(len(samples))
    pair_hist = np.zeros((len(samples), len(edges) - 1))
    for k, gamma in enumerate(samples):
        inside = gamma.points[window.contains(gamma.points)] if gamma.n else gamma.points
        counts[k] = len(inside)
        if len(inside) >= 2:
            i, j = np.triu_indices(len(inside), k=1)
            pair_hist[k], _ = np.histogram(distance(inside[i], inside[j], dom), bins=edges)
    reference = (counts * (counts - 1) / 2.0)[:, None] * probs[None, :]

    groups = len(samples) if batches is None else batches
    if not 2 <= groups <= len(samples):
        raise ValueError(f"batches must lie in [2, {len(samples)}], got {batches}")
    split = np.array_split(np.arange(len(samples)), groups)
    a = np.stack([pair_hist[idx].sum(axis=0) for idx in split])
    c = np.stack([reference[idx].sum(axis=0) for idx in split])
    g, se = _ratio_with_stderr(a, c)
    empty = np.sum(pair_hist, axis=0) == 0
    g = np.where(empty, 0.0, g)
    se = np.where(empty, 0.0, se)

    batch_counts = np.array([counts[idx].mean() for idx in split])
    intensity = float(np.mean(counts)) / window.volume
    intensity_se = float(np.std(batch_counts, ddof=1) / math.sqrt(groups)) / window.volume
    xi_hat = max(intensity, float(np.max(intensity * np.sqrt(g))) if len(g) else 0.0)
    LOG.info(f"correlations from {len(samples)} samples: intensity={intensity:.6g}, xi_hat={xi_hat:.6g}")
    return CorrelationEstimate(
        n_samples=len(samples),
        intensity=intensity,
        intensity_stderr=intensity_se,
        bin_edges=edges.tolist(),
        pair_correlation=g.tolist(),
        stderr=se.tolist(),
        empty_bins=empty.tolist(),
        xi_hat=xi_hat,
    )
