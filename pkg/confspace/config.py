"""
Run configuration: a TOML file validated into `RunConfig`.

Every section has defaults, so an empty file is a valid configuration;
unknown keys are rejected. `config_hash` identifies the parameters that
change results and is written into every output file.
"""

import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from confspace.calculus import BumpCombination, BumpFunction
from confspace.domain import TorusDomain, Window
from confspace.dynamics import TrajectoryParams
from confspace.gibbs import GibbsSpec, McmcParams
from confspace.intensity import DensityIntensity, IntensityMeasure, MixingLaw, UniformIntensity
from confspace.potential import (
    HardCorePotential,
    LennardJonesPotential,
    PotentialBase,
    TabulatedPotential,
    ZeroPotential,
)

if sys.version_info >= (3, 11):  # pragma: no cover
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

LOG = logging.getLogger("confspace")

DEFAULT_CONFIG = Path(__file__).with_name("default.toml")

# Keys that only say where and how fast to run.
_UNHASHED = {"run": {"out", "workers"}}


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DomainSection(Section):
    d: int = Field(default=2, ge=1)
    L: float = Field(default=10.0, gt=0, allow_inf_nan=False)

    def build(self) -> TorusDomain:
        return TorusDomain(d=self.d, L=self.L)


class IntensitySection(Section):
    """
    `uniform`: sigma = z * m. `bump`: sigma = z * (base + amplitude * bump) * m
    with the bump centred at `center` (box centre by default).
    """

    kind: Literal["uniform", "bump"] = "uniform"
    z: float = Field(default=0.1, ge=0, allow_inf_nan=False)
    base: float = Field(default=1.0, ge=0)
    amplitude: float = 0.5
    center: Optional[List[float]] = None
    radius: float = Field(default=2.0, gt=0)

    def density_field(self, dom: TorusDomain) -> BumpCombination:
        center = tuple(self.center) if self.center is not None else (0.5 * dom.L,) * dom.d
        hump = BumpFunction(center=center, radius=self.radius, dom=dom)
        return BumpCombination(terms=((self.amplitude, hump),), constant=self.base)

    def build_density(self, dom: TorusDomain) -> DensityIntensity:
        if self.base + min(self.amplitude, 0.0) * math.exp(-1.0) < 0:
            raise ValueError("bump intensity would be negative: need base >= -amplitude / e")
        rho_max = self.base + max(self.amplitude, 0.0) * math.exp(-1.0)
        return DensityIntensity(rho=self.density_field(dom), rho_max=rho_max, scale=self.z)

    def build(self, dom: TorusDomain) -> IntensityMeasure:
        if self.kind == "uniform":
            return UniformIntensity(z=self.z)
        return self.build_density(dom)


class MixingSection(Section):
    atoms: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.5, 0.5), (1.5, 0.5)])

    def build(self) -> MixingLaw:
        return MixingLaw(atoms=tuple(tuple(atom) for atom in self.atoms))


class TabulatedFilePotential(Section):
    """
    A tabulated potential read from a file (header `n r_cut`, then `r value derivative`).
    """

    kind: Literal["tabulated_file"] = "tabulated_file"
    path: Path

    def build(self) -> TabulatedPotential:
        return TabulatedPotential.from_file(self.path)


PotentialSection = Annotated[
    Union[
        ZeroPotential,
        HardCorePotential,
        LennardJonesPotential,
        TabulatedPotential,
        TabulatedFilePotential,
    ],
    Field(discriminator="kind"),
]


class WindowSection(Section):
    """
    Observation window; the whole box when both corners are omitted.
    """

    lower: Optional[List[float]] = None
    upper: Optional[List[float]] = None

    @model_validator(mode="after")
    def _both_or_neither(self) -> "WindowSection":
        if (self.lower is None) != (self.upper is None):
            raise ValueError("window needs both `lower` and `upper`, or neither")
        return self

    def build(self, dom: TorusDomain) -> Window:
        if self.lower is None or self.upper is None:
            return Window.whole(dom)
        window = Window(lower=tuple(self.lower), upper=tuple(self.upper))
        window.check(dom)
        return window


class McmcSection(Section):
    p_birth: float = 0.35
    p_death: float = 0.35
    p_move: float = 0.30
    move_scale: Optional[float] = None
    burn_in: int = 100_000
    thinning: int = 1000
    n_samples: int = 1000

    def build(self, seed: int) -> McmcParams:
        return McmcParams(**self.model_dump(), seed=seed)


class TrajectorySection(Section):
    dt: float = Field(default=1e-3, gt=0)
    n_steps: int = Field(default=100, ge=1)
    save_every: int = Field(default=10, ge=1)

    def build(self, seed: int) -> TrajectoryParams:
        return TrajectoryParams(**self.model_dump(), seed=seed)


class CorrelationSection(Section):
    n_bins: int = Field(default=25, ge=1)
    r_max: float = Field(default=2.5, gt=0)
    batches: Optional[int] = Field(default=None, ge=2)

    def edges(self) -> np.ndarray:
        return np.linspace(0.0, self.r_max, self.n_bins + 1)


class VerifySection(Section):
    """
    Sample sizes of the verification suites. `size_factor` scales all of
    them; shards fix how the work is split and so the streams used.
    """

    shards: int = Field(default=8, ge=1)
    size_factor: float = Field(default=1.0, gt=0)
    poisson_samples: int = Field(default=100_000, ge=2)
    gibbs_samples: int = Field(default=10_000, ge=2)
    mecke_side: float = Field(default=3.0, gt=0)
    ibp_samples: int = Field(default=20_000, ge=2)
    semigroup_systems: int = Field(default=100_000, ge=2)
    semigroup_particles: int = Field(default=1_000_000, ge=1)
    semigroup_paths: int = Field(default=100_000, ge=2)
    martingale_paths: int = Field(default=10_000, ge=2)
    martingale_horizon: float = Field(default=0.1, gt=0)
    martingale_dt: float = Field(default=1e-3, gt=0)
    invariance_samples: int = Field(default=500, ge=2)
    invariance_horizon: float = Field(default=0.1, gt=0)
    invariance_dt: float = Field(default=1e-3, gt=0)

    def size(self, name: str) -> int:
        """
        `size_factor` times the named sample size, at least 2.
        """
        return max(2, int(round(self.size_factor * getattr(self, name))))

    def shard_size(self, name: str, shard: int) -> int:
        """
        The named size split across shards; earlier shards take the remainder.
        """
        total = self.size(name)
        base, extra = divmod(total, self.shards)
        return max(2, base + (1 if shard < extra else 0))


class RunSection(Section):
    seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)
    out: Path = Path("results")
    format: Literal["json", "csv"] = "json"
    n_samples: int = Field(default=100, ge=1)


class RunConfig(Section):
    domain: DomainSection = Field(default_factory=DomainSection)
    intensity: IntensitySection = Field(default_factory=IntensitySection)
    mixing: MixingSection = Field(default_factory=MixingSection)
    potential: PotentialSection = Field(
        default_factory=lambda: LennardJonesPotential(a=1.0, b=1.0, r_cut=2.5, taper_width=0.5)
    )
    window: WindowSection = Field(default_factory=WindowSection)
    mcmc: McmcSection = Field(default_factory=McmcSection)
    trajectory: TrajectorySection = Field(default_factory=TrajectorySection)
    correlation: CorrelationSection = Field(default_factory=CorrelationSection)
    verify: VerifySection = Field(default_factory=VerifySection)
    run: RunSection = Field(default_factory=RunSection)

    @model_validator(mode="after")
    def _bins_within_half_box(self) -> "RunConfig":
        if self.correlation.r_max > 0.5 * self.domain.L:
            raise ValueError(
                f"correlation r_max = {self.correlation.r_max} exceeds L/2 = {0.5 * self.domain.L}"
            )
        return self

    def dom(self) -> TorusDomain:
        return self.domain.build()

    def sigma(self) -> IntensityMeasure:
        return self.intensity.build(self.dom())

    def law(self) -> MixingLaw:
        return self.mixing.build()

    def phi(self) -> PotentialBase:
        if isinstance(self.potential, TabulatedFilePotential):
            return self.potential.build()
        return self.potential

    def obs_window(self) -> Window:
        return self.window.build(self.dom())

    def gibbs_spec(self) -> GibbsSpec:
        return GibbsSpec(
            z=self.intensity.z, potential=self.phi(), window=self.obs_window(), dom=self.dom()
        )

    def mcmc_params(self) -> McmcParams:
        return self.mcmc.build(self.run.seed)

    def trajectory_params(self) -> TrajectoryParams:
        return self.trajectory.build(self.run.seed)

    def with_overrides(self, **run: Any) -> "RunConfig":
        """
        Copy with `run` keys replaced (None values are ignored).
        """
        update = {key: value for key, value in run.items() if value is not None}
        if not update:
            return self
        merged = self.run.model_dump()
        merged.update(update)
        return self.model_copy(update={"run": RunSection.model_validate(merged)})

    def config_hash(self) -> str:
        """
        SHA-256 of the canonical JSON of every result-changing setting.
        """
        data: Dict[str, Any] = self.model_dump(mode="json", exclude=_UNHASHED)
        if isinstance(self.potential, TabulatedFilePotential):
            data["potential"] = self.phi().model_dump(mode="json")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Read and validate a TOML configuration; the packaged defaults when no path is given.

    Relative table paths in the potential section resolve against the file's directory.
    """
    path = Path(path) if path is not None else DEFAULT_CONFIG
    with open(path, "rb") as f:
        data = tomllib.load(f)
    potential = data.get("potential")
    if isinstance(potential, dict) and potential.get("kind") == "tabulated_file":
        table = Path(potential.get("path", ""))
        if not table.is_absolute():
            potential["path"] = str(path.parent / table)
    config = RunConfig.model_validate(data)
    LOG.debug(f"Loaded configuration {path} ({config.config_hash()[:12]})")
    return config
