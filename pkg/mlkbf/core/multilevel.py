"""Coupled two-level ensembles and the multilevel normalizing-constant and filter estimators."""

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
import structlog

from .enkbf import Ensemble, Variant, draw_filter_noise, draw_initial_ensemble, enkbf_run, ensemble_expectation
from .errors import AllocationTooSmall, TooFewParticles
from .model import ModelSpec
from .paths import IncrementPath, SeedSpec

logger = structlog.get_logger(__name__)


def sample_allocation(c0: float, l_star: int, L: int) -> list[int]:
    """N_l = floor(C0 2^(2L - l) (L - l_star + 1)) for l = l_star..L."""
    if c0 <= 0:
        raise ValueError(f"C0 must be positive, got {c0}")
    if l_star > L:
        raise ValueError(f"l_star={l_star} exceeds L={L}")
    if l_star < 0:
        raise ValueError(f"l_star must be nonnegative, got {l_star}")
    width = L - l_star + 1
    allocation = [math.floor(c0 * 2.0 ** (2 * L - l) * width) for l in range(l_star, L + 1)]
    if min(allocation) < 2:
        raise AllocationTooSmall(f"allocation {allocation} gives a level fewer than 2 particles; increase C0")
    return allocation


@dataclass(frozen=True)
class MLConfig:
    l_star: int
    L: int
    particles: tuple[int, ...]
    variant: Variant = Variant.VANILLA

    def __post_init__(self):
        if self.l_star < 0 or self.l_star > self.L:
            raise ValueError(f"need 0 <= l_star <= L, got l_star={self.l_star}, L={self.L}")
        particles = tuple(int(n) for n in self.particles)
        if len(particles) != self.L - self.l_star + 1:
            raise ValueError(f"expected {self.L - self.l_star + 1} particle counts, got {len(particles)}")
        if min(particles) < 2:
            raise TooFewParticles(f"every level needs at least 2 particles, got {particles}")
        object.__setattr__(self, "particles", particles)
        object.__setattr__(self, "variant", Variant.parse(self.variant))

    @classmethod
    def from_allocation(cls, c0: float, l_star: int, L: int, variant: Union[Variant, str] = Variant.VANILLA) -> "MLConfig":
        return cls(l_star, L, tuple(sample_allocation(c0, l_star, L)), Variant.parse(variant))

    @property
    def levels(self) -> range:
        return range(self.l_star, self.L + 1)

    def N(self, l: int) -> int:
        return self.particles[l - self.l_star]

    @property
    def total_particles(self) -> int:
        return sum(self.particles)

    def split(self, carrier: np.ndarray) -> dict[int, np.ndarray]:
        """Slice a stacked ensemble of total_particles rows into per-level initial ensembles."""
        if carrier.shape[0] != self.total_particles:
            raise ValueError(f"carrier has {carrier.shape[0]} particles, configuration needs {self.total_particles}")
        offsets = np.cumsum((0,) + self.particles)
        return {l: carrier[offsets[i]:offsets[i + 1]] for i, l in enumerate(self.levels)}


@dataclass
class CoupledRunOutput:
    level: int
    N: int
    u_fine: float
    u_coarse: float
    fine_final: Ensemble
    coarse_final: Ensemble

    @property
    def cost(self) -> float:
        return float(self.N * ((1 << self.level) + (1 << (self.level - 1))))

    @property
    def fine_cost(self) -> float:
        return float(self.N * (1 << self.level))

    @property
    def contribution(self) -> float:
        return self.u_fine - self.u_coarse


@dataclass
class LevelTerm:
    """Contribution of one level: the base estimate at l_star or a fine-minus-coarse difference."""

    level: int
    N: int
    u_fine: float
    u_coarse: Optional[float]
    cost: float
    fine_cost: float
    fine_final: Ensemble
    coarse_final: Optional[Ensemble]

    @property
    def contribution(self) -> float:
        return self.u_fine if self.u_coarse is None else self.u_fine - self.u_coarse

    @property
    def z_contribution(self) -> float:
        """exp(u_fine) - exp(u_coarse); saturates to +-inf where the exponential overflows."""
        if self.u_coarse is None:
            try:
                return math.exp(self.u_fine)
            except OverflowError:
                return math.inf
        gap = self.u_fine - self.u_coarse
        if gap == 0.0:
            return 0.0
        try:
            return math.exp(self.u_coarse) * math.expm1(gap)
        except OverflowError:
            return math.copysign(math.inf, gap)

    def eta(self, phi: Callable[[np.ndarray], np.ndarray]) -> float:
        fine = ensemble_expectation(self.fine_final, phi)
        return fine if self.coarse_final is None else fine - ensemble_expectation(self.coarse_final, phi)


@dataclass
class MLEstimate:
    u_ml: float
    terms: list[LevelTerm]

    @property
    def cost(self) -> float:
        return math.fsum(t.cost for t in self.terms)

    @property
    def fine_cost(self) -> float:
        return math.fsum(t.fine_cost for t in self.terms)

    @property
    def z_ml(self) -> float:
        """Multilevel normalizing constant on the linear scale."""
        values = [t.z_contribution for t in self.terms]
        # fsum rejects inf - inf; plain sum yields nan there
        return math.fsum(values) if all(math.isfinite(v) for v in values) else sum(values)

    @property
    def per_level(self) -> list[tuple[int, float, float]]:
        return [(t.level, t.contribution, t.cost) for t in self.terms]


def coupled_run(model: ModelSpec, obs: IncrementPath, l: int, N: int, variant: Union[Variant, str], seed: SeedSpec,
                init: Optional[np.ndarray] = None) -> CoupledRunOutput:
    """Fine ensemble on level l and coarse ensemble on level l-1 with shared drivers and initial particles.

    Coarse drivers are pairwise sums of the fine ones; both legs read the same observation record.
    """
    if l < 1:
        raise ValueError(f"coupled runs need l >= 1, got {l}")
    record = obs.coarsen(l)
    if init is None:
        init = draw_initial_ensemble(model, N, seed, l)
    noise = draw_filter_noise(model, N, l, record.horizon, seed)
    fine = enkbf_run(model, record, l, N, variant, seed, init=init, noise=noise)
    coarse = enkbf_run(model, record, l - 1, N, variant, seed, init=init, noise=noise.coarsen())
    return CoupledRunOutput(l, N, fine.u, coarse.u, fine.final, coarse.final)


def ml_level_term(model: ModelSpec, obs: IncrementPath, config: MLConfig, l: int, seed: SeedSpec,
                  init: Optional[np.ndarray] = None) -> LevelTerm:
    """One term of the telescoping sum, driven only by streams labelled with level l."""
    N = config.N(l)
    if l == config.l_star:
        run = enkbf_run(model, obs, l, N, config.variant, seed, init=init)
        cost = float(N * (1 << l))
        return LevelTerm(l, N, run.u, None, cost, cost, run.final, None)
    pair = coupled_run(model, obs, l, N, config.variant, seed, init=init)
    return LevelTerm(l, N, pair.u_fine, pair.u_coarse, pair.cost, pair.fine_cost, pair.fine_final, pair.coarse_final)


def ml_terms(model: ModelSpec, obs: IncrementPath, config: MLConfig, seed: SeedSpec,
             inits: Optional[Mapping[int, np.ndarray]] = None) -> list[LevelTerm]:
    inits = inits or {}
    return [ml_level_term(model, obs, config, l, seed, inits.get(l)) for l in config.levels]


def ml_log_nc(model: ModelSpec, obs: IncrementPath, config: MLConfig, seed: SeedSpec,
              inits: Optional[Mapping[int, np.ndarray]] = None) -> MLEstimate:
    """Multilevel log normalizing constant: base estimate at l_star plus coupled differences up to L."""
    terms = ml_terms(model, obs, config, seed, inits)
    u_ml = math.fsum(t.contribution for t in terms)
    logger.debug("ml_log_nc", l_star=config.l_star, L=config.L, u_ml=u_ml)
    return MLEstimate(u_ml, terms)


def ml_filter_estimate(model: ModelSpec, obs: IncrementPath, config: MLConfig, seed: SeedSpec,
                       phi: Callable[[np.ndarray], np.ndarray],
                       inits: Optional[Mapping[int, np.ndarray]] = None) -> float:
    """Multilevel estimate of the filter expectation of phi at the end of the record."""
    return ml_filter_from_terms(ml_terms(model, obs, config, seed, inits), phi)


def ml_filter_from_terms(terms: Sequence[LevelTerm], phi: Callable[[np.ndarray], np.ndarray]) -> float:
    return math.fsum(t.eta(phi) for t in terms)
