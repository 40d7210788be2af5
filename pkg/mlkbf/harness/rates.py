"""Error-to-cost rate experiments for the single-level and multilevel estimators."""

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import structlog
from scipy import stats

from ..core.enkbf import Variant, enkbf_run
from ..core.errors import NonPositivePoint
from ..core.kalman import exact_log_nc, kbf_run
from ..core.model import ModelSpec
from ..core.multilevel import MLConfig, coupled_run, ml_log_nc, sample_allocation
from ..core.paths import Branch, IncrementPath, SeedSpec
from .executor import RepetitionExecutor, fsum_mean, mean_squared_error

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class RateExperimentConfig:
    levels: tuple[int, ...] = (5, 6, 7)
    l_star: int = 4
    c0: float = 0.5
    repetitions: int = 64
    l_ref: int = 9
    reference_repetitions: int = 32
    reference_particles: int = 1000
    variants: tuple[Variant, ...] = (Variant.VANILLA,)
    seed: int = 0

    def __post_init__(self):
        levels = tuple(sorted(int(l) for l in self.levels))
        if not levels:
            raise ValueError("rate experiment needs at least one level")
        if self.l_ref <= levels[-1]:
            raise ValueError(f"reference level {self.l_ref} must exceed every tested level {levels}")
        if self.l_star > levels[0]:
            raise ValueError(f"l_star={self.l_star} exceeds the smallest tested level {levels[0]}")
        if self.repetitions < 2 or self.reference_repetitions < 2:
            raise ValueError("repetitions and reference repetitions must be at least 2")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "variants", tuple(Variant.parse(v) for v in self.variants))


@dataclass
class ExperimentRecord:
    estimator: str
    variant: str
    L: int
    mse: float
    cost: float
    full_cost: float
    repetitions: int

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError(f"MSE must be nonnegative, got {self.mse}")
        if self.cost <= 0:
            raise ValueError(f"cost must be positive, got {self.cost}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, row: dict) -> "ExperimentRecord":
        return cls(
            estimator=str(row["estimator"]),
            variant=str(row["variant"]),
            L=int(row["L"]),
            mse=float(row["mse"]),
            cost=float(row["cost"]),
            full_cost=float(row["full_cost"]),
            repetitions=int(row["repetitions"]),
        )


@dataclass(frozen=True)
class _SingleLevelTask:
    model: ModelSpec
    obs: IncrementPath
    l: int
    N: int
    variant: Variant
    seed: SeedSpec

    def __call__(self, repetition: int) -> float:
        return enkbf_run(self.model, self.obs, self.l, self.N, self.variant, self.seed.child(repetition=repetition)).u


@dataclass(frozen=True)
class _MultilevelTask:
    model: ModelSpec
    obs: IncrementPath
    config: MLConfig
    seed: SeedSpec

    def __call__(self, repetition: int) -> float:
        return ml_log_nc(self.model, self.obs, self.config, self.seed.child(repetition=repetition)).u_ml


@dataclass(frozen=True)
class _CoupledDifferenceTask:
    model: ModelSpec
    obs: IncrementPath
    l: int
    N: int
    variant: Variant
    seed: SeedSpec

    def __call__(self, repetition: int) -> float:
        pair = coupled_run(self.model, self.obs, self.l, self.N, self.variant, self.seed.child(repetition=repetition))
        return pair.contribution


def reference_value(model: ModelSpec, obs: IncrementPath, l_ref: int, R_ref: int, N_ref: int, seed: SeedSpec,
                    variant: Union[Variant, str] = Variant.VANILLA,
                    executor: Optional[RepetitionExecutor] = None) -> float:
    """Mean of R_ref independent single-level estimates at level l_ref on the shared record."""
    if R_ref < 1:
        raise ValueError(f"reference needs at least one repetition, got {R_ref}")
    executor = executor or RepetitionExecutor()
    task = _SingleLevelTask(model, obs, l_ref, N_ref, Variant.parse(variant), seed.child(branch=Branch.REFERENCE))
    value = fsum_mean(executor.map(task, range(R_ref)))
    logger.info("reference_value", l_ref=l_ref, repetitions=R_ref, particles=N_ref, value=value)
    return value


def single_level_estimates(model: ModelSpec, obs: IncrementPath, l: int, N: int, variant: Variant, seed: SeedSpec,
                           repetitions: int, executor: RepetitionExecutor) -> list[float]:
    task = _SingleLevelTask(model, obs, l, N, variant, seed.child(branch=Branch.ESTIMATOR))
    return executor.map(task, range(repetitions))


def multilevel_estimates(model: ModelSpec, obs: IncrementPath, config: MLConfig, seed: SeedSpec, repetitions: int,
                         executor: RepetitionExecutor) -> list[float]:
    task = _MultilevelTask(model, obs, config, seed.child(branch=Branch.ESTIMATOR))
    return executor.map(task, range(repetitions))


def run_rate_experiment(config: RateExperimentConfig, model: ModelSpec, obs: IncrementPath,
                        executor: Optional[RepetitionExecutor] = None,
                        sink: Optional[Callable[[ExperimentRecord], None]] = None) -> list[ExperimentRecord]:
    """MSE and cost of SL and ML estimators for every tested level and variant.

    Records are handed to ``sink`` as soon as they exist so an abort keeps the completed rows.
    """
    executor = executor or RepetitionExecutor()
    seed = SeedSpec(config.seed)
    records: list[ExperimentRecord] = []

    def emit(record: ExperimentRecord) -> None:
        records.append(record)
        if sink is not None:
            sink(record)

    try:
        for variant in config.variants:
            reference = reference_value(model, obs, config.l_ref, config.reference_repetitions,
                                        config.reference_particles, seed, variant, executor)
            for L in config.levels:
                allocation = sample_allocation(config.c0, config.l_star, L)
                N_L = allocation[-1]
                sl = single_level_estimates(model, obs, L, N_L, variant, seed, config.repetitions, executor)
                sl_cost = float(N_L * (1 << L))
                emit(ExperimentRecord("SL", variant.value, L, mean_squared_error(sl, reference), sl_cost, sl_cost,
                                      config.repetitions))

                ml_config = MLConfig(config.l_star, L, tuple(allocation), variant)
                ml = multilevel_estimates(model, obs, ml_config, seed, config.repetitions, executor)
                fine_cost = float(sum(n * (1 << l) for n, l in zip(allocation, ml_config.levels)))
                full_cost = float(allocation[0] * (1 << config.l_star)) + float(sum(
                    n * ((1 << l) + (1 << (l - 1))) for n, l in zip(allocation[1:], ml_config.levels[1:])
                ))
                emit(ExperimentRecord("ML", variant.value, L, mean_squared_error(ml, reference), fine_cost,
                                      full_cost, config.repetitions))
                logger.info("rate_level_done", variant=variant.value, L=L, sl_mse=records[-2].mse,
                            ml_mse=records[-1].mse)
    except Exception as e:
        logger.error("rate_experiment_aborted", error=str(e), completed=len(records))
        raise
    return records


def fit_loglog_slope(points: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares line through (log cost, log mse); returns (slope, intercept)."""
    if len(points) < 2:
        raise ValueError(f"slope fit needs at least 2 points, got {len(points)}")
    arr = np.asarray(points, dtype=float)
    if np.any(arr <= 0):
        raise NonPositivePoint("log-log fit needs strictly positive coordinates")
    fit = stats.linregress(np.log(arr[:, 0]), np.log(arr[:, 1]))
    return float(fit.slope), float(fit.intercept)


def records_slope(records: Sequence[ExperimentRecord], estimator: str, variant: Union[Variant, str]) -> tuple[float, float]:
    variant = Variant.parse(variant).value
    points = [(r.cost, r.mse) for r in records if r.estimator == estimator and r.variant == variant]
    return fit_loglog_slope(points)


def coupled_variance_study(model: ModelSpec, obs: IncrementPath, levels: Sequence[int], N: int,
                           variant: Union[Variant, str], repetitions: int, seed: SeedSpec,
                           executor: Optional[RepetitionExecutor] = None) -> list[tuple[int, float]]:
    """Sample variance of the coupled difference u_fine - u_coarse per level."""
    executor = executor or RepetitionExecutor()
    rows = []
    for l in levels:
        task = _CoupledDifferenceTask(model, obs, l, N, Variant.parse(variant), seed.child(branch=Branch.ESTIMATOR))
        diffs = executor.map(task, range(repetitions))
        mean = fsum_mean(diffs)
        rows.append((l, math.fsum((d - mean) ** 2 for d in diffs) / (len(diffs) - 1)))
        logger.info("coupled_variance", level=l, variance=rows[-1][1])
    return rows


def bias_study(model: ModelSpec, obs: IncrementPath, levels: Sequence[int], l_ref: int) -> list[tuple[int, float]]:
    """|U^l - U^l_ref| of the exact discretized log-NC on one record."""
    reference = exact_log_nc(kbf_run(model, obs, l_ref).means, obs, model, l_ref)
    return [(l, abs(exact_log_nc(kbf_run(model, obs, l).means, obs, model, l) - reference)) for l in levels]


@dataclass
class RateSummary:
    variant: str
    sl_slope: float
    ml_slope: float
    records: list[ExperimentRecord] = field(default_factory=list)


def summarize(records: Sequence[ExperimentRecord]) -> list[RateSummary]:
    summaries = []
    for variant in dict.fromkeys(r.variant for r in records):
        subset = [r for r in records if r.variant == variant]
        if sum(r.estimator == "SL" for r in subset) < 2:
            continue
        summaries.append(RateSummary(variant, records_slope(subset, "SL", variant)[0],
                                     records_slope(subset, "ML", variant)[0], subset))
    return summaries
