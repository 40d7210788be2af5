"""Repeated RML-SPSA parameter-estimation runs on one synthetic record."""

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import structlog

from ..core.model import ModelFamily, ThetaVector
from ..core.paths import Branch, IncrementPath, SeedSpec, simulate_truth_and_obs
from ..core.spsa import SPSAConfig, SPSATrajectory, rml_spsa_run
from .executor import RepetitionExecutor

logger = structlog.get_logger(__name__)


def synthetic_record(family: ModelFamily, theta_star: Sequence[float], l_data: int, horizon: int,
                     seed: int) -> IncrementPath:
    """Observation record simulated once under theta*."""
    _, obs = simulate_truth_and_obs(family(theta_star), l_data, horizon, SeedSpec(seed, branch=Branch.DATA))
    return obs


@dataclass(frozen=True)
class _EstimationTask:
    family: ModelFamily
    obs: IncrementPath
    config: SPSAConfig

    def __call__(self, run: int) -> SPSATrajectory:
        seed = self.config.seed.child(run=run)
        return rml_spsa_run(self.family, self.obs, replace(self.config, seed=seed))


def run_estimation(family: ModelFamily, obs: IncrementPath, config: SPSAConfig, runs: int = 1,
                   executor: Optional[RepetitionExecutor] = None) -> list[SPSATrajectory]:
    """Independent RML-SPSA runs, differing only in their filter and perturbation streams."""
    if runs < 1:
        raise ValueError(f"runs must be at least 1, got {runs}")
    executor = executor or RepetitionExecutor()
    logger.info("run_estimation", runs=runs, M=config.M, family=family.name)
    return executor.map(_EstimationTask(family, obs, config), range(runs))


@dataclass
class TrajectorySummary:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    @property
    def final(self) -> ThetaVector:
        return ThetaVector(self.mean[-1], self.names)


def summarize_runs(trajectories: Sequence[SPSATrajectory]) -> TrajectorySummary:
    """Per-iteration mean and standard deviation across runs (rows 0..M, row 0 is theta0)."""
    stacked = np.stack([t.thetas() for t in trajectories])
    std = stacked.std(axis=0, ddof=1) if len(trajectories) > 1 else np.zeros_like(stacked[0])
    return TrajectorySummary(trajectories[0].names, stacked.mean(axis=0), std)
