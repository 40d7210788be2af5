"""Discretized Kalman-Bucy reference filter and the i.i.d. particle oracle."""

import math
from dataclasses import dataclass

import numpy as np
import structlog

from .enkbf import LogNCAccumulator, draw_filter_noise, draw_initial_ensemble, ensemble_mean, kalman_gain, log_nc_increment
from .errors import CovarianceBlowup, DimensionMismatch
from .model import ModelSpec, drift_eval
from .paths import IncrementPath, Level, SeedSpec

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class KBFState:
    m: np.ndarray
    P: np.ndarray
    k: int
    level: Level


@dataclass
class KBFPath:
    means: np.ndarray
    covs: np.ndarray
    level: Level


@dataclass
class OracleOutput:
    particles: np.ndarray
    mean_path: np.ndarray
    log_nc: LogNCAccumulator

    @property
    def u(self) -> float:
        return self.log_nc.u


def riccati_drift(P: np.ndarray, model: ModelSpec) -> np.ndarray:
    """A P + P A^T - P S P + Q."""
    P = np.asarray(P, dtype=float)
    if P.shape != (model.d_x, model.d_x):
        raise DimensionMismatch(f"P has shape {P.shape}, expected {(model.d_x, model.d_x)}")
    A = model.A
    return A @ P + P @ A.T - P @ model.S @ P + model.Q


def kbf_step(state: KBFState, dY: np.ndarray, model: ModelSpec) -> KBFState:
    dY = np.asarray(dY, dtype=float).reshape(-1)
    if dY.shape[0] != model.d_y:
        raise DimensionMismatch(f"dY has length {dY.shape[0]}, model has d_y={model.d_y}")
    delta = state.level.delta
    A, P = model.A, state.P

    row = state.m[None, :]
    gain = kalman_gain(P, model)
    m_new = (row + drift_eval(model, row) * delta + (dY - (row @ model.C.T) * delta) @ gain.T)[0]

    left = A - P @ model.S
    P_new = P + riccati_drift(P, model) * delta + left @ P @ left.T * delta**2
    P_new = 0.5 * (P_new + P_new.T)
    peak = float(np.abs(P_new).max())
    if not peak <= model.cov_bound:
        raise CovarianceBlowup(state.k + 1, model.cov_bound, peak)
    return KBFState(m_new, P_new, state.k + 1, state.level)


def kbf_run(model: ModelSpec, obs: IncrementPath, l: int) -> KBFPath:
    """Mean and covariance sequences of length steps + 1, starting at (M0, P0)."""
    level = Level(l)
    record = obs.coarsen(l)
    steps = record.steps
    means = np.empty((steps + 1, model.d_x))
    covs = np.empty((steps + 1, model.d_x, model.d_x))
    state = KBFState(model.M0.copy(), model.P0.copy(), 0, level)
    means[0], covs[0] = state.m, state.P
    for k in range(steps):
        state = kbf_step(state, record.data[k], model)
        means[k + 1], covs[k + 1] = state.m, state.P
    return KBFPath(means, covs, level)


def exact_log_nc(means: np.ndarray, obs: IncrementPath, model: ModelSpec, l: int) -> float:
    """Log normalizing constant accumulated along given means on level ``l``."""
    record = obs.coarsen(l)
    delta = Level(l).delta
    if len(means) < record.steps:
        raise DimensionMismatch(f"{len(means)} means for {record.steps} increments")
    return math.fsum(log_nc_increment(means[k], record.data[k], model, delta) for k in range(record.steps))


def iid_oracle_run(model: ModelSpec, obs: IncrementPath, l: int, N: int, seed: SeedSpec) -> OracleOutput:
    """Vanilla particle recursion whose gain uses the exact Riccati covariance.

    Particles are conditionally i.i.d. N(m_k, P_k) given the observations. The log normalizing
    constant is accumulated at the particle sample mean. N = 1 is allowed.
    """
    if N < 1:
        raise ValueError(f"oracle needs at least one particle, got {N}")
    level = Level(l)
    record = obs.coarsen(l)
    delta = level.delta
    covs = kbf_run(model, record, l).covs
    steps = record.steps
    logger.debug("iid_oracle_run", level=l, N=N, steps=steps)

    x = draw_initial_ensemble(model, N, seed, l)
    noise = draw_filter_noise(model, N, l, record.horizon, seed)
    particles = np.empty((steps + 1, N, model.d_x))
    means = np.empty((steps + 1, model.d_x))
    acc = LogNCAccumulator()
    particles[0] = x
    for k in range(steps):
        m = ensemble_mean(x)
        means[k] = m
        acc.add(log_nc_increment(m, record.data[k], model, delta))
        gain = kalman_gain(covs[k], model)
        innovation = record.data[k] - (x @ model.C.T) * delta
        if model.observation_noise:
            innovation = innovation - noise.dV[k] @ model.R_sqrt.T
        x = x + drift_eval(model, x) * delta + noise.dW[k] @ model.Q_sqrt.T + innovation @ gain.T
        particles[k + 1] = x
    means[steps] = ensemble_mean(x)
    return OracleOutput(particles, means, acc)
