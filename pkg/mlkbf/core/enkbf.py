"""Single-level discretized ensemble Kalman-Bucy filters and the log normalizing-constant estimator."""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg
import structlog

from .errors import DimensionMismatch, NonFiniteState, SingularCovariance, TooFewParticles
from .model import ModelSpec, drift_eval
from .paths import IncrementPath, Level, SeedSpec, Stream, brownian_block, pairwise_sum

logger = structlog.get_logger(__name__)

LAMBDA_START = 1e-8
LAMBDA_LIMIT = 1e-2


class Variant(str, Enum):
    VANILLA = "f1"
    DETERMINISTIC = "f2"
    TRANSPORT = "f3"

    @classmethod
    def parse(cls, value: Union[str, "Variant"]) -> "Variant":
        if isinstance(value, Variant):
            return value
        aliases = {"vanilla": cls.VANILLA, "deterministic": cls.DETERMINISTIC, "transport": cls.TRANSPORT}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"Unknown filter variant '{value}'. Use f1, f2 or f3")


@dataclass(frozen=True)
class Ensemble:
    level: Level
    particles: np.ndarray

    def __post_init__(self):
        particles = np.asarray(self.particles, dtype=float)
        if particles.ndim != 2:
            raise DimensionMismatch(f"ensemble must be (N, d_x), got shape {particles.shape}")
        if particles.shape[0] < 2:
            raise TooFewParticles(f"an ensemble needs at least 2 particles, got {particles.shape[0]}")
        if not np.all(np.isfinite(particles)):
            raise NonFiniteState("ensemble contains non-finite entries")
        object.__setattr__(self, "particles", particles)

    @property
    def N(self) -> int:
        return self.particles.shape[0]


@dataclass
class LogNCAccumulator:
    """Running log normalizing constant, one increment per filter step."""

    increments: list[float] = field(default_factory=list)

    def add(self, value: float) -> None:
        if not math.isfinite(value):
            raise NonFiniteState(f"log normalizing constant increment {value} at step {len(self.increments)}")
        self.increments.append(value)

    @property
    def steps(self) -> int:
        return len(self.increments)

    @property
    def u(self) -> float:
        return math.fsum(self.increments)

    def cumulative(self) -> np.ndarray:
        return np.cumsum(np.asarray(self.increments, dtype=float))


@dataclass(frozen=True)
class FilterNoise:
    """Brownian drivers of one filter run, shapes (steps, N, d_x) and (steps, N, d_y)."""

    dW: np.ndarray
    dV: np.ndarray

    def coarsen(self) -> "FilterNoise":
        return FilterNoise(pairwise_sum(self.dW), pairwise_sum(self.dV))


@dataclass
class EnKBFRunOutput:
    mean_path: np.ndarray
    log_nc: LogNCAccumulator
    final: Ensemble

    @property
    def u(self) -> float:
        return self.log_nc.u


def _particles(ens: Union[Ensemble, np.ndarray]) -> np.ndarray:
    return ens.particles if isinstance(ens, Ensemble) else np.atleast_2d(np.asarray(ens, dtype=float))


def _canonical(x: np.ndarray) -> np.ndarray:
    return x[np.lexsort(x.T[::-1])]


def ensemble_mean(ens: Union[Ensemble, np.ndarray]) -> np.ndarray:
    """Sample mean with exactly rounded column sums, independent of particle order."""
    x = _particles(ens)
    n = x.shape[0]
    return np.array([math.fsum(col) for col in x.T.tolist()]) / n


def ensemble_cov(ens: Union[Ensemble, np.ndarray], mean: Optional[np.ndarray] = None) -> np.ndarray:
    x = _particles(ens)
    n = x.shape[0]
    if n < 2:
        raise TooFewParticles(f"sample covariance needs at least 2 particles, got {n}")
    m = ensemble_mean(x) if mean is None else mean
    dev = _canonical(x) - m
    P = (dev.T @ dev) / (n - 1)
    return 0.5 * (P + P.T)


def ensemble_expectation(ens: Union[Ensemble, np.ndarray], phi: Callable[[np.ndarray], np.ndarray]) -> float:
    """Empirical mean of phi, where phi maps (N, d_x) to (N,)."""
    x = _particles(ens)
    values = np.asarray(phi(x), dtype=float).reshape(-1)
    if values.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"test function returned {values.shape[0]} values for {x.shape[0]} particles")
    return math.fsum(values.tolist()) / x.shape[0]


def kalman_gain(P: np.ndarray, model: ModelSpec) -> np.ndarray:
    return P @ model.C.T @ model.R_inv


def log_nc_increment(m: np.ndarray, dY: np.ndarray, model: ModelSpec, delta: float) -> float:
    """<C m, R^-1 dY> - (delta / 2) <m, S m>."""
    return float((model.C @ m) @ (model.R_inv @ dY) - 0.5 * delta * (m @ model.S @ m))


def regularized_factor(P: np.ndarray) -> tuple:
    """Cholesky factor of P + lambda Id, escalating lambda by 10 from 1e-8 to 1e-2 times tr(P)/d."""
    d = P.shape[0]
    scale = np.trace(P) / d
    factor = LAMBDA_START
    while factor <= LAMBDA_LIMIT * (1.0 + 1e-9):
        try:
            return scipy.linalg.cho_factor(P + factor * scale * np.eye(d))
        except np.linalg.LinAlgError:
            logger.warning("transport_regularization_escalated", factor=factor, trace=float(scale * d))
            factor *= 10.0
    raise SingularCovariance(f"sample covariance not invertible with regularization up to {LAMBDA_LIMIT}")


def _update(x: np.ndarray, m: np.ndarray, P: np.ndarray, dY: np.ndarray, model: ModelSpec, variant: Variant,
            dW: Optional[np.ndarray], dV: Optional[np.ndarray], delta: float) -> np.ndarray:
    gain = kalman_gain(P, model)
    drift = drift_eval(model, x)
    if variant is Variant.VANILLA:
        innovation = dY - (x @ model.C.T) * delta
        if model.observation_noise:
            innovation = innovation - dV @ model.R_sqrt.T
        new = x + drift * delta + dW @ model.Q_sqrt.T + innovation @ gain.T
    elif variant is Variant.DETERMINISTIC:
        innovation = dY - (((x + m) / 2) @ model.C.T) * delta
        new = x + drift * delta + dW @ model.Q_sqrt.T + innovation @ gain.T
    else:
        innovation = dY - (((x + m) / 2) @ model.C.T) * delta
        # rows of Q (P + lambda Id)^-1 (x - m)
        transport = (x - m) @ scipy.linalg.cho_solve(regularized_factor(P), model.Q)
        new = x + drift * delta + transport * delta + innovation @ gain.T
    if not np.all(np.isfinite(new)):
        raise NonFiniteState("ensemble update produced non-finite particles")
    return new


def enkbf_step(ens: Ensemble, dY: np.ndarray, model: ModelSpec, variant: Union[Variant, str],
               dW: Optional[np.ndarray] = None, dV: Optional[np.ndarray] = None) -> Ensemble:
    """Advance the ensemble one step of its level; mean and covariance come from the input ensemble."""
    variant = Variant.parse(variant)
    x = ens.particles
    dY = np.asarray(dY, dtype=float).reshape(-1)
    if dY.shape[0] != model.d_y:
        raise DimensionMismatch(f"dY has length {dY.shape[0]}, model has d_y={model.d_y}")
    if variant is not Variant.TRANSPORT and (dW is None or dW.shape != x.shape):
        raise DimensionMismatch(f"dW must have shape {x.shape}")
    if variant is Variant.VANILLA and model.observation_noise and (dV is None or dV.shape != (x.shape[0], model.d_y)):
        raise DimensionMismatch(f"dV must have shape {(x.shape[0], model.d_y)}")
    m = ensemble_mean(x)
    P = ensemble_cov(x, m)
    return Ensemble(ens.level, _update(x, m, P, dY, model, variant, dW, dV, ens.level.delta))


def draw_initial_ensemble(model: ModelSpec, N: int, seed: SeedSpec, level_label: int = 0) -> np.ndarray:
    """N i.i.d. draws from N(M0, P0), one stream per particle."""
    z = np.empty((N, model.d_x))
    for i in range(N):
        z[i] = seed.stream(Stream.INITIAL, level_label, i).standard_normal(model.d_x)
    return model.M0 + z @ model.P0_sqrt.T


def draw_filter_noise(model: ModelSpec, N: int, l: int, horizon: int, seed: SeedSpec,
                      level_label: Optional[int] = None) -> FilterNoise:
    label = l if level_label is None else level_label
    return FilterNoise(
        brownian_block(seed, Stream.SIGNAL, label, l, horizon, model.d_x, N),
        brownian_block(seed, Stream.OBSERVATION, label, l, horizon, model.d_y, N),
    )


def enkbf_run(model: ModelSpec, obs: IncrementPath, l: int, N: int, variant: Union[Variant, str], seed: SeedSpec,
              init: Optional[np.ndarray] = None, noise: Optional[FilterNoise] = None) -> EnKBFRunOutput:
    """Run one discretized EnKBF at level ``l`` and accumulate the log normalizing constant.

    Initial particles and drivers are drawn from ``seed`` under level label ``l`` unless supplied.
    The increment of step k is taken at the mean of the ensemble entering step k.
    """
    variant = Variant.parse(variant)
    level = Level(l)
    record = obs.coarsen(l)
    steps = record.steps
    delta = level.delta
    logger.debug("enkbf_run", variant=variant.value, level=l, N=N, steps=steps)

    x = draw_initial_ensemble(model, N, seed, l) if init is None else np.array(init, dtype=float)
    if x.shape != (N, model.d_x):
        raise DimensionMismatch(f"initial ensemble has shape {x.shape}, expected {(N, model.d_x)}")
    Ensemble(level, x)
    if noise is None:
        noise = draw_filter_noise(model, N, l, record.horizon, seed)
    if noise.dW.shape[0] != steps:
        raise DimensionMismatch(f"noise has {noise.dW.shape[0]} steps, record has {steps}")

    acc = LogNCAccumulator()
    means = np.empty((steps + 1, model.d_x))
    for k in range(steps):
        m = ensemble_mean(x)
        means[k] = m
        acc.add(log_nc_increment(m, record.data[k], model, delta))
        P = ensemble_cov(x, m)
        x = _update(x, m, P, record.data[k], model, variant, noise.dW[k], noise.dV[k], delta)
    means[steps] = ensemble_mean(x)
    return EnKBFRunOutput(means, acc, Ensemble(level, x))
