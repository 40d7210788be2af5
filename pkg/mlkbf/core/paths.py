"""Signal, observation and Brownian increment paths on dyadic grids."""

import math
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np
import structlog

from .errors import DimensionMismatch, LevelAboveSource
from .model import ModelSpec, drift_eval

logger = structlog.get_logger(__name__)


class Stream(IntEnum):
    """Purpose label of a random stream."""

    INITIAL = 1
    SIGNAL = 2
    OBSERVATION = 3
    TRUTH_INITIAL = 4
    TRUTH_SIGNAL = 5
    TRUTH_OBSERVATION = 6
    PERTURBATION = 7


class Branch(IntEnum):
    """Top-level partition of the streams of one experiment."""

    DATA = 0
    REFERENCE = 1
    ESTIMATOR = 2
    CARRIER = 3
    SPSA = 4
    SPSA_MINUS = 5


def level_delta(l: int) -> float:
    """Step size 2^-l, exact in binary floating point."""
    if l < 0:
        raise ValueError(f"level must be nonnegative, got {l}")
    return math.ldexp(1.0, -l)


@dataclass(frozen=True)
class Level:
    l: int

    def __post_init__(self):
        if self.l < 0:
            raise ValueError(f"level must be nonnegative, got {self.l}")

    @property
    def delta(self) -> float:
        return level_delta(self.l)

    @property
    def steps_per_unit(self) -> int:
        return 1 << self.l

    def steps(self, horizon: int) -> int:
        return horizon * self.steps_per_unit


@dataclass(frozen=True)
class SeedSpec:
    """Master seed plus labels; every label tuple addresses its own counter-based stream."""

    master_seed: int
    run: int = 0
    branch: int = 0
    repetition: int = 0

    def child(self, **labels) -> "SeedSpec":
        return replace(self, **labels)

    def stream(self, purpose: int, level: int = 0, particle: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(
            self.master_seed,
            spawn_key=(int(self.run), int(self.branch), int(self.repetition), int(purpose), int(level), int(particle)),
        )
        return np.random.Generator(np.random.Philox(seq))


def pairwise_sum(data: np.ndarray) -> np.ndarray:
    """Sum consecutive pairs along the first axis: out[k] = data[2k] + data[2k+1]."""
    return data[0::2] + data[1::2]


@dataclass(frozen=True)
class IncrementPath:
    """Increments on the grid of ``level`` over ``horizon`` unit time intervals."""

    level: Level
    horizon: int
    data: np.ndarray

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError(f"horizon must be nonnegative, got {self.horizon}")
        data = np.array(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.shape[0] != self.level.steps(self.horizon):
            raise DimensionMismatch(
                f"path has {data.shape[0]} rows, expected {self.level.steps(self.horizon)} "
                f"for level {self.level.l} and horizon {self.horizon}"
            )
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def steps(self) -> int:
        return self.data.shape[0]

    def coarsen(self, to_level: int) -> "IncrementPath":
        return coarsen_increments(self, to_level)

    def window(self, start: int, stop: int) -> "IncrementPath":
        """Increments of the unit intervals start..stop-1."""
        if not 0 <= start <= stop <= self.horizon:
            raise ValueError(f"window [{start}, {stop}) outside horizon {self.horizon}")
        n = self.level.steps_per_unit
        return IncrementPath(self.level, stop - start, self.data[start * n:stop * n])


@dataclass(frozen=True)
class SignalPath:
    level: Level
    horizon: int
    states: np.ndarray


def coarsen_increments(path: IncrementPath, to_level: int) -> IncrementPath:
    """Block-sum increments down to ``to_level`` by repeated pairwise halving."""
    if to_level > path.level.l:
        raise LevelAboveSource(f"cannot coarsen level {path.level.l} to finer level {to_level}")
    if to_level < 0:
        raise ValueError(f"level must be nonnegative, got {to_level}")
    data = path.data
    for _ in range(path.level.l - to_level):
        data = pairwise_sum(data)
    if data is path.data:
        return path
    return IncrementPath(Level(to_level), path.horizon, data)


def brownian_block(seed: SeedSpec, purpose: int, level_label: int, l: int, horizon: int, dim: int,
                   n_streams: int) -> np.ndarray:
    """Brownian increments on level ``l``, shape (steps, n_streams, dim), one stream per index."""
    steps = Level(l).steps(horizon)
    scale = math.sqrt(level_delta(l))
    out = np.empty((steps, n_streams, dim))
    for i in range(n_streams):
        out[:, i, :] = seed.stream(purpose, level_label, i).standard_normal((steps, dim)) * scale
    return out


def coupled_brownian(l: int, T: int, dim: int, n_streams: int, seed: SeedSpec,
                     purpose: int = Stream.SIGNAL) -> tuple[list[IncrementPath], list[IncrementPath]]:
    """Fine increments at level l and their pairwise sums at level l-1, per stream."""
    if l < 1:
        raise ValueError(f"coupled increments need l >= 1, got {l}")
    fine = brownian_block(seed, purpose, l, l, T, dim, n_streams)
    coarse = pairwise_sum(fine)
    return (
        [IncrementPath(Level(l), T, fine[:, i, :]) for i in range(n_streams)],
        [IncrementPath(Level(l - 1), T, coarse[:, i, :]) for i in range(n_streams)],
    )


def simulate_truth_and_obs(model: ModelSpec, l_data: int, T: int, seed: SeedSpec) -> tuple[SignalPath, IncrementPath]:
    """Euler-Maruyama signal from X_0 ~ N(M0, P0) and its observation increments, Y_0 = 0."""
    if T < 1:
        raise ValueError(f"horizon must be at least 1, got {T}")
    level = Level(l_data)
    delta = level.delta
    steps = level.steps(T)
    logger.info("simulate_truth_and_obs", level=l_data, horizon=T, steps=steps)

    z0 = seed.stream(Stream.TRUTH_INITIAL).standard_normal(model.d_x)
    dW = seed.stream(Stream.TRUTH_SIGNAL, l_data).standard_normal((steps, model.d_x)) * math.sqrt(delta)
    dV = seed.stream(Stream.TRUTH_OBSERVATION, l_data).standard_normal((steps, model.d_y)) * math.sqrt(delta)

    states = np.empty((steps + 1, model.d_x))
    dY = np.empty((steps, model.d_y))
    x = model.M0 + model.P0_sqrt @ z0
    states[0] = x
    for k in range(steps):
        obs = (model.C @ x) * delta
        if model.observation_noise:
            obs = obs + model.R_sqrt @ dV[k]
        dY[k] = obs
        x = x + drift_eval(model, x) * delta + model.Q_sqrt @ dW[k]
        states[k + 1] = x
    return SignalPath(level, T, states), IncrementPath(level, T, dY)
