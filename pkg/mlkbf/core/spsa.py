"""Online parameter estimation: recursive maximum likelihood driven by SPSA differences of the multilevel log-NC."""

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import structlog

from .enkbf import Variant, draw_initial_ensemble, enkbf_run
from .errors import NonFiniteState, NonFiniteTheta
from .model import ModelFamily, ThetaVector
from .multilevel import MLConfig, ml_log_nc
from .paths import Branch, IncrementPath, SeedSpec, Stream

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class GainSchedule:
    """a_t = a0 for t <= t0, scale_k t^-alpha_k afterwards; b_t = b_scale t^-beta.

    ``alpha`` and ``scale`` hold one entry per parameter coordinate, or a single entry shared by all.
    """

    a0: float = 0.02
    t0: int = 50
    alpha: tuple[float, ...] = (0.75,)
    scale: tuple[float, ...] = (1.0,)
    beta: float = 0.1
    b_scale: float = 1.0

    def __post_init__(self):
        alpha = tuple(float(a) for a in np.atleast_1d(self.alpha))
        scale = tuple(float(s) for s in np.atleast_1d(self.scale))
        if len(alpha) != len(scale) and 1 not in (len(alpha), len(scale)):
            raise ValueError(f"alpha has {len(alpha)} entries but scale has {len(scale)}")
        if any(not 0.5 < a <= 1.0 for a in alpha):
            raise ValueError(f"step exponents must lie in (0.5, 1], got {alpha}")
        if self.a0 < 0 or any(s < 0 for s in scale):
            raise ValueError("step sizes must be nonnegative")
        if self.beta < 0 or self.b_scale <= 0:
            raise ValueError("perturbation sizes must be positive")
        if self.t0 < 0:
            raise ValueError(f"t0 must be nonnegative, got {self.t0}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "scale", scale)

    def a(self, t: int, d_theta: int = 1) -> np.ndarray:
        if t <= self.t0:
            return np.full(d_theta, float(self.a0))
        alpha = np.broadcast_to(np.asarray(self.alpha), (d_theta,))
        scale = np.broadcast_to(np.asarray(self.scale), (d_theta,))
        return scale * float(t) ** (-alpha)

    def b(self, t: int) -> float:
        return self.b_scale * float(t) ** (-self.beta)


SCHEDULES: dict[str, GainSchedule] = {
    "linear-f12": GainSchedule(a0=0.02, t0=50, alpha=(0.75, 0.82), scale=(1.0, 1.0)),
    "linear-f3": GainSchedule(a0=0.02, t0=500, alpha=(0.88, 0.95), scale=(1.0, 0.2)),
    "l63": GainSchedule(a0=0.01, t0=100, alpha=(0.75,), scale=(1.0,)),
    "l96": GainSchedule(a0=0.03, t0=50, alpha=(0.75,), scale=(1.0,)),
}


def gain_at(schedule: GainSchedule, t: int, d_theta: int = 1) -> tuple[np.ndarray, float]:
    if t < 1:
        raise ValueError(f"gain index starts at 1, got {t}")
    return schedule.a(t, d_theta), schedule.b(t)


def sample_perturbation(d_theta: int, rng: np.random.Generator) -> np.ndarray:
    """Rademacher directions: i.i.d. fair signs."""
    if d_theta < 1:
        raise ValueError(f"d_theta must be at least 1, got {d_theta}")
    return rng.integers(0, 2, size=d_theta) * 2.0 - 1.0


def spsa_update(theta: Union[ThetaVector, np.ndarray], a, b: float, psi: np.ndarray, u_plus: float,
                u_minus: float) -> Union[ThetaVector, np.ndarray]:
    """theta_k + a_k / (2 b psi_k) (u_plus - u_minus), coordinatewise."""
    values = theta.values if isinstance(theta, ThetaVector) else np.asarray(theta, dtype=float)
    new = values + (np.asarray(a, dtype=float) / (2.0 * b * np.asarray(psi, dtype=float))) * (u_plus - u_minus)
    return theta.with_values(new) if isinstance(theta, ThetaVector) else new


@dataclass(frozen=True)
class SPSAConfig:
    theta0: ThetaVector
    schedule: GainSchedule
    M: int
    ml: MLConfig
    seed: SeedSpec
    common_random_numbers: bool = True
    propagate_with_variant: bool = False
    log_every: int = 10

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be at least 1, got {self.M}")


@dataclass
class SPSAIterate:
    iteration: int
    theta: np.ndarray
    a: np.ndarray
    b: float
    u_plus: float
    u_minus: float


@dataclass
class SPSATrajectory:
    names: tuple[str, ...]
    theta0: np.ndarray
    iterates: list[SPSAIterate] = field(default_factory=list)
    run: int = 0

    def thetas(self) -> np.ndarray:
        """Array of shape (M + 1, d_theta) starting at theta0."""
        return np.vstack([self.theta0] + [it.theta for it in self.iterates])


def evaluate_perturbed(family: ModelFamily, window: IncrementPath, ml: MLConfig, theta_plus: np.ndarray,
                       theta_minus: np.ndarray, seed: SeedSpec, inits: Mapping[int, np.ndarray],
                       common_random_numbers: bool = True) -> tuple[float, float]:
    """Multilevel log-NC over one window under theta+ and theta- from the same initial ensembles."""
    u_plus = ml_log_nc(family(theta_plus), window, ml, seed, inits).u_ml
    minus_seed = seed if common_random_numbers else seed.child(branch=Branch.SPSA_MINUS)
    u_minus = ml_log_nc(family(theta_minus), window, ml, minus_seed, inits).u_ml
    return u_plus, u_minus


def rml_spsa_run(family: ModelFamily, obs: IncrementPath, config: SPSAConfig) -> SPSATrajectory:
    """Run M iterations over consecutive unit windows of ``obs``.

    Each iteration perturbs theta, compares the two multilevel log-NC values, updates theta and then
    moves the carrier ensemble one unit forward on level L under the new parameter.
    """
    if obs.horizon < config.M:
        raise ValueError(f"observation record covers {obs.horizon} units, {config.M} iterations need {config.M}")
    ml = config.ml
    theta = config.theta0
    d_theta = len(theta)
    seed = config.seed.child(branch=Branch.SPSA)
    carrier_seed = config.seed.child(branch=Branch.CARRIER)
    carrier_variant = ml.variant if config.propagate_with_variant else Variant.VANILLA
    carrier = draw_initial_ensemble(family(theta), ml.total_particles, carrier_seed, ml.L)
    trajectory = SPSATrajectory(theta.names, theta.values.copy(), run=config.seed.run)
    logger.info("rml_spsa_run", M=config.M, l_star=ml.l_star, L=ml.L, particles=ml.particles, variant=ml.variant.value)

    for t in range(config.M):
        window = obs.window(t, t + 1)
        a_t, b_t = gain_at(config.schedule, t + 1, d_theta)
        step_seed = seed.child(repetition=t)
        psi = sample_perturbation(d_theta, step_seed.stream(Stream.PERTURBATION))
        theta_plus = theta.values + b_t * psi
        theta_minus = theta.values - b_t * psi
        try:
            u_plus, u_minus = evaluate_perturbed(family, window, ml, theta_plus, theta_minus, step_seed,
                                                 ml.split(carrier), config.common_random_numbers)
            theta = spsa_update(theta, a_t, b_t, psi, u_plus, u_minus)
            if not np.all(np.isfinite(theta.values)) or not (math.isfinite(u_plus) and math.isfinite(u_minus)):
                raise NonFiniteState(f"non-finite parameter iterate {theta.values.tolist()}")
            carrier = enkbf_run(family(theta), window, ml.L, ml.total_particles, carrier_variant,
                                carrier_seed.child(repetition=t), init=carrier).final.particles
        except ArithmeticError as e:
            logger.error("spsa_diverged", iteration=t + 1, completed=len(trajectory.iterates), error=str(e))
            raise NonFiniteTheta(t + 1, trajectory) from e
        # only iterations whose carrier step succeeded are recorded
        trajectory.iterates.append(SPSAIterate(t + 1, theta.values.copy(), a_t, b_t, u_plus, u_minus))

        if config.log_every and (t + 1) % config.log_every == 0:
            logger.info("spsa_iteration", iteration=t + 1, theta=theta.to_dict(), u_plus=u_plus, u_minus=u_minus)
    return trajectory


def default_schedule(name: Optional[str] = None, **overrides) -> GainSchedule:
    if name is None:
        return GainSchedule(**overrides)
    try:
        base = SCHEDULES[name]
    except KeyError:
        raise ValueError(f"Unknown gain schedule '{name}'. Available: {', '.join(sorted(SCHEDULES))}")
    if not overrides:
        return base
    return replace(base, **overrides)


def mean_theta(trajectory: SPSATrajectory, last: int) -> np.ndarray:
    """Average of the last ``last`` iterates."""
    values: Sequence[np.ndarray] = [it.theta for it in trajectory.iterates[-last:]]
    return np.mean(values, axis=0)
