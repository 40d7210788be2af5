"""State-space model definitions: linear-Gaussian, stochastic Lorenz 63 and Lorenz 96."""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.linalg
import structlog

from .errors import DimensionMismatch, DimensionTooSmall, InvalidCovariance, SingularRsqrt, UnsupportedDrift

logger = structlog.get_logger(__name__)

COND_LIMIT = 1e12
DEFAULT_COV_BOUND = 1e6


@dataclass(frozen=True)
class LinearDrift:
    """Drift x -> A x."""

    A: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.A.T


@dataclass(frozen=True)
class NonlinearDrift:
    """Drift x -> f(x, theta), with f vectorized over leading axes."""

    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    theta: np.ndarray
    name: str = "nonlinear"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.f(x, self.theta)


Drift = Union[LinearDrift, NonlinearDrift]


@dataclass(frozen=True)
class ModelSpec:
    """Continuous-time state-space model with additive Gaussian noise.

    Noise enters through its square roots. ``R_inv`` and ``S = C^T R^-1 C`` are computed once
    by the builders. ``observation_noise=False`` switches off the observation noise in data
    generation and the perturbed-observation term of the filters while keeping ``R`` in the
    gain and the likelihood.
    """

    d_x: int
    d_y: int
    drift: Drift
    C: np.ndarray
    Q_sqrt: np.ndarray
    R_sqrt: np.ndarray
    M0: np.ndarray
    P0: np.ndarray
    R_inv: np.ndarray
    S: np.ndarray
    observation_noise: bool = True
    cov_bound: float = DEFAULT_COV_BOUND

    @cached_property
    def Q(self) -> np.ndarray:
        return self.Q_sqrt @ self.Q_sqrt.T

    @cached_property
    def R(self) -> np.ndarray:
        return self.R_sqrt @ self.R_sqrt

    @cached_property
    def P0_sqrt(self) -> np.ndarray:
        return psd_sqrt(self.P0)

    @property
    def is_linear(self) -> bool:
        return isinstance(self.drift, LinearDrift)

    @property
    def A(self) -> np.ndarray:
        if not isinstance(self.drift, LinearDrift):
            raise UnsupportedDrift("Kalman-Bucy recursions need a linear drift")
        return self.drift.A


@dataclass(frozen=True)
class ThetaVector:
    """Static model parameters with a label per entry."""

    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if len(values) != len(self.names):
            raise DimensionMismatch(f"theta has {len(values)} values for {len(self.names)} names")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def with_values(self, values: Sequence[float]) -> "ThetaVector":
        return ThetaVector(np.asarray(values, dtype=float), self.names)

    def to_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(self.names, self.values)}


@dataclass(frozen=True)
class ModelFamily:
    """A parametric family theta -> ModelSpec."""

    name: str
    names: tuple[str, ...]
    builder: Callable[[np.ndarray], ModelSpec]
    default_theta: tuple[float, ...]
    metadata: dict = field(default_factory=dict)

    def theta(self, values: Optional[Sequence[float]] = None) -> ThetaVector:
        return ThetaVector(np.asarray(self.default_theta if values is None else values, dtype=float), self.names)

    def __call__(self, theta: Union[ThetaVector, Sequence[float], np.ndarray]) -> ModelSpec:
        if not isinstance(theta, ThetaVector):
            theta = self.theta(theta)
        elif len(theta) != len(self.names):
            raise DimensionMismatch(f"{self.name} expects {len(self.names)} parameters, got {len(theta)}")
        return self.builder(theta.values)


def psd_sqrt(P: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; negative rounding eigenvalues are clipped."""
    P = np.asarray(P, dtype=float)
    if not np.any(P):
        return np.zeros_like(P)
    w, V = scipy.linalg.eigh(P)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _as_matrix(value, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.shape != (rows, cols):
        raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {(rows, cols)}")
    return arr


def _as_vector(value, size: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise DimensionMismatch(f"{name} has length {arr.size}, expected {size}")
    return arr


def _check_symmetric(M: np.ndarray, name: str) -> None:
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12 * (1.0 + np.abs(M).max())):
        raise InvalidCovariance(f"{name} must be symmetric")


def _build(drift: Drift, d_x: int, C, Q_sqrt, R_sqrt, M0, P0, observation_noise: bool, cov_bound: float) -> ModelSpec:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != d_x:
        raise DimensionMismatch(f"C has {C.shape[1]} columns, expected {d_x}")
    d_y = C.shape[0]
    Q_sqrt = _as_matrix(Q_sqrt, d_x, d_x, "Q_sqrt")
    R_sqrt = _as_matrix(R_sqrt, d_y, d_y, "R_sqrt")
    M0 = _as_vector(M0, d_x, "M0")
    P0 = _as_matrix(P0, d_x, d_x, "P0")

    _check_symmetric(Q_sqrt, "Q_sqrt")
    _check_symmetric(R_sqrt, "R_sqrt")
    _check_symmetric(P0, "P0")
    if np.linalg.eigvalsh(P0).min() < -1e-10 * (1.0 + np.abs(P0).max()):
        raise InvalidCovariance("P0 must be positive semi-definite")

    if not np.linalg.cond(R_sqrt) <= COND_LIMIT:
        raise SingularRsqrt("R_sqrt is singular or ill-conditioned")
    R_inv = scipy.linalg.inv(R_sqrt @ R_sqrt)
    R_inv = 0.5 * (R_inv + R_inv.T)
    S = C.T @ R_inv @ C
    S = 0.5 * (S + S.T)

    return ModelSpec(
        d_x=d_x,
        d_y=d_y,
        drift=drift,
        C=C,
        Q_sqrt=Q_sqrt,
        R_sqrt=R_sqrt,
        M0=M0,
        P0=P0,
        R_inv=R_inv,
        S=S,
        observation_noise=observation_noise,
        cov_bound=cov_bound,
    )


def build_linear_model(A, C, Q_sqrt, R_sqrt, M0, P0, *, observation_noise: bool = True,
                       cov_bound: float = DEFAULT_COV_BOUND) -> ModelSpec:
    """Build a linear-Gaussian model dX = A X dt + Q^1/2 dW, dY = C X dt + R^1/2 dV."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    return _build(LinearDrift(A), A.shape[0], C, Q_sqrt, R_sqrt, M0, P0, observation_noise, cov_bound)


def build_nonlinear_model(drift: NonlinearDrift, d_x: int, C, Q_sqrt, R_sqrt, M0, P0, *,
                          observation_noise: bool = True, cov_bound: float = DEFAULT_COV_BOUND) -> ModelSpec:
    return _build(drift, d_x, C, Q_sqrt, R_sqrt, M0, P0, observation_noise, cov_bound)


def drift_eval(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Evaluate the drift on a state vector or on an (N, d_x) stack of states."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.d_x:
        raise DimensionMismatch(f"state has dimension {x.shape[-1]}, model has {model.d_x}")
    return model.drift(x)


def lorenz63_drift(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if x.shape[-1] != 3 or theta.shape != (3,):
        raise DimensionMismatch("Lorenz 63 needs a 3-dimensional state and 3 parameters")
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack(
        [
            theta[0] * (x2 - x1),
            theta[1] * x1 - x2 - x1 * x3,
            x1 * x2 - theta[2] * x3,
        ],
        axis=-1,
    )


def lorenz96_drift(x: np.ndarray, theta) -> np.ndarray:
    """f_i = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + theta with cyclic indices."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 4:
        raise DimensionTooSmall(f"Lorenz 96 needs at least 4 coordinates, got {x.shape[-1]}")
    forcing = float(np.asarray(theta, dtype=float).reshape(-1)[0])
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + forcing


def _taper(r: np.ndarray) -> np.ndarray:
    return np.where((r >= 0.0) & (r <= 1.0), 1.0 - 1.5 * r + 0.5 * r**3, 0.0)


def lorenz63_observation_operators(r2: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Observation matrix and noise square root of the Lorenz 63 experiment.

    C carries 1/2 on the diagonal and first superdiagonal. R_sqrt is a tapered circulant
    distance matrix with period ``r2``.
    """
    if r2 < 1:
        raise ValueError("r2 must be a positive integer")
    C = 0.5 * (np.eye(3) + np.eye(3, k=1))
    idx = np.arange(3)
    dist = np.abs(idx[:, None] - idx[None, :])
    circ = np.minimum(dist, r2 - dist)
    R_sqrt = 2.0 * _taper(0.4 * circ)
    return C, R_sqrt


def tridiagonal(n: int, off: float, diag: float) -> np.ndarray:
    return diag * np.eye(n) + off * (np.eye(n, k=1) + np.eye(n, k=-1))


def random_observation_matrix(d_y: int, d_x: int, c_seed: int) -> np.ndarray:
    """Entries i.i.d. uniform on [0, 1], reproducible from ``c_seed``."""
    return np.random.default_rng(c_seed).uniform(0.0, 1.0, size=(d_y, d_x))


# Presets


def ou1_family(*, c: float = 1.0, q_sqrt: float = 1.0, r_sqrt: float = 1.0, m0: float = 0.0,
               p0: float = 1.0, observation_noise: bool = True) -> ModelFamily:
    """Scalar Ornstein-Uhlenbeck model, theta = drift coefficient."""

    def builder(theta: np.ndarray) -> ModelSpec:
        return build_linear_model([[theta[0]]], [[c]], [[q_sqrt]], [[r_sqrt]], [m0], [[p0]],
                                  observation_noise=observation_noise)

    return ModelFamily("ou1", ("a",), builder, (-2.0,), {"c": c, "q_sqrt": q_sqrt, "r_sqrt": r_sqrt})


def ou5_family(*, c_seed: int = 0, C: Optional[np.ndarray] = None, observation_noise: bool = True) -> ModelFamily:
    """Five-dimensional OU model of the rate study, theta = diagonal drift coefficient."""
    C = random_observation_matrix(5, 5, c_seed) if C is None else np.asarray(C, dtype=float)
    Q_sqrt = tridiagonal(5, 1.0 / 3.0, 2.0 / 3.0)

    def builder(theta: np.ndarray) -> ModelSpec:
        return build_linear_model(theta[0] * np.eye(5), C, Q_sqrt, 2.0 * np.eye(5), 0.1 * np.ones(5),
                                  0.05 * np.eye(5), observation_noise=observation_noise)

    return ModelFamily("ou5", ("a",), builder, (-0.8,), {"C": C})


def lin2_family(*, c_seed: int = 0, C: Optional[np.ndarray] = None, observation_noise: bool = True) -> ModelFamily:
    """Two-dimensional linear model with A = theta_1 Id and Q^1/2 = theta_2 tridiag(1/2, 1, 1/2)."""
    C = random_observation_matrix(2, 2, c_seed) if C is None else np.asarray(C, dtype=float)
    base = tridiagonal(2, 0.5, 1.0)

    def builder(theta: np.ndarray) -> ModelSpec:
        return build_linear_model(theta[0] * np.eye(2), C, theta[1] * base, 0.556 * np.eye(2),
                                  4.0 * np.ones(2), np.eye(2), observation_noise=observation_noise)

    return ModelFamily("lin2", ("theta_1", "theta_2"), builder, (-2.0, 1.0), {"C": C})


def l63_family(*, r2: int = 3, observation_noise: bool = True) -> ModelFamily:
    C, R_sqrt = lorenz63_observation_operators(r2)

    def builder(theta: np.ndarray) -> ModelSpec:
        drift = NonlinearDrift(lorenz63_drift, np.array(theta, dtype=float), "lorenz63")
        return build_nonlinear_model(drift, 3, C, np.eye(3), R_sqrt, np.ones(3), 0.5 * np.eye(3),
                                     observation_noise=observation_noise)

    return ModelFamily("l63", ("sigma", "rho", "beta"), builder, (10.0, 28.0, 8.0 / 3.0), {"r2": r2})


def l96_family(*, d_x: int = 40, observation_noise: bool = True, perturbed: bool = False) -> ModelFamily:
    """Lorenz 96 with C = Id, theta = forcing.

    ``perturbed`` starts every run at the point (8.01, 8, ..., 8) with P0 = 0; otherwise X_0 ~ N(8 1, 0.05 Id).
    The transport variant requires the Gaussian start.
    """
    if d_x < 4:
        raise DimensionTooSmall(f"Lorenz 96 needs at least 4 coordinates, got {d_x}")
    if perturbed:
        M0 = np.full(d_x, 8.0)
        M0[0] = 8.01
        P0 = np.zeros((d_x, d_x))
    else:
        M0, P0 = np.full(d_x, 8.0), 0.05 * np.eye(d_x)

    def builder(theta: np.ndarray) -> ModelSpec:
        drift = NonlinearDrift(lorenz96_drift, np.array(theta, dtype=float), "lorenz96")
        return build_nonlinear_model(drift, d_x, np.eye(d_x), np.sqrt(2.0) * np.eye(d_x), 0.5 * np.eye(d_x),
                                     M0, P0, observation_noise=observation_noise)

    return ModelFamily("l96", ("forcing",), builder, (8.0,), {"d_x": d_x, "perturbed": perturbed})


PRESETS: dict[str, Callable[..., ModelFamily]] = {
    "ou1": ou1_family,
    "ou5": ou5_family,
    "lin2": lin2_family,
    "l63": l63_family,
    "l96": l96_family,
}


def preset_family(name: str, **kwargs) -> ModelFamily:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"Unknown model preset '{name}'. Available: {', '.join(sorted(PRESETS))}")
    logger.debug("preset_family", preset=name)
    return factory(**kwargs)
