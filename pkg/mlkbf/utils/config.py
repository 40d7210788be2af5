"""YAML experiment configuration validated with pydantic."""

from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..core.enkbf import Variant
from ..core.model import ModelFamily, build_linear_model, l63_family, l96_family, preset_family
from ..core.multilevel import MLConfig
from ..core.paths import SeedSpec
from ..core.spsa import GainSchedule, SPSAConfig, default_schedule
from ..harness.rates import RateExperimentConfig

Matrix = list[list[float]]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Section):
    kind: Literal["linear", "lorenz63", "lorenz96"] = "linear"
    preset: Optional[Literal["ou1", "ou5", "lin2", "l63", "l96"]] = None
    dx: Optional[int] = None
    theta: Optional[list[float]] = None
    A: Optional[Matrix] = None
    C: Optional[Matrix] = None
    Q_sqrt: Optional[Matrix] = None
    R_sqrt: Optional[Matrix] = None
    M0: Optional[list[float]] = None
    P0: Optional[Matrix] = None
    c_seed: int = 0
    r2: int = 3
    observation_noise: bool = True
    # l96 initial law; unset means chosen from the filter variant
    perturbed: Optional[bool] = None
    # ou1 knobs
    c: float = 1.0
    q_sqrt: float = 1.0
    r_sqrt: float = 1.0
    m0: float = 0.0
    p0: float = 1.0

    @model_validator(mode="after")
    def _check_literals(self):
        if self.preset is None and self.kind == "linear":
            missing = [k for k in ("A", "C", "Q_sqrt", "R_sqrt", "M0", "P0") if getattr(self, k) is None]
            if missing:
                raise ValueError(f"linear model without preset needs {', '.join(missing)}")
        return self

    def family(self, variant: Union[Variant, str, None] = None) -> ModelFamily:
        """Parametric family described by this section.

        For l96 without an explicit ``perturbed``, the deterministic start is used unless ``variant`` is f3
        or no variant is given.
        """
        if self.preset in ("ou5", "lin2"):
            C = None if self.C is None else np.asarray(self.C, dtype=float)
            return preset_family(self.preset, c_seed=self.c_seed, C=C, observation_noise=self.observation_noise)
        if self.preset == "ou1":
            return preset_family("ou1", c=self.c, q_sqrt=self.q_sqrt, r_sqrt=self.r_sqrt,
                                 m0=self.m0, p0=self.p0, observation_noise=self.observation_noise)
        if self.preset == "l63" or (self.preset is None and self.kind == "lorenz63"):
            return l63_family(r2=self.r2, observation_noise=self.observation_noise)
        if self.preset == "l96" or (self.preset is None and self.kind == "lorenz96"):
            return l96_family(d_x=self.dx or 40, observation_noise=self.observation_noise,
                              perturbed=self._l96_perturbed(variant))

        spec = build_linear_model(self.A, self.C, self.Q_sqrt, self.R_sqrt, self.M0, self.P0,
                                  observation_noise=self.observation_noise)
        return ModelFamily("linear", (), lambda theta: spec, ())

    def _l96_perturbed(self, variant: Union[Variant, str, None]) -> bool:
        if self.perturbed is not None:
            return self.perturbed
        return variant is not None and Variant.parse(variant) is not Variant.TRANSPORT

    def theta_values(self, family: ModelFamily) -> tuple[float, ...]:
        return tuple(self.theta) if self.theta is not None else family.default_theta

    def header(self, family: ModelFamily) -> dict[str, Any]:
        """Serializable description, with any randomly drawn C and the l96 initial law written out."""
        data = self.model_dump(exclude_none=True)
        if "C" in family.metadata:
            data["C"] = np.asarray(family.metadata["C"]).tolist()
        if "perturbed" in family.metadata:
            data["perturbed"] = bool(family.metadata["perturbed"])
        return data


class DataConfig(_Section):
    level: Optional[int] = None
    horizon: int = 1
    seed: int = 0
    theta_star: Optional[list[float]] = None


class RatesConfig(_Section):
    levels: list[int] = [5, 6, 7]
    l_star: int = 4
    c0: float = 0.5
    repetitions: int = 64
    l_ref: int = 9
    reference_repetitions: int = 32
    reference_particles: int = 1000
    variants: list[Variant] = [Variant.VANILLA]
    seed: int = 0

    def to_experiment(self) -> RateExperimentConfig:
        return RateExperimentConfig(
            levels=tuple(self.levels),
            l_star=self.l_star,
            c0=self.c0,
            repetitions=self.repetitions,
            l_ref=self.l_ref,
            reference_repetitions=self.reference_repetitions,
            reference_particles=self.reference_particles,
            variants=tuple(self.variants),
            seed=self.seed,
        )


class MLSection(_Section):
    l_star: int = 3
    L: int = 5
    c0: Optional[float] = 0.1
    particles: Optional[list[int]] = None
    variant: Variant = Variant.VANILLA

    def to_ml(self) -> MLConfig:
        if self.particles is not None:
            return MLConfig(self.l_star, self.L, tuple(self.particles), self.variant)
        return MLConfig.from_allocation(self.c0, self.l_star, self.L, self.variant)


class SPSASection(_Section):
    schedule: Optional[str] = None
    a0: Optional[float] = None
    t0: Optional[int] = None
    alpha: Optional[list[float]] = None
    scale: Optional[list[float]] = None
    beta: Optional[float] = None
    b_scale: Optional[float] = None
    M: int = 100
    theta0: Optional[list[float]] = None
    seed: int = 0
    runs: int = 1
    common_random_numbers: bool = True
    propagate_with_variant: bool = False
    log_every: int = 10

    def gain_schedule(self) -> GainSchedule:
        overrides = {
            key: (tuple(value) if isinstance(value, list) else value)
            for key, value in self.model_dump(include={"a0", "t0", "alpha", "scale", "beta", "b_scale"}).items()
            if value is not None
        }
        return default_schedule(self.schedule, **overrides)


class ExperimentConfig(_Section):
    model: ModelConfig = Field(default_factory=lambda: ModelConfig(preset="ou5"))
    data: DataConfig = Field(default_factory=DataConfig)
    rates: Optional[RatesConfig] = None
    ml: MLSection = Field(default_factory=MLSection)
    spsa: Optional[SPSASection] = None

    def data_level(self) -> int:
        """Observation level: explicit, else two levels above the finest filter level."""
        if self.data.level is not None:
            return self.data.level
        finest = self.ml.L
        if self.rates is not None:
            finest = max([finest, self.rates.l_ref] + self.rates.levels)
        return finest + 2

    def spsa_config(self, family: ModelFamily) -> SPSAConfig:
        if self.spsa is None:
            raise ValueError("config has no 'spsa' section")
        theta0 = family.theta(self.spsa.theta0)
        return SPSAConfig(
            theta0=theta0,
            schedule=self.spsa.gain_schedule(),
            M=self.spsa.M,
            ml=self.ml.to_ml(),
            seed=SeedSpec(self.spsa.seed),
            common_random_numbers=self.spsa.common_random_numbers,
            propagate_with_variant=self.spsa.propagate_with_variant,
            log_every=self.spsa.log_every,
        )


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ValueError(f"Invalid config YAML: {e}")
    if not isinstance(raw, dict):
        raise ValueError("Config must be a YAML mapping")
    return ExperimentConfig.model_validate(raw)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
