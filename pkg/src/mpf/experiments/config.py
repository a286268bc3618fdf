"""Experiment configuration (a single versioned JSON document)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mpf.engine import Mode, ResamplePolicy, Scheme

SCHEMA_VERSION = 1

ModelId = Literal["lgm", "lorenz96", "fhn", "fhn_statedep"]
FilterId = Literal["bootstrap", "optimal_natural", "low_noise", "degenerate"]
ALL_FILTERS: tuple[str, ...] = ("bootstrap", "optimal_natural", "low_noise", "degenerate")


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ResampleConfig(_Strict):
    scheme: Scheme = Scheme.systematic
    mode: Mode = Mode.adaptive
    threshold: float = Field(0.5, gt=0, le=1)

    def policy(self) -> ResamplePolicy:
        return ResamplePolicy(self.scheme, self.mode, self.threshold)


class Prop1Config(_Strict):
    n_particles: int = Field(50, ge=1)
    r: float = Field(2.0, gt=0)
    n_reps: int = Field(2000, ge=2)
    deltas: list[float] = [1e-2, 1e-4, 1e-6, 1e-8]
    component: int = Field(1, ge=1)


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    model: ModelId
    filter: FilterId = "low_noise"
    filters: list[FilterId] | None = None
    n_particles: int = Field(10_000, ge=1)
    delta: float | list[float] = 1e-4
    seed: int = Field(0, ge=0, lt=2**64)
    data_seed: int | None = Field(None, ge=0, lt=2**64)
    resample: ResampleConfig = ResampleConfig()
    level: int = Field(4, ge=0, le=12)
    n_steps: int | None = Field(None, ge=1)
    d_x: int | None = Field(None, ge=2)
    low_noise_proposal: Literal["optimal", "product"] = "optimal"
    marginal_components: list[int] = [1]
    marginal_times: list[int] = []
    output_dir: str = "out"
    prop1: Prop1Config | None = None

    @model_validator(mode="after")
    def _check(self):
        deltas = self.delta if isinstance(self.delta, list) else [self.delta]
        if any(d < 0 for d in deltas):
            raise ValueError("delta must be nonnegative")
        if self.filter == "degenerate" and not isinstance(self.delta, list) and self.delta != 0:
            raise ValueError("the degenerate filter requires delta = 0")
        if self.filter != "degenerate" and not isinstance(self.delta, list) and self.delta == 0:
            raise ValueError(f"filter {self.filter!r} requires delta > 0")
        if any(c < 1 for c in self.marginal_components):
            raise ValueError("marginal components are 1-based")
        return self

    @property
    def deltas(self) -> list[float]:
        return list(self.delta) if isinstance(self.delta, list) else [self.delta]

    @property
    def scalar_delta(self) -> float:
        if isinstance(self.delta, list):
            if len(self.delta) != 1:
                raise ConfigError("a single run needs a scalar delta")
            return self.delta[0]
        return self.delta

    @property
    def sweep_filters(self) -> list[str]:
        return list(self.filters) if self.filters else list(ALL_FILTERS)

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def echo(self) -> dict:
        return self.model_dump(mode="json")


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a JSON config; ``overrides`` replace top-level keys when not ``None``."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(data)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
