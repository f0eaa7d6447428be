"""Experiment configuration (JSON) with validation.

Unknown keys are rejected and every validation error names the offending
key path, e.g. ``domain.radius``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .geometry import ConvexSet, DomainSpec, MetricSpec

__all__ = [
    "ConfigError",
    "MetricConfig",
    "DomainConfig",
    "FanConfig",
    "FieldConfig",
    "ConvexConfig",
    "SolverConfig",
    "TubeConfig",
    "ExperimentConfig",
    "load_config",
    "parse_config",
]


class ConfigError(ValueError):
    """Malformed or invalid configuration; ``key`` is the dotted key path."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MetricConfig(_Strict):
    kind: Literal["euclidean", "conformal"] = "euclidean"
    lambda_expr: str | None = None  # λ in g = e^{2λ} δ, an expression in x1, x2

    @model_validator(mode="after")
    def _expr_for_conformal(self):
        if self.kind == "conformal" and not self.lambda_expr:
            raise ValueError("a conformal metric needs 'lambda_expr'")
        return self

    def build(self) -> MetricSpec:
        return MetricSpec.euclidean() if self.kind == "euclidean" else MetricSpec.conformal(self.lambda_expr)


class DomainConfig(_Strict):
    radius: float = Field(1.0, gt=0)
    extension: float = Field(0.1, gt=0)

    def build(self) -> DomainSpec:
        return DomainSpec(self.radius, self.extension)


class FanConfig(_Strict):
    n_points: int = Field(64, gt=0)
    n_dirs: int = Field(32, gt=0)
    step: float = Field(1e-3, gt=0)


class FieldConfig(_Strict):
    recipe: str = "random_potential"
    params: dict = Field(default_factory=dict)


class ConvexConfig(_Strict):
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = Field(0.3, gt=0)
    margin: float = Field(0.02, gt=0)

    def build(self) -> ConvexSet:
        return ConvexSet(tuple(self.center), self.radius)


class SolverConfig(_Strict):
    lam: float = Field(1e-3, gt=0)
    rtol: float = Field(1e-8, gt=0)
    max_iter: int = Field(5000, gt=0)
    tikhonov: float = Field(1e-6, ge=0)
    step: float = Field(5e-3, gt=0)  # tracing step of reconstruction fans


class TubeConfig(_Strict):
    boundary_angle: float = 3.141592653589793
    dir_angle: float = 0.05
    eps: float = Field(0.1, gt=0)
    n_xp: int = Field(41, ge=5)
    n_xn: int = Field(400, ge=8)
    xi_check_points: int = Field(0, ge=0)

    @field_validator("n_xn")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("must be even")
        return v


class ExperimentConfig(_Strict):
    metric: MetricConfig = Field(default_factory=MetricConfig)
    domain: DomainConfig = Field(default_factory=DomainConfig)
    N: int = Field(64, ge=3)
    fan: FanConfig = Field(default_factory=FanConfig)
    m: int = Field(1, ge=0)
    moments: list[int] | None = None
    field: FieldConfig = Field(default_factory=FieldConfig)
    K: ConvexConfig | None = None
    solver: SolverConfig = Field(default_factory=SolverConfig)
    tube: TubeConfig = Field(default_factory=TubeConfig)
    samples: int = Field(200, gt=0)
    out: str | None = None
    seed: int = 42

    @field_validator("metric", mode="before")
    @classmethod
    def _metric_shorthand(cls, v):
        # "euclidean" or "conformal:<expr>"
        if isinstance(v, str):
            kind, _, expr = v.partition(":")
            return {"kind": kind.strip(), "lambda_expr": expr.strip() or None}
        return v

    @field_validator("moments")
    @classmethod
    def _moments_nonneg(cls, v):
        if v is not None and any(q < 0 for q in v):
            raise ValueError("moment orders must be non-negative")
        return v

    @model_validator(mode="after")
    def _moments_le_m(self):
        if self.moments is not None and any(q > self.m for q in self.moments):
            raise ConfigError("moments", f"moment orders must not exceed m={self.m}")
        return self

    @property
    def moment_orders(self) -> list[int]:
        return list(range(self.m + 1)) if self.moments is None else sorted(set(self.moments))


def _key_path(loc) -> str:
    return ".".join(str(p) for p in loc if not (isinstance(p, str) and p.startswith("function-")))


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "configuration must be a JSON object")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        ctx_err = err.get("ctx", {}).get("error")
        if isinstance(ctx_err, ConfigError):
            raise ctx_err from None
        raise ConfigError(_key_path(err["loc"]), err["msg"]) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}:{exc.lineno}: {exc.msg}") from None
    return parse_config(data)
