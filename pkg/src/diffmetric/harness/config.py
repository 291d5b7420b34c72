"""Experiment configuration: strict TOML schema with materialised defaults."""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSpec(_Strict):
    kind: Literal["linear", "two-cluster", "signed-design", "replicated"] = "linear"
    n: int = Field(8, ge=1)
    m: int = Field(2, ge=1)
    noise: float = Field(0.1, ge=0)
    separation: float = 1.0


class ModelSpec(_Strict):
    architecture: Literal["quadratic", "linear-regression", "two-layer"]
    dataset: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    hidden: int = Field(4, ge=1)
    activation: Literal["tanh", "identity"] = "tanh"
    curvature: Optional[list[float]] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.dataset is None) == (self.synthetic is None):
            raise ValueError("exactly one of 'dataset' or 'synthetic' must be given")
        return self


class InitSpec(_Strict):
    scale: float = Field(0.5, ge=0)
    x0: Optional[list[float]] = None


class EpsilonSpec(_Strict):
    c: float = Field(0.1, gt=0, lt=1)
    floor: float = Field(1e-3, gt=0)
    frozen: bool = False
    per_point: Optional[bool] = None

    @model_validator(mode="after")
    def _exclusive(self):
        if self.frozen and self.per_point:
            raise ValueError("'frozen' and 'per_point' are mutually exclusive")
        self.per_point = not self.frozen
        return self


class MethodSpec(_Strict):
    method: Literal["gd", "sgd", "gd-flow", "rgd", "geodesic"]
    eta: float = Field(0.01, gt=0)
    steps: int = Field(100, ge=1)
    batch_size: Optional[int] = Field(None, ge=1)
    sampling: Literal["independent", "epoch"] = "independent"
    christoffel: Literal["weak-field", "exact-fd"] = "weak-field"
    inverse: Optional[Literal["weak-field", "exact"]] = None
    velocity: Literal["metric-gradient", "zero", "custom"] = "metric-gradient"
    v0: Optional[list[float]] = None

    @model_validator(mode="after")
    def _defaults(self):
        if self.inverse is None:
            self.inverse = "exact" if self.method == "geodesic" else "weak-field"
        if self.velocity == "custom" and self.v0 is None:
            raise ValueError("velocity = 'custom' requires v0")
        return self


class DiagnosticsSpec(_Strict):
    enabled: bool = True
    christoffel_step: float = Field(1e-4, gt=0)


class OutputSpec(_Strict):
    dir: str = "out"
    figures: bool = True


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    seeds: list[int] = Field(default_factory=lambda: [0])
    cadence: int = Field(1, ge=1)
    convention: Literal["sum", "mean"] = "sum"
    model: ModelSpec
    init: InitSpec = Field(default_factory=InitSpec)
    epsilon: EpsilonSpec = Field(default_factory=EpsilonSpec)
    dynamics: list[MethodSpec] = Field(min_length=1)
    diagnostics: DiagnosticsSpec = Field(default_factory=DiagnosticsSpec)
    output: OutputSpec = Field(default_factory=OutputSpec)

    #: directory relative paths are resolved against (not serialised)
    base_dir: Path = Field(default=Path("."), exclude=True)

    @model_validator(mode="after")
    def _unique_methods(self):
        names = [d.method for d in self.dynamics]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ValueError(f"methods configured more than once: {dup}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        return self

    def dataset_path(self) -> Path | None:
        if self.model.dataset is None:
            return None
        p = Path(self.model.dataset)
        return p if p.is_absolute() else self.base_dir / p

    def resolved(self) -> dict:
        """Configuration with all defaults materialised, JSON-ready."""
        return self.model_dump(mode="json")


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) if not isinstance(p, int) else f"[{p}]" for p in err["loc"]).replace(".[", "[")
        lines.append(f"  {loc or '<root>'}: {err['msg']}")
    return "\n".join(lines)


def config_from_dict(data: dict, base_dir: Path | str = ".", source: str = "<dict>") -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate({**data, "base_dir": Path(base_dir)})
    except ValidationError as exc:
        raise ConfigError(f"{source}: invalid configuration\n{_format_errors(exc)}") from None
    _check_dataset_dependent(cfg, source)
    return cfg


def parse_config(path) -> ExperimentConfig:
    """Read and validate a TOML experiment file; unknown keys are rejected."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "base_dir" in data:
        raise ConfigError(f"{path}: unknown key 'base_dir'")
    return config_from_dict(data, path.parent, str(path))


def _check_dataset_dependent(cfg: ExperimentConfig, source: str):
    from .data import count_rows

    if cfg.model.synthetic is not None:
        n = cfg.model.synthetic.n
    else:
        path = cfg.dataset_path()
        if not path.is_file():
            raise ConfigError(f"{source}: model.dataset: file not found: {path}")
        n = count_rows(path)
    for k, spec in enumerate(cfg.dynamics):
        if spec.batch_size is not None and spec.batch_size > n:
            raise ConfigError(
                f"{source}: dynamics[{k}].batch_size: {spec.batch_size} exceeds dataset size N={n}"
            )
