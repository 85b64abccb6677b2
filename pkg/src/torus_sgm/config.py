"""Typed experiment configuration, loaded from TOML with unknown keys rejected."""

from typing import Literal

import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

KINDS = (
    "wup-sweep",
    "esm-certify",
    "dsm-pointwise",
    "early-stopping-sweep",
    "memorization",
    "average-dsm",
    "contraction",
    "identities",
    "bernstein",
)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DomainCfg(_Strict):
    radius: float = Field(gt=0)
    dim: Literal[1, 2] = 1


class TargetCfg(_Strict):
    """Wrapped Gaussian mixture; a zero variance gives a Dirac mass."""

    type: Literal["mixture", "uniform"] = "mixture"
    weights: list[float] = Field(default_factory=list)
    means: list[list[float]] = Field(default_factory=list)
    variances: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _shapes(self):
        if self.type == "mixture":
            n = len(self.weights)
            if n == 0 or len(self.means) != n or len(self.variances) != n:
                raise ValueError("mixture needs weights, means and variances of equal nonzero length")
            if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1) > 1e-9:
                raise ValueError("mixture weights must be nonnegative and sum to 1")
            if any(v < 0 for v in self.variances):
                raise ValueError("variances must be nonnegative")
        return self


class SolverCfg(_Strict):
    grid_n: int = Field(256, ge=8, le=4096)
    time_steps: int = Field(400, ge=4, le=200_000)


class SdeCfg(_Strict):
    dt: float = Field(gt=0)
    particles: int = Field(ge=1, le=10_000_000)


class TrainingCfg(_Strict):
    steps: int = Field(2000, ge=1)
    batch: int = Field(256, ge=2)
    lr: float = Field(3e-3, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    fourier_order: int = Field(6, ge=1, le=16)
    width: int = Field(32, ge=1, le=256)
    norm_cap: float | None = Field(None, gt=0)


class SweepAxis(_Strict):
    axis: str
    values: list[float]


class ExperimentConfig(_Strict):
    kind: Literal[KINDS]
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str | None = None
    domain: DomainCfg
    target: TargetCfg | None = None
    solver: SolverCfg = SolverCfg()
    sde: SdeCfg | None = None
    training: TrainingCfg | None = None
    sweep: list[SweepAxis] = Field(default_factory=list)
    horizon: float | None = Field(None, gt=0)
    epsilon: float | None = Field(None, gt=0)
    window: tuple[float, float] | None = None
    sample_size: int | None = Field(None, ge=1)
    trials: int | None = Field(None, ge=1)
    control: Literal["trained", "exact"] = "trained"
    sampling: Literal["iid", "stratified"] = "iid"

    @model_validator(mode="after")
    def _kind_requirements(self):
        need = {
            "wup-sweep": ("target", "horizon", "sweep:delta_p"),
            "esm-certify": ("target", "horizon", "sde"),
            "dsm-pointwise": ("target", "horizon", "epsilon", "sample_size", "training"),
            "early-stopping-sweep": ("target", "sweep:epsilon"),
            "memorization": ("sample_size", "epsilon", "horizon", "training", "sde"),
            "average-dsm": ("target", "horizon", "epsilon", "sample_size", "sde", "trials"),
            "contraction": ("target", "sweep:time_fraction"),
            "identities": ("target", "window"),
            "bernstein": ("horizon", "sweep:grad_b", "sweep:grid_n"),
        }[self.kind]
        for item in need:
            if item.startswith("sweep:"):
                if self.axis(item[6:]) is None:
                    raise ValueError(f"{self.kind} needs a sweep axis '{item[6:]}'")
            elif getattr(self, item) is None:
                raise ValueError(f"{self.kind} needs field '{item}'")
        if self.kind == "average-dsm":
            if self.trials < 8:
                raise ValueError("average-dsm needs trials >= 8")
            if self.control == "trained" and self.training is None:
                raise ValueError("average-dsm with trained scores needs field 'training'")
        if self.sampling == "stratified" and self.domain.dim != 1:
            raise ValueError("stratified sampling needs dim = 1")
        if self.window is not None and not 0 <= self.window[0] <= self.window[1]:
            raise ValueError("window must satisfy 0 <= lo <= hi")
        if self.target is not None and self.target.type == "mixture":
            if any(len(m) != self.domain.dim for m in self.target.means):
                raise ValueError("target means must have domain.dim coordinates")
        return self

    def axis(self, name):
        for a in self.sweep:
            if a.axis == name:
                return list(a.values)
        return None


class ConfigError(Exception):
    """Configuration could not be read or validated; the message names the field."""


def _format(err):
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_config(data):
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format(err)) from None


def load_config(path, seed=None):
    try:
        with open(path, "rb") as f:
            data = tomli.load(f)
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    if seed is not None:
        data["seed"] = int(seed)
    return parse_config(data)


def config_schema():
    return ExperimentConfig.model_json_schema()
