# app/schemas/experiment_config.py
# Pydantic: experiment config document (structure checked first against experiment/v1.json)
from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.errors import SpecValidationError
from app.services.channel_service import DEFAULT_ETA, GainLadder, SystemSpec, UserSpec
from app.services.entropy_power import EntropyPowerModel, TabulatedEntropyPowerModel
from app.services.interference import DEFAULT_SAMPLES, EvalSettings
from app.services.power_grid import DEFAULT_GRID_POINTS

SCHEMA_PATH = Path(__file__).resolve().parent / "experiment" / "v1.json"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------- Model ----------
class GaussianNoise(_Strict):
    kind: Literal["gaussian"]
    sigma2: float = Field(..., gt=0)


class EntropyNoise(_Strict):
    kind: Literal["entropy"]
    entropy: float


class TabulatedModel(_Strict):
    powers: List[float] = Field(..., min_length=2)
    table: List[List[float]] = Field(..., min_length=2)


class ModelConfig(_Strict):
    p: Optional[float] = Field(None, gt=0)
    noise: Optional[Union[GaussianNoise, EntropyNoise]] = None
    tabulated: Optional[TabulatedModel] = None

    @model_validator(mode="after")
    def _one_family(self) -> "ModelConfig":
        closed = self.p is not None and self.noise is not None
        if closed == (self.tabulated is not None):
            raise ValueError("give either p + noise or tabulated")
        return self


# ---------- Users ----------
class LadderConfig(_Strict):
    gains: List[float] = Field(..., min_length=2)


class UserConfig(_Strict):
    pi: List[float] = Field(..., min_length=2)
    g_bar: float = Field(..., gt=0)
    g_max: float = Field(..., gt=0)
    g_min: Optional[float] = Field(None, gt=0)


class HomogeneousConfig(UserConfig):
    count: int = Field(..., ge=1)


# ---------- Run ----------
class GridConfig(_Strict):
    m: int = Field(DEFAULT_GRID_POINTS, ge=2)


class EvalConfig(_Strict):
    method: Literal["exact", "mc", "convolve", "auto"] = "exact"
    samples: int = Field(DEFAULT_SAMPLES, ge=100)
    seed: int = Field(0, ge=0)
    tolerance: float = Field(1e-9, gt=0)


class ExperimentBlock(_Strict):
    kind: str = Field(..., min_length=1)
    parameters: Dict[str, Any] = Field(default_factory=dict)


class ExperimentConfig(_Strict):
    model: ModelConfig
    ladder: LadderConfig
    users: Optional[List[UserConfig]] = Field(None, min_length=1)
    homogeneous: Optional[HomogeneousConfig] = None
    eta: float = Field(DEFAULT_ETA, gt=0, lt=1)
    grid: GridConfig = Field(default_factory=GridConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    experiment: Optional[ExperimentBlock] = None

    @model_validator(mode="after")
    def _one_user_source(self) -> "ExperimentConfig":
        if (self.users is None) == (self.homogeneous is None):
            raise ValueError("exactly one of users / homogeneous is required")
        return self

    def parameters(self) -> Dict[str, Any]:
        return dict(self.experiment.parameters) if self.experiment else {}

    # ---------- Domain ----------
    def to_model(self, ladder: GainLadder):
        m = self.model
        if m.tabulated is not None:
            return TabulatedEntropyPowerModel(
                gains=ladder.gains,
                powers=tuple(m.tabulated.powers),
                table=tuple(tuple(r) for r in m.tabulated.table),
            )
        if isinstance(m.noise, GaussianNoise):
            return EntropyPowerModel.power_law(m.p, sigma2=m.noise.sigma2)
        return EntropyPowerModel.power_law(m.p, noise_entropy=m.noise.entropy)

    def to_system_spec(self) -> SystemSpec:
        ladder = GainLadder.of(self.ladder.gains)
        model = self.to_model(ladder)

        if self.homogeneous is not None:
            h = self.homogeneous
            try:
                user = UserSpec.of(h.pi, h.g_bar, h.g_max, h.g_min)
            except SpecValidationError as exc:
                raise exc.nested("homogeneous") from exc
            return SystemSpec.homogeneous(ladder, user, h.count, model, self.eta)

        users = []
        for i, u in enumerate(self.users or []):
            try:
                users.append(UserSpec.of(u.pi, u.g_bar, u.g_max, u.g_min))
            except SpecValidationError as exc:
                raise exc.nested(f"users[{i}]") from exc
        return SystemSpec(ladder=ladder, users=tuple(users), model=model, eta=self.eta)

    def eval_settings(self, *, method: str | None = None, seed: int | None = None, samples: int | None = None) -> EvalSettings:
        """Config values with CLI overrides applied."""
        return EvalSettings(
            method=method or self.eval.method,
            samples=samples if samples is not None else self.eval.samples,
            seed=seed if seed is not None else self.eval.seed,
            tolerance=self.eval.tolerance,
        )


# ---------- Loading ----------
@lru_cache(maxsize=1)
def experiment_schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))


def _json_path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "$"


def parse_experiment(doc: Dict[str, Any]) -> ExperimentConfig:
    """JSON Schema first (errors carry the field path), then the pydantic models."""
    validator = Draft202012Validator(experiment_schema())
    err = best_match(validator.iter_errors(doc))
    if err is not None:
        raise SpecValidationError(err.message, _json_path(err.absolute_path))
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise SpecValidationError(first["msg"], _json_path(first["loc"])) from exc


def load_experiment(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecValidationError(f"cannot read config: {exc}", str(path)) from exc
    return parse_experiment(doc)
