"""Experiment configuration for the command-line runner.

Values are resolved in layers: model defaults, then a ``--config`` key=value
file, then ``QPIMAGING_*`` environment variables, then explicit flags. Every
layer goes through the same pydantic models with ``extra="forbid"``, so a
misspelled key fails loudly instead of silently falling back to a default.

Plan keys are written ``plan.eps=0.1`` in files and ``QPIMAGING_PLAN_EPS`` in
the environment. List-valued keys take comma-separated values; ``constants``
takes ``name:value`` pairs.
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..sim.errors import ConfigError
from ..sim.kvtext import read_kv
from ..sim.qpca import U64
from ..sim.qsp import C_L, DEGREE_CAP

ENV_PREFIX = "QPIMAGING_"
# env vars under the prefix that configure something other than the experiment
RESERVED_ENV = ("QPIMAGING_DB_PATH", "QPIMAGING_LOG_LEVEL")
RESERVED_ENV_PREFIXES = ("QPIMAGING_STRESS_", "QPIMAGING_BENCH_")

COMMANDS = (
    "scene", "filter", "estimate", "tomography", "davis-kahan", "complexity",
    "resources", "selftest",
)
Mode = Literal["ideal", "circuit", "analytic", "shot"]

BUNDLED_SCENE = Path(__file__).resolve().parent.parent / "data" / "two_source.scene"


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class PlanConfig(BaseModel):
    """Filter-plan overrides. ``r_prior`` unset means: run the prior pass."""

    model_config = ConfigDict(extra="forbid")

    eps: float = Field(default=0.1, gt=0, lt=1)
    delta: float = Field(default=0.05, gt=0, lt=1)
    r_prior: Optional[float] = Field(default=None, gt=0.5, le=1)
    c_l: float = Field(default=C_L, gt=0)
    kappa: Optional[float] = Field(default=None, gt=0)
    k: Optional[int] = Field(default=None, ge=1)
    degree_cap: int = Field(default=DEGREE_CAP, ge=1)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: str
    scene: Optional[str] = None
    plan: PlanConfig = Field(default_factory=PlanConfig)
    trials: int = Field(default=100, ge=1)
    shots: int = Field(default=10_000, ge=0)
    mode: Mode = "circuit"
    master_seed: int = Field(default=0, ge=0, le=U64)
    out: str = "out"
    workers: int = Field(default=1, ge=1)
    gamma: Optional[float] = Field(default=None, ge=0, lt=1)
    trajectory: bool = False
    budget: Optional[int] = Field(default=None, ge=1)
    observable: Literal["random", "pixel"] = "random"
    observable_pixel: int = Field(default=0, ge=0)
    tomography_dims: List[int] = Field(default_factory=lambda: [4, 16])
    tomography_copies: List[int] = Field(default_factory=lambda: [10_000, 100_000])
    tomography_rank: int = Field(default=2, ge=1)
    reconstructor: Literal["linear", "diluted_mle"] = "linear"
    dk_r_points: int = Field(default=9, ge=1)
    dk_eps_points: int = Field(default=12, ge=1)
    grid_n: List[int] = Field(default_factory=lambda: [10])
    grid_r: List[float] = Field(default_factory=lambda: [10.0 / 11.0])
    grid_gamma: List[float] = Field(default_factory=lambda: [0.0, 1e-3])
    grid_eps: List[float] = Field(default_factory=lambda: [0.1])
    constants: Dict[str, float] = Field(default_factory=dict)
    n_pixels: int = Field(default=10, ge=2)
    eps_st: float = Field(default=0.1, gt=0, lt=1)
    snr: Optional[float] = Field(default=None, gt=0)
    # estimate: truth-derived reference and prior only when validation is set
    validation: bool = False
    reference_path: Optional[str] = None
    ref_signs: Optional[List[int]] = None
    ref_phase: Optional[float] = None

    @field_validator("command")
    @classmethod
    def _known_command(cls, v: str) -> str:
        if v not in COMMANDS:
            raise ValueError(f"unknown command {v!r}")
        return v

    @field_validator(
        "tomography_dims", "tomography_copies", "grid_n", "grid_r", "grid_gamma", "grid_eps",
        "ref_signs", mode="before",
    )
    @classmethod
    def _lists(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("constants", mode="before")
    @classmethod
    def _pairs(cls, v: Any) -> Any:
        if not isinstance(v, str):
            return v
        out: Dict[str, str] = {}
        for item in _split_list(v):
            name, sep, value = item.partition(":")
            if not sep:
                raise ValueError(f"constant {item!r} is not name:value")
            out[name.strip()] = value.strip()
        return out

    @field_validator("ref_signs")
    @classmethod
    def _sign_pair(cls, v: Optional[List[int]]) -> Optional[List[int]]:
        if v is None:
            return v
        if len(v) != 2 or any(s not in (-1, 0, 1) for s in v):
            raise ValueError("ref_signs takes two entries from -1, 0, 1 (sign of Re, sign of Im)")
        if v == [0, 0]:
            raise ValueError("ref_signs cannot both be 0")
        return v

    @model_validator(mode="after")
    def _one_prior(self) -> "ExperimentConfig":
        if self.ref_signs is not None and self.ref_phase is not None:
            raise ValueError("give ref_signs or ref_phase, not both")
        return self

    def scene_path(self) -> Path:
        return Path(self.scene) if self.scene else BUNDLED_SCENE

    def hashed_view(self) -> Dict[str, Any]:
        """Config fields that determine output numbers (no paths or workers)."""
        return self.model_dump(mode="json", exclude={"out", "workers"})


def env_layer(environ: Mapping[str, str]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX) or key in RESERVED_ENV:
            continue
        if key.startswith(RESERVED_ENV_PREFIXES):
            continue
        out[key[len(ENV_PREFIX):].lower()] = value
    return out


def _nest(values: Mapping[str, Any]) -> Dict[str, Any]:
    """Route ``plan.x`` / ``plan_x`` keys into the nested plan dict."""
    top: Dict[str, Any] = {}
    plan: Dict[str, Any] = {}
    for key, value in values.items():
        if key.startswith("plan.") or key.startswith("plan_"):
            plan[key[5:]] = value
        else:
            top[key] = value
    if plan:
        top["plan"] = plan
    return top


def _merge(layers: List[Dict[str, Any]]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for layer in layers:
        for key, value in layer.items():
            if key == "plan":
                merged = dict(out.get("plan", {}))
                merged.update(value)
                out["plan"] = merged
            else:
                out[key] = value
    return out


def validation_to_config_error(exc: ValidationError, what: str) -> ConfigError:
    first = exc.errors()[0]
    loc = ".".join(str(p) for p in first.get("loc", ()))
    kind = first.get("type")
    code = "UNKNOWN_KEY" if kind == "extra_forbidden" else (
        "MISSING_KEY" if kind == "missing" else "BAD_VALUE")
    return ConfigError(f"{what} key {loc!r}: {first.get('msg')}", code=code)


def resolve_config(
    command: str,
    *,
    config_file: Optional[Union[str, Path]] = None,
    environ: Optional[Mapping[str, str]] = None,
    flags: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """Merge defaults < file < environment < flags into one validated config."""
    layers: List[Dict[str, Any]] = [{"command": command}]
    if config_file is not None:
        file_values = read_kv(config_file)
        if "command" in file_values and file_values["command"] != command:
            raise ConfigError(
                f"config file is for {file_values['command']!r}, not {command!r}",
                code="BAD_VALUE",
            )
        layers.append(_nest(file_values))
    if environ is not None:
        layers.append(_nest(env_layer(environ)))
    if flags:
        layers.append(_nest({k: v for k, v in flags.items() if v is not None}))
    try:
        return ExperimentConfig(**_merge(layers))
    except ValidationError as exc:
        raise validation_to_config_error(exc, "config") from exc
