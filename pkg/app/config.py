"""
Configuration settings for the stochastic Navier-Stokes lab
"""
import configparser
import io
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.services.basis_noise import BasisTruncation
from app.services.dynamics import ModelVariant, Variant
from app.services.errors import ConfigError, LabError
from app.services.spectral_core import GridSpec

# Base directory (app/config.py -> app/ -> project root)
BASE_DIR = Path(__file__).parent.parent
load_dotenv(BASE_DIR / ".env")

# Output and presets
OUTPUT_ROOT = BASE_DIR / os.getenv("LAB_OUTPUT_ROOT", "runs")
PRESETS_DIR = BASE_DIR / "presets"

# Parallelism: particle work is cut into fixed chunks, workers only schedule them
DEFAULT_WORKERS = int(os.getenv("LAB_WORKERS", "1"))
CHUNK_SIZE = int(os.getenv("LAB_CHUNK_SIZE", "8"))

# Logging / progress
LOG_LEVEL = os.getenv("LAB_LOG_LEVEL", "WARNING")
SHOW_PROGRESS = os.getenv("LAB_PROGRESS", "0").lower() in ("1", "true", "yes")

# Blow-up heuristics
ENERGY_GROWTH_LIMIT = 1e6
SPECTRAL_TAIL_WARNING = 1e-3
SPECTRAL_TAIL_LIMIT = 0.1

# CSV floats carry 17 significant digits
FLOAT_FORMAT = "%.17g"


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSection(_Section):
    n: int = 2
    m: int = 32

    @field_validator("n")
    @classmethod
    def check_dimension(cls, value: int) -> int:
        if value not in (2, 3):
            raise ValueError("must be 2 or 3")
        return value

    @field_validator("m")
    @classmethod
    def check_power_of_two(cls, value: int) -> int:
        if value < 8 or value & (value - 1):
            raise ValueError("must be a power of two >= 8")
        return value


class PhysicsSection(_Section):
    eta: float = Field(0.05, gt=0)
    T: float = Field(0.25, gt=0)
    dt: float = Field(5e-4, gt=0)


class NoiseSection(_Section):
    K: int = Field(4, ge=1)
    s: float = 3.0
    seed: int = Field(0, ge=0)


class ModelSection(_Section):
    variant: Variant = Variant.V1_HAMILTONIAN
    particles: int = Field(16, ge=1)
    trajectories: int = Field(200, ge=1)
    coupling: Literal["ips", "prescribed"] = "prescribed"
    scheme: Literal["euler", "heun"] = "euler"
    line_stretching: bool = True
    identity_seeds: int = Field(8, ge=2)
    picard_iters: int = Field(6, ge=1)
    picard_damping: float = Field(1.0, gt=0, le=1)
    picard_transport: Literal["momentum", "labels"] = "momentum"


class InitialSection(_Section):
    preset: Literal["taylor_green", "random_band", "zero"] = "taylor_green"
    amplitude: float = Field(1.0, ge=0)
    band: int = Field(4, ge=1)
    seed: int = Field(1, ge=0)


class LoopSection(_Section):
    center: Optional[List[float]] = None
    radius: float = Field(0.5, gt=0)
    points: int = Field(512, ge=64)
    seeds: List[int] = Field(default_factory=lambda: [0])
    quadrature: Literal["gauss", "midpoint"] = "gauss"

    split_center = field_validator("center", mode="before")(_split_list)
    split_seeds = field_validator("seeds", mode="before")(_split_list)


class OutputSection(_Section):
    directory: str = "default"
    cadence: int = Field(50, ge=1)
    snapshots: bool = True


SECTIONS = {
    "grid": GridSection,
    "physics": PhysicsSection,
    "noise": NoiseSection,
    "model": ModelSection,
    "initial": InitialSection,
    "loop": LoopSection,
    "output": OutputSection,
}


class RunConfig(_Section):
    """Complete description of one experiment; the reproducibility unit"""

    grid: GridSection = Field(default_factory=GridSection)
    physics: PhysicsSection = Field(default_factory=PhysicsSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    model: ModelSection = Field(default_factory=ModelSection)
    initial: InitialSection = Field(default_factory=InitialSection)
    loop: LoopSection = Field(default_factory=LoopSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def cross_checks(self) -> "RunConfig":
        n = self.grid.n
        if not self.noise.s > 1 + n / 2:
            raise ConfigError("noise.s", f"must exceed 1 + n/2 = {1 + n / 2}")
        if self.physics.dt > self.physics.T:
            raise ConfigError("physics.dt", "must not exceed physics.T")
        if self.noise.K >= self.grid.m // 2:
            raise ConfigError("noise.K", "noise modes must be resolved by the grid (K < m/2)")
        if self.loop.center is not None and len(self.loop.center) != n:
            raise ConfigError("loop.center", f"needs {n} coordinates")
        if self.model.scheme == "heun" and self.model.variant is not Variant.V1_HAMILTONIAN:
            raise ConfigError("model.scheme", "heun stepping is defined for V1_HAMILTONIAN only")
        if self.model.scheme == "heun" and not self.model.line_stretching:
            raise ConfigError("model.scheme", "heun stepping needs the line-stretching term")
        return self

    # -- derived objects --------------------------------------------------

    @property
    def steps(self) -> int:
        return int(round(self.physics.T / self.physics.dt))

    def grid_spec(self) -> GridSpec:
        return GridSpec(self.grid.n, self.grid.m)

    def truncation(self) -> BasisTruncation:
        return BasisTruncation(self.grid.n, self.noise.K, self.noise.s)

    def model_variant(self, tag: Optional[Variant] = None) -> ModelVariant:
        return ModelVariant(tag or self.model.variant, self.physics.eta, self.truncation(),
                            line_stretching=self.model.line_stretching)

    def loop_center(self) -> np.ndarray:
        if self.loop.center is None:
            return np.full(self.grid.n, np.pi / 2)
        return np.asarray(self.loop.center, dtype=float)

    def derived(self) -> Dict[str, Any]:
        trunc = self.truncation()
        return {
            "nu": self.model_variant().nu,
            "c_K": trunc.c_K,
            "epsilon_K": trunc.epsilon_K,
            "basis_count": len(trunc),
            "steps": self.steps,
        }

    def with_overrides(self, seed: Optional[int] = None, directory: Optional[str] = None) -> "RunConfig":
        update = self.model_copy(deep=True)
        if seed is not None:
            update.noise.seed = seed
        if directory is not None:
            update.output.directory = directory
        return RunConfig.model_validate(update.model_dump())

    # -- INI serialization --------------------------------------------------

    def to_ini(self, include_derived: bool = False) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name in SECTIONS:
            section = getattr(self, name)
            parser[name] = {key: _format_value(value) for key, value in section.model_dump().items() if value is not None}
        if include_derived:
            parser["derived"] = {key: _format_value(value) for key, value in self.derived().items()}
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError("file", str(e).splitlines()[0])
        raw: Dict[str, Dict[str, str]] = {}
        for name in parser.sections():
            if name == "derived":
                continue
            if name not in SECTIONS:
                raise ConfigError(name, "unknown section")
            raw[name] = dict(parser[name])
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            error = e.errors()[0]
            key = ".".join(str(part) for part in error["loc"]) or "config"
            raise ConfigError(key, error["msg"])


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(item) for item in value)
    if isinstance(value, Variant):
        return value.value
    return str(value)


def load_config(path) -> RunConfig:
    """Read a run configuration file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    return RunConfig.from_ini(path.read_text())


def resolve_output_dir(config: RunConfig) -> Path:
    directory = Path(config.output.directory)
    if not directory.is_absolute():
        directory = OUTPUT_ROOT / directory
    return directory


def resolve_workers(workers: Optional[int]) -> int:
    value = DEFAULT_WORKERS if workers is None else workers
    if value < 1:
        raise LabError(f"worker count must be >= 1, got {value}")
    return value
