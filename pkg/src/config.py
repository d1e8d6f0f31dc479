"""
ScaForge Configuration
~~~~~~~~~~~~~~~~~~~~~~
Experiment configuration as one JSON document. Every section maps onto a
module's configuration dataclass; unknown fields and out-of-range values are
rejected with the offending field named (e.g. "leakage.sigma").
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

from .attack import AttackSettings
from .core import LeakageConfig
from .countermeasure import (
    COUNTERMEASURES,
    BleedConfig,
    DeviceModel,
    DsacConfig,
    SupplyConfig,
    TvtfConfig,
)
from .detect import DetectorSettings, RoTrackerConfig, SensorParams
from .errors import ConfigError
from .store import DTYPE_CODES, atomic_path

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "configs" / "default.json"


# ── Simulation / Sweep Sections ────────────────────────────────────────────

@dataclass
class SimulationSettings:
    n_traces: int = 5000
    n_samples: int = 64
    seed: int = 1
    countermeasures: List[str] = field(default_factory=list)
    dtype: str = "float32"

    def validate(self, prefix: str = "simulation") -> None:
        if self.n_traces < 1:
            raise ConfigError("must be >= 1", field=f"{prefix}.n_traces")
        if self.n_samples < 16:
            raise ConfigError("must be >= 16", field=f"{prefix}.n_samples")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("must be a 64-bit unsigned integer", field=f"{prefix}.seed")
        unknown = [c for c in self.countermeasures if c not in COUNTERMEASURES]
        if unknown:
            raise ConfigError(f"unknown countermeasure(s) {unknown}", field=f"{prefix}.countermeasures")
        if self.dtype not in DTYPE_CODES:
            raise ConfigError(f"must be one of {tuple(DTYPE_CODES)}", field=f"{prefix}.dtype")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class SweepSettings:
    lo: float = 0.62
    hi: float = 0.9
    step: float = 0.02

    def validate(self, prefix: str = "sweep") -> None:
        if not self.step > 0:
            raise ConfigError("must be > 0", field=f"{prefix}.step")
        if not self.lo <= self.hi:
            raise ConfigError("lo must be <= hi", field=f"{prefix}.lo")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


# ── Experiment ─────────────────────────────────────────────────────────────

SECTIONS = {
    "simulation": SimulationSettings,
    "leakage": LeakageConfig,
    "dsac": DsacConfig,
    "bleed": BleedConfig,
    "tvtf": TvtfConfig,
    "supply": SupplyConfig,
    "attack": AttackSettings,
    "sweep": SweepSettings,
    "sensor": SensorParams,
    "detector": DetectorSettings,
    "ro_tracker": RoTrackerConfig,
}


@dataclass
class ExperimentConfig:
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    leakage: LeakageConfig = field(default_factory=LeakageConfig)
    dsac: DsacConfig = field(default_factory=DsacConfig)
    bleed: BleedConfig = field(default_factory=BleedConfig)
    tvtf: TvtfConfig = field(default_factory=TvtfConfig)
    supply: SupplyConfig = field(default_factory=SupplyConfig)
    attack: AttackSettings = field(default_factory=AttackSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    sensor: SensorParams = field(default_factory=SensorParams)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    ro_tracker: RoTrackerConfig = field(default_factory=RoTrackerConfig)

    def validate(self) -> None:
        for name in SECTIONS:
            getattr(self, name).validate(name)

    def device(self) -> DeviceModel:
        return DeviceModel(
            leakage=self.leakage,
            dsac=self.dsac,
            bleed=self.bleed,
            tvtf=self.tvtf,
            supply=self.supply,
            n_samples=self.simulation.n_samples,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name).to_dict() for name in SECTIONS}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("top level must be a JSON object")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError("unknown section", field=unknown[0])
        sections = {
            name: _build_section(section_cls, data.get(name, {}), name)
            for name, section_cls in SECTIONS.items()
        }
        cfg = cls(**sections)
        cfg.validate()
        return cfg


def _coerce(value: Any, default: Any, name: str) -> Any:
    """Convert a JSON value to the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError("must be true or false", field=name)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("must be an integer", field=name)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("must be a number", field=name)
        return float(value)
    if isinstance(default, bytes):
        if not isinstance(value, str):
            raise ConfigError("must be a hex string", field=name)
        try:
            return bytes.fromhex(value)
        except ValueError:
            raise ConfigError("must be a hex string", field=name)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError("must be a string", field=name)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"must be a list of {len(default)} values", field=name)
        return tuple(_coerce(v, d, name) for v, d in zip(value, default))
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError("must be a list", field=name)
        if default:
            return [_coerce(v, default[0], name) for v in value]
        return list(value)
    return value


def _build_section(section_cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError("must be a JSON object", field=prefix)
    defaults = section_cls()
    known = {f.name for f in dataclasses.fields(section_cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError("unknown field", field=f"{prefix}.{unknown[0]}")
    values = {
        key: _coerce(value, getattr(defaults, key), f"{prefix}.{key}")
        for key, value in data.items()
    }
    return dataclasses.replace(defaults, **values)


# ── Load / Save ────────────────────────────────────────────────────────────

def load_config(path: Union[str, Path, None] = None) -> ExperimentConfig:
    """Parse and validate a configuration file; None loads the shipped default."""
    if path is None and not DEFAULT_CONFIG_PATH.exists():
        return ExperimentConfig()
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, line=e.lineno, column=e.colno)
    cfg = ExperimentConfig.from_dict(data)
    logger.debug("loaded configuration from %s", path)
    return cfg


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    """Write the effective configuration."""
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(cfg.to_dict(), f, indent=4)
            f.write("\n")
