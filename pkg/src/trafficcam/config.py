"""Run configuration loaded from TOML; every value has a working default."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import tomli

from .errors import SchemaError
from .mvcalib import MVCalibConfig
from .pnp import RansacConfig


@dataclass
class CalibrationSection:
    f_default: float = 350.0
    alpha: float = 6.0
    tau: float = MVCalibConfig.tau
    matching_evaluations: int = 4000
    finetune_evaluations: int = 20000
    rematch_rounds: int = MVCalibConfig.rematch_rounds
    seed: int = 0


@dataclass
class RansacSection:
    threshold_px: float = 8.0
    max_iterations: int = 1000
    confidence: float = 0.99


@dataclass
class MixerSection:
    beta: float = 0.25
    gamma: float = 0.25


@dataclass
class DetectionSection:
    confidence_min: float = 0.25
    iou_threshold: float = 0.5


@dataclass
class DensitySection:
    interval_s: float = 900.0


@dataclass
class FetchSection:
    interval_s: float = 120.0
    max_retries: int = 3
    backoff_s: float = 1.0
    timeout_s: float = 10.0


@dataclass
class AppConfig:
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    ransac: RansacSection = field(default_factory=RansacSection)
    mixer: MixerSection = field(default_factory=MixerSection)
    detection: DetectionSection = field(default_factory=DetectionSection)
    density: DensitySection = field(default_factory=DensitySection)
    fetch: FetchSection = field(default_factory=FetchSection)

    def mvcalib(self, **overrides) -> MVCalibConfig:
        c = self.calibration
        cfg = MVCalibConfig(
            f_default=c.f_default,
            alpha=c.alpha,
            tau=c.tau,
            matching_evaluations=c.matching_evaluations,
            finetune_evaluations=c.finetune_evaluations,
            rematch_rounds=c.rematch_rounds,
            seed=c.seed,
            ransac=RansacConfig(self.ransac.threshold_px, self.ransac.max_iterations, self.ransac.confidence),
        )
        return replace(cfg, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def config_from_dict(doc: dict) -> AppConfig:
    """Build a config, rejecting unknown sections or keys and ill-typed values."""
    cfg = AppConfig()
    sections = {f.name: f for f in fields(AppConfig)}
    for name, values in doc.items():
        if name not in sections:
            raise SchemaError("unknown config section", field=name)
        if not isinstance(values, dict):
            raise SchemaError("expected a table", field=name)
        section = getattr(cfg, name)
        known = {f.name: f for f in fields(section)}
        for key, value in values.items():
            if key not in known:
                raise SchemaError("unknown config key", field=f"{name}.{key}")
            default = getattr(section, key)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SchemaError(f"expected a number, got {value!r}", field=f"{name}.{key}")
            if isinstance(default, int) and not isinstance(value, int):
                raise SchemaError(f"expected an integer, got {value!r}", field=f"{name}.{key}")
            setattr(section, key, type(default)(value))
    return cfg


def load_config(path: Optional[str]) -> AppConfig:
    if path is None:
        return AppConfig()
    with open(path, "rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise SchemaError(f"invalid TOML: {exc}") from None
    return config_from_dict(doc)


def default_config_toml() -> str:
    lines = []
    for name, values in AppConfig().to_dict().items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {v!r}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)
