"""Run configuration: one YAML document, strictly typed, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .dataset import PROFILES
from .errors import ConfigurationError
from .metrics import AP_MODES
from .model import ModelConfig
from .synth import ScenarioParams
from .training import LossConfig, TrainConfig


@dataclass
class DatasetSection:
    manifest: Optional[str] = None
    profile: str = "synthetic"
    out_dir: str = "data"
    count_pos: int = 150
    count_neg: int = 150
    scenario: ScenarioParams = field(default_factory=ScenarioParams)

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigurationError(f"dataset.profile must be one of {sorted(PROFILES)}")
        if self.count_pos < 0 or self.count_neg < 0:
            raise ConfigurationError("dataset counts must be >= 0")
        try:
            self.scenario.validate()
        except ValueError as exc:
            raise ConfigurationError(f"dataset.scenario: {exc}") from exc


@dataclass
class TrainSection(TrainConfig):
    localization_learning_rate: float = 1e-3

    def validate(self) -> None:
        super().validate()
        if self.localization_learning_rate <= 0:
            raise ConfigurationError("localization_learning_rate must be > 0")

    def for_phase(self, phase: int) -> TrainConfig:
        base = {f.name: getattr(self, f.name) for f in fields(TrainConfig)}
        if phase == 2:
            base["learning_rate"] = self.localization_learning_rate
        return TrainConfig(**base)


@dataclass
class LossSection:
    lam: float = 20.0
    eta: float = 10.0

    def validate(self) -> None:
        LossConfig(self.lam, self.eta, 1).validate()

    def for_phase(self, phase: int) -> LossConfig:
        return LossConfig(self.lam, self.eta, phase)


@dataclass
class MetricsSection:
    grid_size: int = 100
    ap_mode: str = "frame"
    recall_target: float = 0.8

    def validate(self) -> None:
        if self.grid_size < 1:
            raise ConfigurationError("metrics.grid_size must be >= 1")
        if self.ap_mode not in AP_MODES:
            raise ConfigurationError(f"metrics.ap_mode must be one of {AP_MODES}")
        if not 0 < self.recall_target <= 1:
            raise ConfigurationError("metrics.recall_target must lie in (0, 1]")


@dataclass
class AlertsSection:
    endpoint: Optional[str] = None  # None selects the offline mock client
    model: str = "default"
    template_version: str = "v1"
    threshold: float = 0.5
    persistence: int = 2
    timeout: float = 10.0
    retries: int = 2
    backoff: float = 0.5
    max_tokens: int = 128

    def validate(self) -> None:
        from .alerts import TEMPLATES

        if self.template_version not in TEMPLATES:
            raise ConfigurationError(f"alerts.template_version must be one of {sorted(TEMPLATES)}")
        if not 0 <= self.threshold < 1:
            raise ConfigurationError("alerts.threshold must lie in [0, 1)")
        if self.persistence < 1 or self.retries < 0 or self.timeout <= 0 or self.backoff < 0 or self.max_tokens < 1:
            raise ConfigurationError("alerts: persistence >= 1, retries >= 0, timeout > 0, backoff >= 0, max_tokens >= 1")


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    alerts: AlertsSection = field(default_factory=AlertsSection)
    output_dir: str = "runs"

    def validate(self) -> None:
        self.dataset.validate()
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        self.loss.validate()
        self.train.validate()
        self.metrics.validate()
        self.alerts.validate()
        sc = self.dataset.scenario
        if self.dataset.profile == "synthetic" and (sc.d_v, sc.d_o) != (self.model.d_v, self.model.d_o):
            raise ConfigurationError("model.d_v/d_o must match dataset.scenario.d_v/d_o")


_TUPLE_FIELDS = {"speed_range"}


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif name in _TUPLE_FIELDS:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _coerce(value, default, sub)
    return cls(**kwargs)


def _coerce(value, default, path):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"{path}: expected a string")
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigurationError(f"{path}: expected a list")
        return list(value)
    return value


def config_from_dict(data: dict) -> RunConfig:
    try:
        cfg = _build(RunConfig, data or {}, "")
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x

    return plain(asdict(cfg))


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(data or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
