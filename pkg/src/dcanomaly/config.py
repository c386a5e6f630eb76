"""Run configuration: detector/mitigation parameters and the config file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; carries the offending field name."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class DetectorConfig:
    """Parameters of the per-window detection pipeline."""

    window_us: int = 10_000_000
    idle_timeout_us: int = 60_000_000
    ooo_tolerance_us: int = 1_000
    # Count c maps to score c / (c + freq_half_count) for RST and dup-ACK rates.
    freq_half_count: float = 10.0
    band_percentiles: tuple = (50.0, 90.0, 99.0)
    calibration_windows: int = 3
    min_calibration_samples: int = 8
    history_depth: int = 5
    # Per-symptom thresholds (rtt, rst, dupack, flows, size) used by the
    # history-bit builder and by misbehaving-VM classification.
    symptom_thresholds: tuple = (0.5, 0.5, 0.5, 0.5, 0.5)
    confirm_similarity: float = 0.8
    min_anomaly_size: int = 3
    min_cluster_size: int = 3
    elbow_tolerance: float = 0.05
    scatter_jump_factor: float = 3.0
    scatter_floor: float = 0.1
    max_lloyd_iterations: int = 100

    def validate(self):
        if self.window_us <= 0:
            raise ConfigError("detector.window_us", "must be > 0")
        if self.freq_half_count <= 0:
            raise ConfigError("detector.freq_half_count", "must be > 0")
        if list(self.band_percentiles) != sorted(self.band_percentiles):
            raise ConfigError("detector.band_percentiles", "must be ascending")
        if not all(0.0 < p < 100.0 for p in self.band_percentiles):
            raise ConfigError("detector.band_percentiles", "must lie in (0, 100)")
        if self.calibration_windows < 1:
            raise ConfigError("detector.calibration_windows", "must be >= 1")
        if self.history_depth < 1:
            raise ConfigError("detector.history_depth", "must be >= 1")
        if len(self.symptom_thresholds) != 5 or not all(0.0 <= t <= 1.0 for t in self.symptom_thresholds):
            raise ConfigError("detector.symptom_thresholds", "need 5 values in [0, 1]")
        if not 0.0 <= self.confirm_similarity <= 1.0:
            raise ConfigError("detector.confirm_similarity", "must lie in [0, 1]")
        if self.min_anomaly_size < 2:
            raise ConfigError("detector.min_anomaly_size", "must be >= 2")
        if self.min_cluster_size < 1:
            raise ConfigError("detector.min_cluster_size", "must be >= 1")
        if self.elbow_tolerance < 0:
            raise ConfigError("detector.elbow_tolerance", "must be >= 0")
        if self.scatter_jump_factor <= 1.0:
            raise ConfigError("detector.scatter_jump_factor", "must be > 1")
        if self.max_lloyd_iterations < 1:
            raise ConfigError("detector.max_lloyd_iterations", "must be >= 1")


@dataclass
class MitigationConfig:
    """Throttle policy applied to confirmed misbehaving VMs."""

    enabled: bool = True
    throttle_factor: float = 0.5
    ttl_windows: int = 6
    # A VM is misbehaving when at least this many of its recent reports show
    # a producer-side signature (flow surge or flow-size shift).
    min_producer_reports: int = 2

    def validate(self):
        if not 0.0 < self.throttle_factor <= 1.0:
            raise ConfigError("mitigation.throttle_factor", "must lie in (0, 1]")
        if self.ttl_windows < 1:
            raise ConfigError("mitigation.ttl_windows", "must be >= 1")
        if self.min_producer_reports < 1:
            raise ConfigError("mitigation.min_producer_reports", "must be >= 1")


MODES = ("simulate", "detect", "run")


@dataclass
class RunConfig:
    """One CLI invocation: mode, seed, scenario or trace source, parameters."""

    mode: str
    seed: int
    out_dir: str
    scenario: str | None = None  # preset name; overrides under scenario_overrides
    scenario_overrides: dict = field(default_factory=dict)
    traffic_overrides: dict = field(default_factory=dict)
    traces_dir: str | None = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    mitigation: MitigationConfig = field(default_factory=MitigationConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}")
        if self.seed is None:
            raise ConfigError("seed", "a seed is mandatory (no wall-clock seeding)")
        if not self.out_dir:
            raise ConfigError("out", "an output directory is required")
        if self.mode in ("simulate", "run") and not self.scenario:
            raise ConfigError("scenario", f"mode {self.mode!r} requires a scenario")
        if self.mode == "detect" and not self.traces_dir:
            raise ConfigError("traces", "mode 'detect' requires a trace directory")
        self.detector.validate()
        self.mitigation.validate()


def _coerce(value, target):
    """Coerce a string override onto the type of an existing default value."""
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(target, int) and not isinstance(target, bool):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        if isinstance(value, (list, tuple)):
            items = value
        else:
            items = str(value).split("|")
        elem = target[0] if target else 0.0
        return tuple(type(elem)(v) for v in items)
    return type(target)(value) if target is not None else value


def apply_field_overrides(obj, overrides: dict, prefix: str):
    """Set dataclass fields from a {name: value} mapping with type coercion."""
    names = {f.name: f for f in fields(obj)}
    for name, value in overrides.items():
        if name not in names:
            raise ConfigError(f"{prefix}.{name}", "unknown parameter")
        current = getattr(obj, name)
        try:
            setattr(obj, name, _coerce(value, current))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{prefix}.{name}", str(exc)) from exc


def load_config_file(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    return raw


def build_run_config(
    file_data: dict | None,
    mode: str,
    seed: int | None = None,
    out_dir: str | None = None,
    scenario: str | None = None,
    traces_dir: str | None = None,
    set_overrides: dict | None = None,
) -> RunConfig:
    """Merge config file values with CLI flags (flags win) into a RunConfig."""
    data = dict(file_data or {})
    detector = DetectorConfig()
    mitigation = MitigationConfig()
    apply_field_overrides(detector, data.get("detector", {}), "detector")
    apply_field_overrides(mitigation, data.get("mitigation", {}), "mitigation")

    scenario_cfg = data.get("scenario")
    scenario_name = None
    scenario_overrides: dict = {}
    if isinstance(scenario_cfg, str):
        scenario_name = scenario_cfg
    elif isinstance(scenario_cfg, dict):
        scenario_overrides = dict(scenario_cfg)
        scenario_name = scenario_overrides.pop("name", None)

    cfg = RunConfig(
        mode=mode,
        seed=seed if seed is not None else data.get("seed"),
        out_dir=out_dir or data.get("out", ""),
        scenario=scenario or scenario_name,
        scenario_overrides=scenario_overrides,
        traffic_overrides=dict(data.get("traffic", {})),
        traces_dir=traces_dir or data.get("traces"),
        detector=detector,
        mitigation=mitigation,
    )
    for dotted, value in (set_overrides or {}).items():
        section, _, name = dotted.partition(".")
        if not name:
            raise ConfigError(dotted, "overrides use section.name form")
        if section == "detector":
            apply_field_overrides(cfg.detector, {name: value}, "detector")
        elif section == "mitigation":
            apply_field_overrides(cfg.mitigation, {name: value}, "mitigation")
        elif section == "scenario":
            cfg.scenario_overrides[name] = value
        elif section == "traffic":
            cfg.traffic_overrides[name] = value
        else:
            raise ConfigError(dotted, "unknown section")
    cfg.validate()
    return cfg


def config_as_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["detector"]["band_percentiles"] = list(cfg.detector.band_percentiles)
    out["detector"]["symptom_thresholds"] = list(cfg.detector.symptom_thresholds)
    return out
