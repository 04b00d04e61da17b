#!/usr/bin/env python3
"""
Link configuration: source, fibre, detector and clock parameters plus the
analyzer schedule, read from flat `key = value` files.

Units are part of the key name (`fibre_loss_db`, `dead_time_ps_sicily_ch0`).
Schedule intervals are written as

    interval_000 = start_s, malta_deg, sicily_deg, duration_s

and may appear in a link config or in a stand-alone schedule file.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from quantum_state import LocalUnitary, Side, rotation_unitary

logger = logging.getLogger(__name__)

STATIONS = ("malta", "sicily")
CHANNELS = (0, 1)


class ConfigError(ValueError):
    """Raised for invalid configuration or schedule files."""


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 1.0
    dark_rate: float = 0.0  # counts per second
    dead_time_ps: int = 0
    jitter_fwhm_ps: float = 0.0

    def validate(self, name: str = "detector"):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigError(f"{name}: efficiency must lie in [0, 1], got {self.efficiency}")
        if self.dark_rate < 0:
            raise ConfigError(f"{name}: dark_rate must be >= 0, got {self.dark_rate}")
        if self.dead_time_ps < 0:
            raise ConfigError(f"{name}: dead_time_ps must be >= 0, got {self.dead_time_ps}")
        if self.jitter_fwhm_ps < 0:
            raise ConfigError(f"{name}: jitter_fwhm_ps must be >= 0, got {self.jitter_fwhm_ps}")


@dataclass(frozen=True)
class ClockConfig:
    offset_ps: int = 0
    drift_ppm: float = 0.0
    resolution_ps: int = 1
    jitter_fwhm_ps: float = 0.0  # time-tagging unit jitter

    def validate(self, name: str = "clock"):
        if self.resolution_ps < 1:
            raise ConfigError(f"{name}: resolution_ps must be >= 1, got {self.resolution_ps}")
        if self.jitter_fwhm_ps < 0:
            raise ConfigError(f"{name}: jitter_fwhm_ps must be >= 0, got {self.jitter_fwhm_ps}")


@dataclass(frozen=True)
class ScheduleInterval:
    start_s: float
    malta_angle: float  # radians, polariser axis
    sicily_angle: float
    duration_s: float

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s


@dataclass(frozen=True)
class LinkConfig:
    pair_rate: float = 1.0e6
    duration_s: float = 1.0
    malta_arm_efficiency: float = 1.0
    sicily_arm_efficiency: float = 1.0
    fibre_loss_db: float = 0.0
    fibre_delay_ps: int = 0
    dispersion_fwhm_ps: float = 0.0
    channel_rotvec_deg: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    compensate_channel: bool = False
    compensation_reference_counts: int = 0
    v_werner: float = 1.0
    hv_dephasing: float = 0.0
    malta_angle: float = 0.0
    sicily_angle: float = 0.0
    signal_wavelength_nm: float = 1548.52
    idler_wavelength_nm: float = 1551.72
    detectors: Dict[Tuple[str, int], DetectorConfig] = field(
        default_factory=lambda: {(s, c): DetectorConfig() for s in STATIONS for c in CHANNELS})
    clocks: Dict[str, ClockConfig] = field(default_factory=lambda: {s: ClockConfig() for s in STATIONS})
    schedule: Tuple[ScheduleInterval, ...] = ()
    source_text: str = ""

    @property
    def fibre_transmission(self) -> float:
        return 10.0 ** (-self.fibre_loss_db / 10.0)

    @property
    def channel_unitary(self) -> LocalUnitary:
        return LocalUnitary(rotation_unitary(self.channel_rotvec_deg), Side.SICILY)

    def detector(self, station: str, channel: int) -> DetectorConfig:
        return self.detectors[(station, channel)]

    def effective_schedule(self) -> Tuple[ScheduleInterval, ...]:
        """Configured schedule, or one interval over duration_s at the default angles."""
        if self.schedule:
            return self.schedule
        return (ScheduleInterval(0.0, self.malta_angle, self.sicily_angle, self.duration_s),)

    @property
    def run_duration_s(self) -> float:
        return max(iv.end_s for iv in self.effective_schedule())

    def validate(self) -> "LinkConfig":
        if not self.pair_rate >= 0:
            raise ConfigError(f"pair_rate must be >= 0, got {self.pair_rate}")
        if self.duration_s < 0:
            raise ConfigError(f"duration_s must be >= 0, got {self.duration_s}")
        for name in ("malta_arm_efficiency", "sicily_arm_efficiency"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.fibre_loss_db < 0:
            raise ConfigError(f"fibre_loss_db must be >= 0, got {self.fibre_loss_db}")
        if self.fibre_delay_ps < 0:
            raise ConfigError(f"fibre_delay_ps must be >= 0, got {self.fibre_delay_ps}")
        if self.dispersion_fwhm_ps < 0:
            raise ConfigError(f"dispersion_fwhm_ps must be >= 0, got {self.dispersion_fwhm_ps}")
        if not 0.0 <= self.v_werner <= 1.0:
            raise ConfigError(f"v_werner must lie in [0, 1], got {self.v_werner}")
        if not 0.0 <= self.hv_dephasing <= 1.0:
            raise ConfigError(f"hv_dephasing must lie in [0, 1], got {self.hv_dephasing}")
        if self.compensation_reference_counts < 0:
            raise ConfigError("compensation_reference_counts must be >= 0")
        for (station, channel), det in self.detectors.items():
            det.validate(f"{station} ch{channel}")
        for station, clock in self.clocks.items():
            clock.validate(f"{station} clock")
        validate_schedule(self.schedule)
        return self


def validate_schedule(schedule) -> None:
    previous_end = None
    for index, interval in enumerate(schedule):
        if interval.start_s < 0 or interval.duration_s <= 0:
            raise ConfigError(f"schedule interval {index} must have start >= 0 and duration > 0")
        if previous_end is not None and interval.start_s < previous_end - 1e-12:
            raise ConfigError(f"schedule interval {index} overlaps or precedes the previous interval")
        previous_end = interval.end_s


# --- File grammar ---

_SCALAR_KEYS = {
    "pair_rate_hz": ("pair_rate", float),
    "duration_s": ("duration_s", float),
    "malta_arm_efficiency": ("malta_arm_efficiency", float),
    "sicily_arm_efficiency": ("sicily_arm_efficiency", float),
    "fibre_loss_db": ("fibre_loss_db", float),
    "fibre_delay_ps": ("fibre_delay_ps", int),
    "dispersion_fwhm_ps": ("dispersion_fwhm_ps", float),
    "compensate_channel": ("compensate_channel", "bool"),
    "compensation_reference_counts": ("compensation_reference_counts", int),
    "v_werner": ("v_werner", float),
    "hv_dephasing": ("hv_dephasing", float),
    "malta_angle_deg": ("malta_angle", "angle"),
    "sicily_angle_deg": ("sicily_angle", "angle"),
    "signal_wavelength_nm": ("signal_wavelength_nm", float),
    "idler_wavelength_nm": ("idler_wavelength_nm", float),
}
_ROTVEC_KEYS = {"channel_rotvec_s1_deg": 0, "channel_rotvec_s2_deg": 1, "channel_rotvec_s3_deg": 2}
_DETECTOR_FIELDS = {
    "efficiency": ("efficiency", float),
    "dark_rate_hz": ("dark_rate", float),
    "dead_time_ps": ("dead_time_ps", int),
    "jitter_fwhm_ps": ("jitter_fwhm_ps", float),
}
_CLOCK_FIELDS = {
    "clock_offset_ps": ("offset_ps", int),
    "clock_drift_ppm": ("drift_ppm", float),
    "clock_resolution_ps": ("resolution_ps", int),
    "clock_jitter_fwhm_ps": ("jitter_fwhm_ps", float),
}


def _convert(raw: str, kind, where: str):
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "angle":
            return math.radians(float(raw))
        if kind is int:
            value = float(raw)
            if value != int(value):
                raise ValueError(raw)
            return int(value)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {raw!r}") from None


def _parse_lines(text: str, origin: str) -> List[Tuple[int, str, str]]:
    entries = []
    seen = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{origin}:{lineno}: empty key or value")
        if key in seen:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        entries.append((lineno, key, value))
    return entries


def _parse_interval(value: str, where: str) -> ScheduleInterval:
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"{where}: interval needs 'start_s, malta_deg, sicily_deg, duration_s'")
    start, malta, sicily, duration = (_convert(p, float, where) for p in parts)
    return ScheduleInterval(start, math.radians(malta), math.radians(sicily), duration)


def _split_station_key(key: str) -> Optional[Tuple[str, str, Optional[int]]]:
    """'dead_time_ps_sicily_ch0' -> ('dead_time_ps', 'sicily', 0); 'clock_offset_ps_malta' -> (..., 'malta', None)."""
    for station in STATIONS:
        for channel in CHANNELS:
            suffix = f"_{station}_ch{channel}"
            if key.endswith(suffix):
                return key[: -len(suffix)], station, channel
        suffix = f"_{station}"
        if key.endswith(suffix):
            return key[: -len(suffix)], station, None
    return None


def parse_config_text(text: str, origin: str = "<config>") -> LinkConfig:
    values = {}
    rotvec = [0.0, 0.0, 0.0]
    detector_values = {(s, c): {} for s in STATIONS for c in CHANNELS}
    clock_values = {s: {} for s in STATIONS}
    intervals = []

    for lineno, key, raw in _parse_lines(text, origin):
        where = f"{origin}:{lineno}"
        if key in _SCALAR_KEYS:
            attr, kind = _SCALAR_KEYS[key]
            values[attr] = _convert(raw, kind, where)
            continue
        if key in _ROTVEC_KEYS:
            rotvec[_ROTVEC_KEYS[key]] = _convert(raw, float, where)
            continue
        if key.startswith("interval_"):
            intervals.append((key, _parse_interval(raw, where)))
            continue
        split = _split_station_key(key)
        if split:
            base, station, channel = split
            if channel is not None and base in _DETECTOR_FIELDS:
                attr, kind = _DETECTOR_FIELDS[base]
                detector_values[(station, channel)][attr] = _convert(raw, kind, where)
                continue
            if channel is None and base in _CLOCK_FIELDS:
                attr, kind = _CLOCK_FIELDS[base]
                clock_values[station][attr] = _convert(raw, kind, where)
                continue
        raise ConfigError(f"{where}: unknown key {key!r}")

    intervals.sort(key=lambda item: item[0])
    cfg = LinkConfig(
        channel_rotvec_deg=tuple(rotvec),
        detectors={k: DetectorConfig(**v) for k, v in detector_values.items()},
        clocks={k: ClockConfig(**v) for k, v in clock_values.items()},
        schedule=tuple(interval for _, interval in intervals),
        source_text=text,
        **values,
    )
    return cfg.validate()


def load_config(path) -> LinkConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    logger.info("Loaded link config %s", path)
    return parse_config_text(text, str(path))


def parse_schedule_text(text: str, origin: str = "<schedule>") -> Tuple[ScheduleInterval, ...]:
    intervals = []
    for lineno, key, raw in _parse_lines(text, origin):
        if not key.startswith("interval_"):
            raise ConfigError(f"{origin}:{lineno}: unknown schedule key {key!r}")
        intervals.append((key, _parse_interval(raw, f"{origin}:{lineno}")))
    intervals.sort(key=lambda item: item[0])
    schedule = tuple(interval for _, interval in intervals)
    validate_schedule(schedule)
    return schedule


def load_schedule(path) -> Tuple[ScheduleInterval, ...]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read schedule {path}: {e}") from e
    return parse_schedule_text(text, str(path))


def with_schedule(cfg: LinkConfig, schedule) -> LinkConfig:
    validate_schedule(schedule)
    return replace(cfg, schedule=tuple(schedule))


def canonical_text(cfg: LinkConfig) -> str:
    """Sorted `key = value` form of every parameter; the digest is taken over this."""
    lines = {}
    for key, (attr, kind) in _SCALAR_KEYS.items():
        value = getattr(cfg, attr)
        lines[key] = repr(math.degrees(value)) if kind == "angle" else repr(value)
    for key, index in _ROTVEC_KEYS.items():
        lines[key] = repr(float(cfg.channel_rotvec_deg[index]))
    for (station, channel), det in cfg.detectors.items():
        for base, (attr, _) in _DETECTOR_FIELDS.items():
            lines[f"{base}_{station}_ch{channel}"] = repr(getattr(det, attr))
    for station, clock in cfg.clocks.items():
        for base, (attr, _) in _CLOCK_FIELDS.items():
            lines[f"{base}_{station}"] = repr(getattr(clock, attr))
    for index, iv in enumerate(cfg.schedule):
        lines[f"interval_{index:03d}"] = ", ".join(
            repr(x) for x in (iv.start_s, math.degrees(iv.malta_angle), math.degrees(iv.sicily_angle), iv.duration_s))
    return "".join(f"{key} = {lines[key]}\n" for key in sorted(lines))


def config_digest(cfg: LinkConfig) -> bytes:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).digest()

