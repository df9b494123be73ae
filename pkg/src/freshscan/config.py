"""Pipeline configuration: paper-default parameters, TOML files, echo files.

Config files are TOML with one section per subcommand (e.g. [synth], [scan]);
command-line flags override file values. Every run writes back the fully
resolved section next to its outputs, and rerunning from that echo file
reproduces the outputs bit for bit for the seeded stages.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Malformed or contradictory configuration."""


@dataclass(frozen=True)
class PipelineConfig:
    """Shared pipeline parameters; the defaults are the survey's canonical
    values (300 px windows, 75 px stride, 600 m grouping, 0.5 / 0.95
    thresholds, ten 100-tiu bins, 100 per bin, top-1000)."""

    window_size: int = 300
    stride: int = 75
    grouping_radius_m: float = 600.0
    nondetect_threshold: float = 0.5
    detection_threshold: float = 0.95
    ti_bin_edges: tuple[float, ...] = tuple(float(v) for v in range(0, 1001, 100))
    per_bin: int = 100
    k: int = 1000
    lat_min: float = -60.0
    lat_max: float = 60.0
    parallelism: int = 1
    seed: int = 7

    def __post_init__(self):
        for name in ("nondetect_threshold", "detection_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.window_size < 1 or self.stride < 1:
            raise ConfigError("window_size and stride must be >= 1")
        if self.grouping_radius_m <= 0:
            raise ConfigError("grouping_radius_m must be > 0")
        if len(self.ti_bin_edges) < 2 or any(
                a >= b for a, b in zip(self.ti_bin_edges, self.ti_bin_edges[1:])):
            raise ConfigError("ti_bin_edges must be strictly increasing with >= 2 edges")
        if self.per_bin < 0 or self.k < 0:
            raise ConfigError("per_bin and k must be >= 0")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.lat_min >= self.lat_max:
            raise ConfigError("lat_min must be below lat_max")
        object.__setattr__(self, "ti_bin_edges", tuple(float(v) for v in self.ti_bin_edges))

    @classmethod
    def field_defaults(cls) -> dict:
        return {f.name: getattr(cls(), f.name) for f in fields(cls)}


def load_toml(path: Path | str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value of type {type(value).__name__}")


def dump_toml(sections: dict[str, dict]) -> str:
    lines = []
    for section, values in sections.items():
        lines.append(f"[{section}]")
        for key in sorted(values):
            if values[key] is None:
                continue
            lines.append(f"{key} = {_toml_value(values[key])}")
        lines.append("")
    return "\n".join(lines)


def merge_config(section: str, defaults: dict, config_path: Path | str | None,
                 overrides: dict) -> dict:
    """defaults < config-file section < explicit flags; unknown keys rejected."""
    merged = dict(defaults)
    if config_path is not None:
        file_section = load_toml(config_path).get(section, {})
        for key, value in file_section.items():
            if key not in merged:
                raise ConfigError(f"unknown key {key!r} in [{section}] of {config_path}")
            merged[key] = _coerce(merged[key], value, key)
    for key, value in overrides.items():
        if key in merged and value is not None:
            merged[key] = _coerce(merged[key], value, key)
    return merged


def _coerce(template, value, key: str):
    if template is None or value is None:
        return value
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, (list, tuple)):
        return type(template)(value)
    return type(template)(value)


def write_echo(path: Path | str, section: str, resolved: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_toml({section: resolved}))
    return path
