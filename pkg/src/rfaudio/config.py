"""Run configuration: one JSON-serializable tree covering every pipeline knob.

A :class:`RunConfig` aggregates the per-module dataclasses (mel analysis,
model dims, optimizer, sampler, forge) plus the session sample rate, seed,
and default paths. Defaults mirror the reference operating point: 44.1 kHz
mel analysis with FFT 1024 / hop 256 / 100 bins, AdamW at 5e-5 with betas
0.9/0.999 and weight decay 1e-3, a 100-step sampler at guidance scale 6.0.

Configs load from JSON files and accept ``--dotted.key value`` command-line
overrides; values are parsed as JSON scalars and coerced to the type of the
default they replace, so typos in key names or types fail loudly with
:class:`ConfigError`.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Sequence

from .dataforge import ForgeConfig
from .flow import SamplerConfig, TrainConfig
from .model import ModelConfig
from .spectral import MelConfig

SESSION_RATE_DEFAULT = 44100


class ConfigError(ValueError):
    """Malformed configuration: bad file, unknown key, or wrong value type."""


class DataError(RuntimeError):
    """Missing or malformed input data (files, manifests, checkpoints)."""


@dataclass(frozen=True)
class PathsConfig:
    """Default locations used when a command's path flags are omitted."""

    data_root: str = "data"
    output_dir: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    session_rate: int = SESSION_RATE_DEFAULT
    mel: MelConfig = field(default_factory=MelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    forge: ForgeConfig = field(default_factory=ForgeConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.session_rate <= 0:
            raise ConfigError(f"session_rate must be positive, got {self.session_rate}")
        if self.mel.sample_rate != self.session_rate:
            raise ConfigError(
                f"mel.sample_rate {self.mel.sample_rate} != session_rate "
                f"{self.session_rate}; override both together"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


_SECTION_TYPES = {
    "mel": MelConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "forge": ForgeConfig,
    "paths": PathsConfig,
}


def to_dict(config) -> dict:
    """Dataclass tree -> plain dict of JSON types (tuples become lists)."""
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if is_dataclass(value):
            out[f.name] = to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def _defaults_payload(cls) -> dict:
    """Field defaults as a dict, without running ``__post_init__`` resolution.

    Deriving the merge baseline from an instance would bake in resolved
    values (e.g. ``f_max`` computed from the default sample rate), which
    would then contradict a file that changes the rate but not the derived
    field. Raw field defaults keep such knobs unset until construction.
    """
    out = {}
    for f in fields(cls):
        if f.default is not MISSING:
            value = f.default
        elif f.default_factory is not MISSING:
            value = f.default_factory()
        else:
            raise ConfigError(f"config field '{f.name}' has no default")
        if is_dataclass(value):
            out[f.name] = _defaults_payload(type(value))
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def _build_section(cls, payload: dict, prefix: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} under '{prefix}'")
    kwargs = {}
    for name, value in payload.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid '{prefix}' config: {exc}") from exc


def from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be an object, got {type(payload).__name__}")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} at the top level")
    kwargs = {}
    for name, value in payload.items():
        if name in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"'{name}' must be an object")
            kwargs[name] = _build_section(_SECTION_TYPES[name], value, name)
        else:
            kwargs[name] = value
    try:
        return RunConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config: {exc}") from exc


def _coerce(parsed, current, key: str):
    """Fit a JSON-parsed override onto the type of the default it replaces."""
    if current is None:
        return parsed
    if isinstance(current, bool):
        if not isinstance(parsed, bool):
            raise ConfigError(f"'{key}' expects true/false, got {parsed!r}")
        return parsed
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(parsed, bool) or not isinstance(parsed, (int, float)):
            raise ConfigError(f"'{key}' expects an integer, got {parsed!r}")
        if isinstance(parsed, float):
            if not parsed.is_integer():
                raise ConfigError(f"'{key}' expects an integer, got {parsed!r}")
            parsed = int(parsed)
        return parsed
    if isinstance(current, float):
        if isinstance(parsed, bool) or not isinstance(parsed, (int, float)):
            raise ConfigError(f"'{key}' expects a number, got {parsed!r}")
        return float(parsed)
    if isinstance(current, str):
        return parsed if isinstance(parsed, str) else str(parsed)
    if isinstance(current, (list, tuple)):
        if not isinstance(parsed, list):
            raise ConfigError(f"'{key}' expects a JSON list, got {parsed!r}")
        return parsed
    raise ConfigError(f"'{key}' has unsupported type {type(current).__name__}")


def apply_overrides(payload: dict, overrides: Sequence[tuple[str, str]]) -> dict:
    """Apply ``(dotted key, raw string value)`` pairs onto a config dict."""
    for key, raw in overrides:
        parts = key.split(".")
        node = payload
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key '{key}'")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config key '{key}'")
        try:
            parsed = json.loads(raw)
        except json.JSONDecodeError:
            parsed = raw
        node[leaf] = _coerce(parsed, node[leaf], key)
    return payload


def load_run_config(
    path=None, overrides: Sequence[tuple[str, str]] = ()
) -> RunConfig:
    """Defaults, optionally updated from a JSON file, then flag overrides."""
    payload = _defaults_payload(RunConfig)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        _merge(payload, file_payload, prefix="")
    apply_overrides(payload, overrides)
    return from_dict(payload)


def _merge(base: dict, update, prefix: str) -> None:
    if not isinstance(update, dict):
        raise ConfigError(f"config section '{prefix or '<root>'}' must be an object")
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        if isinstance(base[key], dict):
            _merge(base[key], value, prefix=f"{prefix}{key}.")
        else:
            base[key] = _coerce(value, base[key], f"{prefix}{key}")
