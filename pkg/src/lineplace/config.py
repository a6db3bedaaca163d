"""Pipeline-level configuration: one nested tree covering every stage.

Loaded from YAML and validated strictly: unknown keys and wrong value types
are errors with the offending path in the message.  Defaults are the module
defaults, so an empty file is a valid full configuration.  config_hash gives
a short stable fingerprint for reproducibility stamps in reports and logs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from .clustering import ClusterNetConfig
from .description import DescriptorConfig
from .extraction import ExtractionConfig
from .retrieval import DEFAULT_K_NN, MIN_CLUSTER_LINES
from .synth import SynthConfig


class ConfigError(Exception):
    """Invalid configuration: unknown key, bad type, or violated invariant."""


@dataclass(frozen=True)
class RetrievalConfig:
    k_nn: int = DEFAULT_K_NN
    min_lines: int = MIN_CLUSTER_LINES

    def __post_init__(self):
        if self.k_nn < 1:
            raise ValueError("k_nn must be >= 1")
        if self.min_lines < 1:
            raise ValueError("min_lines must be >= 1")


@dataclass(frozen=True)
class PathsConfig:
    """Default artifact locations; command-line flags override them."""

    dataset: str | None = None
    features: str | None = None
    cluster_checkpoint: str | None = None
    descriptor_checkpoint: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    n_scenes: int = 20
    n_views: int = 8
    synth: SynthConfig = field(default_factory=SynthConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    clustering: ClusterNetConfig = field(default_factory=ClusterNetConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _allows_none(ftype) -> bool:
    s = ftype if isinstance(ftype, str) else str(ftype)
    return "None" in s or "Optional" in s


def _check_scalar(value, current, ftype, where: str):
    """Validate a leaf value against the default's type; returns the value."""
    if value is None:
        if current is not None and not _allows_none(ftype):
            raise ConfigError(f"{where}: null is not allowed here")
        return None
    if current is None:  # optional field, default unset: accept what YAML gave us
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected int, got {type(value).__name__}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {type(value).__name__}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {type(value).__name__}")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return tuple(value)
    return value


def _from_dict(cls, data: dict, path: str = ""):
    where = path or "config"
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    field_map = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(field_map))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s): {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        sub = f"{path}.{name}" if path else name
        if is_dataclass(current) and isinstance(value, dict):
            kwargs[name] = _from_dict(type(current), value, sub)
        elif is_dataclass(current):
            raise ConfigError(f"{sub}: expected a mapping, got {type(value).__name__}")
        else:
            kwargs[name] = _check_scalar(value, current, field_map[name].type, sub)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from e


def pipeline_config_from_dict(data: dict) -> PipelineConfig:
    return _from_dict(PipelineConfig, data)


def to_dict(cfg) -> dict:
    """Dataclass tree to plain JSON/YAML-safe dict (tuples become lists)."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            out[f.name] = to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def config_hash(cfg: PipelineConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return pipeline_config_from_dict(data)
