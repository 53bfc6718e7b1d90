"""Run configuration: one YAML file (schema 1) with command-line overrides.

Example::

    schema: 1
    dataset: data/synth
    out: runs/global
    network: {attention: global, channels: 20, pieces: 20, steps: 20}
    train: {epochs: 20, batch_size: 64, lr: 0.001, seed: 0}
"""

from __future__ import annotations

from dataclasses import MISSING, dataclass, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import NetworkSpec
from .train import TrainConfig

SCHEMA_VERSION = 1
TOP_KEYS = {"schema", "dataset", "out", "network", "train"}


@dataclass(frozen=True)
class RunConfig:
    network: NetworkSpec
    train: TrainConfig
    dataset: Path | None
    out: Path


def _check_section(section: str, values: dict, cls) -> dict:
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, value in values.items():
        path = f"{section}.{key}"
        if key not in known:
            raise ConfigError(f"{path}: unknown key")
        default = known[key].default
        if default is MISSING or default is None:
            if value is not None and not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{path}: expected a number")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected true/false")
        elif isinstance(default, int):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{path}: expected a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{path}: expected a string, got {value!r}")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(default):
                raise ConfigError(f"{path}: expected a list of {len(default)} values")
            value = tuple(value)
        out[key] = value
    return out


def _set_dotted(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``network.attention=global`` -> ("network.attention", "global"), values parsed as YAML scalars."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def build_config(data: dict, overrides: dict | None = None, base: Path | None = None) -> RunConfig:
    data = dict(data or {})
    data["network"] = dict(data.get("network") or {})
    data["train"] = dict(data.get("train") or {})
    for key, value in (overrides or {}).items():
        _set_dotted(data, key, value)
    unknown = set(data) - TOP_KEYS
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
    schema = data.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"schema: unsupported version {schema!r}")
    net = _check_section("network", data["network"], NetworkSpec)
    tr = _check_section("train", data["train"], TrainConfig)
    try:
        network = NetworkSpec(**net)
    except ConfigError as exc:
        raise ConfigError(f"network: {exc}") from None
    try:
        train = TrainConfig(**tr)
    except ConfigError as exc:
        raise ConfigError(f"train: {exc}") from None
    base = base or Path.cwd()
    dataset = data.get("dataset")
    if dataset is not None and not isinstance(dataset, str):
        raise ConfigError("dataset: expected a path string")
    out = data.get("out", "runs")
    if not isinstance(out, str):
        raise ConfigError("out: expected a path string")
    return RunConfig(network, train, (base / dataset).resolve() if dataset else None, (base / out).resolve())


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(data, overrides, path.parent)
