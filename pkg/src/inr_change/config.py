"""Strict loading of dataclass configs from JSON or TOML files."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Mapping, Type, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


def from_mapping(cls: Type[T], data: Mapping[str, Any]) -> T:
    """Build ``cls`` from ``data``, rejecting keys the dataclass does not declare."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def read_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def as_dict(obj) -> dict:
    return dataclasses.asdict(obj)
