"""Run configuration: defaults < config file < SLINT_* environment < command line."""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .trainer import TrainConfig

ENV_PREFIX = "SLINT_"
# keys that are not TrainConfig fields but may still come from file or environment
RUN_KEYS = {"data": str, "out": str}
# prefixed variables read elsewhere (the acceptance suite's benchmark directory)
ENV_IGNORED = {"benchmarks"}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types() -> dict[str, type]:
    hints = {"float": float, "int": int, "bool": bool, "str": str}
    out = {}
    for f in fields(TrainConfig):
        name = f.type if isinstance(f.type, str) else f.type.__name__
        out[f.name] = hints.get(name, str)
    out.update(RUN_KEYS)
    return out


def coerce(key: str, value: Any) -> Any:
    kind = _field_types()[key]
    if kind is bool:
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ValueError(f"{key}: expected an integer, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{key}: cannot parse {value!r} as {kind.__name__}") from exc


def canonical(key: str) -> str:
    key = key.strip().lower().replace("-", "_")
    return "lam" if key in ("lambda", "lambda_") else key


def _normalise(raw: Mapping[str, Any], origin: str) -> dict[str, Any]:
    types = _field_types()
    out = {}
    for k, v in raw.items():
        key = canonical(k)
        if key not in types:
            raise ValueError(f"{origin}: unknown key {k!r}")
        out[key] = coerce(key, v)
    return out


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Flat ``key: value`` file (YAML syntax; JSON also parses)."""
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping of keys to values")
    return _normalise(raw, str(path))


def read_env(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    raw = {k[len(ENV_PREFIX):]: v for k, v in environ.items()
           if k.startswith(ENV_PREFIX) and canonical(k[len(ENV_PREFIX):]) not in ENV_IGNORED}
    return _normalise(raw, "environment")


def resolve(cli: Mapping[str, Any] | None = None, path: str | Path | None = None,
            environ: Mapping[str, str] | None = None) -> tuple[TrainConfig, dict[str, Any]]:
    """Merge the layers and split them into a TrainConfig and the run keys (data, out)."""
    merged: dict[str, Any] = {}
    if path is not None:
        merged.update(read_config_file(path))
    merged.update(read_env(environ))
    merged.update(_normalise({k: v for k, v in (cli or {}).items() if v is not None}, "command line"))
    run = {k: merged.pop(k) for k in list(merged) if k in RUN_KEYS}
    return TrainConfig.from_dict(merged), run
