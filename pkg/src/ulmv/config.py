"""Plain-text ``key=value`` run configuration."""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .arch import ModelConfig
from .train import PRESETS, TrainConfig

PATH_KEYS = {"manifest": "", "out_dir": "", "normalization": "", "init_checkpoint": ""}


class ConfigError(ValueError):
    pass


def _field_types(cls) -> dict:
    inst = cls()
    return {f.name: type(getattr(inst, f.name)) for f in fields(cls)}


MODEL_KEYS = _field_types(ModelConfig)
TRAIN_KEYS = _field_types(TrainConfig)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in MODEL_KEYS and key not in TRAIN_KEYS and key not in PATH_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    return parse_config_text(p.read_text())


def _convert(value: str, kind: type):
    if kind is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind is tuple:
        return tuple(int(v) for v in value.split(","))
    return kind(value)


def resolve(raw: dict[str, str], preset: str | None = None) -> tuple[ModelConfig, TrainConfig, dict]:
    """Preset values first, then the file's keys."""
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    train_kw = dict(PRESETS[preset]) if preset else {}
    model_kw, paths = {}, dict(PATH_KEYS)
    try:
        for key, value in raw.items():
            if key in MODEL_KEYS:
                model_kw[key] = _convert(value, MODEL_KEYS[key])
            elif key in TRAIN_KEYS:
                train_kw[key] = _convert(value, TRAIN_KEYS[key])
            else:
                paths[key] = value
        return ModelConfig(**model_kw), TrainConfig(**train_kw), paths
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
