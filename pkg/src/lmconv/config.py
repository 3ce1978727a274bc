"""INI-style run configuration: ``[data]``, ``[model]`` and ``[train]`` sections."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DatasetSpec
from .errors import InvalidArgument


class ConfigError(InvalidArgument):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


MODEL_KEYS = {
    "hidden": int, "depth": int, "kernel": int, "dilations": "ints", "head": str, "n_mix": int,
    "mask_conditioning": bool, "norm_eps": float,
}
TRAIN_KEYS = {
    "orders": str, "batch_size": int, "lr": float, "decay": float, "clip_norm": float, "epochs": int,
    "seed": int, "average_window": int, "checkpoint_every": int,
}


@dataclass
class RunConfig:
    data: DatasetSpec
    model: dict
    train: dict


def _convert(section, key, kind, raw):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}", field=f"{section}.{key}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found", field="config")
    cp = configparser.ConfigParser()
    try:
        cp.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}", field="config") from exc
    return parse_config(cp)


def parse_config(cp: configparser.ConfigParser) -> RunConfig:
    if "data" not in cp:
        raise ConfigError("missing [data] section", field="data")
    data_types = {f.name: f.type for f in fields(DatasetSpec)}
    kinds = {"str": str, "int": int, "float": float, "bool": bool}
    data = {}
    for key, raw in cp["data"].items():
        if key not in data_types:
            raise ConfigError(f"[data] unknown key {key!r}", field=f"data.{key}")
        data[key] = _convert("data", key, kinds[data_types[key]], raw)
    if "source" not in data:
        raise ConfigError("[data] source is required", field="data.source")
    model = _section(cp, "model", MODEL_KEYS)
    train = _section(cp, "train", TRAIN_KEYS)
    return RunConfig(DatasetSpec(**data), model, train)


def _section(cp, name, keys):
    out = {}
    if name not in cp:
        return out
    for key, raw in cp[name].items():
        if key not in keys:
            raise ConfigError(f"[{name}] unknown key {key!r}", field=f"{name}.{key}")
        out[key] = _convert(name, key, keys[key], raw)
    return out
