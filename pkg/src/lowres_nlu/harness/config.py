"""``key = value`` config files with command-line overrides.

Lines starting with ``#`` are comments. Values stay strings until a consumer
converts them. ``LOWRES_NLU_SEED`` in the environment overrides ``seed``.
"""
from __future__ import annotations

import configparser
import os

SEED_ENV = "LOWRES_NLU_SEED"


def read_config(path) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",))
    parser.optionxform = str
    with open(path, encoding="utf-8") as f:
        try:
            parser.read_string("[config]\n" + f.read(), source=str(path))
        except configparser.Error as err:
            raise ValueError(f"{path}: {err}") from err
    return dict(parser["config"])


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def merged_config(path=None, overrides=()) -> dict[str, str]:
    cfg = read_config(path) if path else {}
    cfg.update(parse_overrides(overrides))
    if os.environ.get(SEED_ENV):
        cfg["seed"] = os.environ[SEED_ENV]
    return cfg


def typed(cfg: dict, key: str, default, kind=None):
    if key not in cfg:
        return default
    kind = kind or type(default)
    value = cfg[key]
    if kind is bool:
        return value.lower() in ("1", "true", "yes", "on")
    try:
        return kind(value)
    except ValueError as err:
        raise ValueError(f"config key {key!r}: cannot read {value!r} as {kind.__name__}") from err
