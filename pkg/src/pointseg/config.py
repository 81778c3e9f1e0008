"""Flat ``key = value`` network config files.

Keys are the :class:`NetworkConfig` fields plus ``units``, ``pooling`` and
``locse`` for the block; lists are comma separated; ``#`` starts a comment::

    d_in = 3
    n_class = 3
    encoder_widths = 16, 64, 128, 256
    units = 2
"""
from __future__ import annotations

import configparser

from .errors import ConfigError
from .network import NetworkConfig

_INT = {"d_in", "n_class", "k", "input_width", "seed", "units"}
_FLOAT = {"decimation", "dropout", "slope", "coord_scale"}
_LIST = {"encoder_widths", "head_widths"}
_STR = {"pooling", "locse", "dtype"}
KEYS = _INT | _FLOAT | _LIST | _STR


def parse_config_text(text: str) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[network]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    out = {}
    for key, raw in parser["network"].items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        raw = raw.strip()
        try:
            if key in _INT:
                out[key] = int(raw)
            elif key in _FLOAT:
                out[key] = float(raw)
            elif key in _LIST:
                out[key] = [int(x) for x in raw.split(",") if x.strip()]
            else:
                out[key] = raw
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return out


def load_config(path, **overrides) -> NetworkConfig:
    """Read a config file; ``overrides`` win over file values."""
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    values = parse_config_text(text)
    values.update(overrides)
    return NetworkConfig.from_dict(values)


def format_config(cfg: NetworkConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
