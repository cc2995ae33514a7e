"""Sectioned key=value run configuration files."""
from __future__ import annotations

import configparser
from pathlib import Path

from .errors import ConfigurationError


def read_config(path) -> dict:
    """Return ``{section: {key: raw string}}``; keys normalised to underscores."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from None
    return {sec: {k.replace("-", "_"): v for k, v in parser[sec].items()} for sec in parser.sections()}


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return " ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(path, sections: dict):
    """Write ``{section: {key: value}}`` with hyphenated keys in a stable order."""
    lines = []
    for sec, values in sections.items():
        lines.append(f"[{sec}]")
        for k, v in values.items():
            lines.append(f"{k.replace('_', '-')} = {format_value(v)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")
