"""INI run configuration.

Grammar: standard ``configparser`` syntax with sections ``system``, ``flow``,
``pmf``, ``sampler``, ``workflow`` and ``metrics``. Keys are the field names
of the matching dataclass in :mod:`cgflow.workflow`. Values:

* integers and floats in Python literal form (``1e6`` is accepted for ints
  when it is integral);
* booleans as ``true/false/yes/no/1/0``;
* tuples as comma-separated integers (``hidden = 64, 64``);
* optional values may be ``none``.

Anything not given takes the Müller-Brown default. Overrides have the form
``section.key=value`` and are applied after the file.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

from .workflow import RunConfig


class ConfigError(ValueError):
    pass


_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _field_types(section_obj):
    hints = typing.get_type_hints(type(section_obj))
    return {f.name: hints[f.name] for f in dataclasses.fields(section_obj)}


def _coerce(key, text, typ, default):
    text = text.strip()
    optional = typing.get_origin(typ) in (typing.Union, getattr(__import__("types"), "UnionType", None)) and type(
        None
    ) in typing.get_args(typ)
    if optional:
        if text.lower() in ("none", ""):
            return None
        typ = next(a for a in typing.get_args(typ) if a is not type(None))
    try:
        if typ is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if typ is int:
            try:
                return int(text)
            except ValueError:
                f = float(text)
                if not f.is_integer():
                    raise
                return int(f)
        if typ is float:
            return float(text)
        if typ is tuple or isinstance(default, tuple):
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from None


def _set(cfg: RunConfig, dotted: str, value: str):
    if "." not in dotted:
        raise ConfigError(f"{dotted}: expected section.key")
    section, key = dotted.split(".", 1)
    section_obj = getattr(cfg, section, None) if section in _sections() else None
    if section_obj is None:
        raise ConfigError(f"{dotted}: unknown section {section!r}")
    types = _field_types(section_obj)
    if key not in types:
        raise ConfigError(f"{dotted}: unknown key")
    setattr(section_obj, key, _coerce(dotted, value, types[key], getattr(section_obj, key)))


def _sections():
    return [f.name for f in dataclasses.fields(RunConfig)]


def parse_config(path=None, overrides=()) -> RunConfig:
    """Read an INI file (``None`` for pure defaults) and apply ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                _set(cfg, f"{section}.{key}", value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        key, value = item.split("=", 1)
        _set(cfg, key.strip(), value)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the same INI grammar ``parse_config`` reads."""
    lines = []
    for section in _sections():
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            v = getattr(getattr(cfg, section), f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
