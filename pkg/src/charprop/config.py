"""Flat ``key = value`` configuration files."""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys use underscores."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def load_config(path) -> dict[str, str]:
    p = Path(path)
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        if v and isinstance(v[0], (tuple, list)):
            return " ".join(":".join(repr(float(x)) for x in item) for item in v)
        return " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def write_config(path, values: dict) -> None:
    Path(path).write_text(format_config(values), encoding="utf-8")


def merge(defaults: dict, file_values: dict, flag_values: dict) -> dict:
    """Flags override the config file, which overrides built-in defaults."""
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = dict(defaults)
    out.update(file_values)
    out.update({k: v for k, v in flag_values.items() if v is not None})
    return out


def coerce(text: str, default):
    """Convert a config string to the type of ``default``."""
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ConfigError(f"expected a boolean, got {text!r}")
        return low in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(float(text)) if float(text).is_integer() else int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = text.replace(",", " ").split()
        if default and isinstance(default[0], tuple):
            return tuple(tuple(float(x) for x in p.split(":")) for p in parts)
        kind = type(default[0]) if default else float
        return tuple(kind(float(p)) if kind is int else kind(p) for p in parts)
    if default is None:
        return None if text.strip().lower() in ("", "none") else int(text)
    return text


def from_mapping(cls, values: dict):
    """Instantiate dataclass ``cls`` from a mapping of (possibly string) values."""
    import dataclasses

    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        if isinstance(v, str):
            default = f.default if f.default is not dataclasses.MISSING else None
            if not isinstance(default, str):
                v = coerce(v, default)
        kwargs[f.name] = v
    return cls(**kwargs)


def as_mapping(obj) -> dict:
    import dataclasses

    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
