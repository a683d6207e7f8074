"""Plain-text ``key=value`` configuration files.

Blank lines and lines starting with ``#`` are ignored. Values are coerced
to the type of the matching dataclass field's default.
"""

from __future__ import annotations

from dataclasses import MISSING, fields
from typing import Any, Mapping

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_kv(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_kv(values: Mapping[str, Any], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            fh.write(f"{k}={v}\n")


def parse_bool(value: str) -> bool:
    v = str(value).strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def coerce(value, like):
    """Convert a string to the type of ``like``."""
    if not isinstance(value, str):
        return value
    if isinstance(like, bool):
        return parse_bool(value)
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, (list, tuple)):
        items = [x for x in value.replace(",", " ").split()]
        elem = like[0] if like else ""
        return [coerce(x, elem) for x in items]
    return value


def defaults_of(cls) -> dict[str, Any]:
    out = {}
    for f in fields(cls):
        if f.default is not MISSING:
            out[f.name] = f.default
        elif f.default_factory is not MISSING:
            out[f.name] = f.default_factory()
    return out


def build(cls, values: Mapping[str, Any]):
    """Instantiate dataclass ``cls`` from (possibly string) values."""
    defaults = defaults_of(cls)
    unknown = set(values) - set(defaults)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: coerce(v, defaults[k]) for k, v in values.items()})


def load(cls, path=None, overrides: Mapping[str, Any] | None = None):
    values: dict[str, Any] = read_kv(path) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build(cls, values)
