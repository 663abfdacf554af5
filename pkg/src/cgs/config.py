"""Flat ``key = value`` config files mapped onto dataclasses.

Lines starting with ``#`` are comments. Nested dataclass fields are
addressed with dotted keys (``data.K = 3``). Values are coerced to the type
of the field's current value; tuples are comma separated.
"""
from __future__ import annotations

import dataclasses


class ConfigError(ValueError):
    pass


def parse_kv_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv(path):
    with open(path) as fh:
        return parse_kv_text(fh.read(), source=str(path))


def _coerce(current, value, key):
    if isinstance(value, str):
        text = value.strip()
    else:
        return value
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            items = [s.strip() for s in text.strip("()[]").split(",") if s.strip()]
            kind = type(current[0]) if current else float
            return tuple(kind(s) for s in items)
        if current is None:
            return None if text.lower() in ("", "none") else text
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def apply_overrides(obj, values):
    """Return a copy of dataclass ``obj`` with dotted-key ``values`` applied.

    Unknown keys raise :class:`ConfigError`.
    """
    nested = {}
    flat = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key: {key}")
        if rest:
            if not dataclasses.is_dataclass(getattr(obj, head)):
                raise ConfigError(f"unknown config key: {key}")
            nested.setdefault(head, {})[rest] = value
        else:
            if dataclasses.is_dataclass(getattr(obj, head)):
                raise ConfigError(f"{key} is a section; use {key}.<field>")
            flat[head] = _coerce(getattr(obj, head), value, key)
    for head, sub in nested.items():
        flat[head] = apply_overrides(getattr(obj, head), sub)
    return dataclasses.replace(obj, **flat)


def dump_kv(obj, prefix=""):
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            lines.extend(dump_kv(v, prefix + f.name + "."))
        elif isinstance(v, tuple):
            lines.append(f"{prefix}{f.name} = {', '.join(repr(x) for x in v)}")
        else:
            lines.append(f"{prefix}{f.name} = {'' if v is None else v}")
    return lines
