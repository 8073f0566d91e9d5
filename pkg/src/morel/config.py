"""Flat ``key = value`` configuration files mapped onto nested dataclasses.

Keys are dotted paths (``fhd.q1 = 0.6``); ``#`` starts a comment. Every
field of the target dataclass tree is addressable and unknown keys are
rejected, so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

from .errors import ConfigError


def parse_flat(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or any(c.isspace() for c in key):
            raise ConfigError(f"line {lineno}", f"bad key {key!r}")
        if key in entries:
            raise ConfigError(key, "given twice")
        entries[key] = value
    return entries


def load_flat(path) -> dict[str, str]:
    return parse_flat(Path(path).read_text())


def _coerce(key: str, value: str, current: Any) -> Any:
    try:
        if isinstance(current, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()]
            kind = type(current[0]) if current else float
            return tuple(kind(v) for v in items)
        if current is None or isinstance(current, str):
            return value
    except ValueError:
        raise ConfigError(key, f"cannot parse {value!r} as {type(current).__name__}") from None
    raise ConfigError(key, "not configurable from a file")


def _flatten(obj, prefix: str) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(val):
            out.update(_flatten(val, key + "."))
        elif isinstance(val, dict):
            for k, v in val.items():
                out[f"{key}.{k}"] = v
        else:
            out[key] = val
    return out


def apply(obj, entries: dict[str, str], prefix: str = ""):
    """Copy of dataclass ``obj`` with ``entries`` applied.

    Keys not under ``prefix`` are ignored; keys under it that do not name a
    field raise :class:`ConfigError`.
    """
    known = _flatten(obj, prefix)
    mine = {k: v for k, v in entries.items() if not prefix or k.startswith(prefix)}
    for key in mine:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
    return _rebuild(obj, {k: _coerce(k, v, known[k]) for k, v in mine.items()}, prefix)


def _rebuild(obj, values: dict[str, Any], prefix: str):
    changes = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(val):
            changes[f.name] = _rebuild(val, values, key + ".")
        elif isinstance(val, dict):
            new = dict(val)
            for k in val:
                if f"{key}.{k}" in values:
                    new[k] = values[f"{key}.{k}"]
            changes[f.name] = new
        elif key in values:
            changes[f.name] = values[key]
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(prefix.rstrip(".") or "config", str(exc)) from None


def dump(obj, prefix: str = "") -> str:
    """Render every key of ``obj`` in file syntax, sorted."""
    lines = []
    for key, val in sorted(_flatten(obj, prefix).items()):
        if isinstance(val, tuple):
            val = ", ".join(repr(v) if isinstance(v, str) else str(v) for v in val)
        elif isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
