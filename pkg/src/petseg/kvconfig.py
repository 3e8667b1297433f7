"""Flat ``key=value`` text configs (one pair per line, ``#`` comments)."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ContractError


def parse_kv(text: str, allowed=None, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if allowed is not None and key not in allowed:
            raise ContractError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def read_kv(path, allowed=None) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(), allowed, str(path))


def format_kv(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def dataclass_to_kv(obj) -> str:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        out[f.name] = value
    return format_kv(out)


def dataclass_from_kv(cls, text: str, source: str = "<config>"):
    """Build ``cls`` from ``key=value`` text, converting by the type of each default."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = parse_kv(text, allowed=fields, source=source)
    kwargs = {}
    for key, raw in values.items():
        default = fields[key].default
        if isinstance(default, bool):
            kwargs[key] = raw.lower() in ("1", "true", "yes")
        elif isinstance(default, tuple):
            kind = type(default[0]) if default else str
            kwargs[key] = tuple(kind(v.strip()) for v in raw.split(",") if v.strip())
        elif isinstance(default, (int, float)):
            kwargs[key] = type(default)(raw)
        else:
            kwargs[key] = raw
    return cls(**kwargs)
