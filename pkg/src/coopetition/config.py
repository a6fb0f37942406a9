"""Flat ``section.key = value`` config documents and dataclass (un)flattening.

Example::

    command = train
    model.num_layers = 2
    bank.num_classes = 12800
    data_kind = BURSTY
"""

from __future__ import annotations

import ast
import dataclasses
import json
import typing
from pathlib import Path
from typing import Any


def parse_value(text: str) -> Any:
    text = text.strip()
    if text in ("", "none", "None", "null"):
        return None
    if text in ("true", "True"):
        return True
    if text in ("false", "False"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float, str)):
        return value if isinstance(value, str) else repr(value)
    if isinstance(value, (list, tuple)):
        return json.dumps(list(value))
    return str(value)


def loads(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = parse_value(val)
    return out


def dumps(flat: dict[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in flat.items())


def load(path) -> dict[str, Any]:
    return loads(Path(path).read_text(encoding="utf-8"))


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    """Dataclass -> flat dict with dotted keys for nested dataclasses."""
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(val):
            out.update(flatten(val, key + "."))
        elif hasattr(val, "value") and isinstance(getattr(val, "value"), str):
            out[key] = val.value  # enums
        else:
            out[key] = val
    return out


def unflatten(cls, flat: dict[str, Any], prefix: str = "", strict: bool = True):
    """Inverse of :func:`flatten`. Missing keys keep their defaults."""
    if strict and not prefix:
        valid = set(flatten(cls()))
        unknown = sorted(k for k in flat if k not in valid)
        if unknown:
            raise KeyError(f"unknown config keys: {unknown}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        ftype = hints[f.name]
        if dataclasses.is_dataclass(ftype):
            kwargs[f.name] = unflatten(ftype, flat, key + ".", strict=False)
        elif key in flat:
            val = flat[key]
            kwargs[f.name] = tuple(val) if isinstance(val, list) else val
    return cls(**kwargs)
