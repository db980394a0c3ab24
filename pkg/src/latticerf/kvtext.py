"""Line-oriented ``key = value`` text used by volume sidecars and pipeline configs.

Values are JSON literals (numbers, strings, lists, booleans, null). Blank
lines and lines starting with ``#`` are ignored. Keys may be dotted to
express one level of grouping (``mlmc.rel_tol = 0.05``).
"""

from __future__ import annotations

import json
from typing import Any, Mapping


class KVSyntaxError(ValueError):
    pass


def loads(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise KVSyntaxError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key in out:
            raise KVSyntaxError(f"line {lineno}: duplicate key {key!r}")
        try:
            out[key] = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise KVSyntaxError(f"line {lineno}: bad value for {key!r}: {exc.msg}") from None
    return out


def dumps(data: Mapping[str, Any]) -> str:
    lines = []
    for key, value in data.items():
        if "=" in key or "\n" in key or not key.strip():
            raise KVSyntaxError(f"invalid key {key!r}")
        lines.append(f"{key} = {json.dumps(value, allow_nan=False)}")
    return "\n".join(lines) + "\n"


def nest(flat: Mapping[str, Any]) -> dict[str, Any]:
    """Split dotted keys one level deep: ``{"a.b": 1}`` -> ``{"a": {"b": 1}}``."""
    out: dict[str, Any] = {}
    for key, value in flat.items():
        head, dot, tail = key.partition(".")
        if dot:
            group = out.setdefault(head, {})
            if not isinstance(group, dict):
                raise KVSyntaxError(f"key {key!r} conflicts with scalar {head!r}")
            group[tail] = value
        else:
            if isinstance(out.get(head), dict):
                raise KVSyntaxError(f"key {key!r} conflicts with group {head!r}")
            out[head] = value
    return out


def flatten(nested: Mapping[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in nested.items():
        if isinstance(value, Mapping):
            for sub, v in value.items():
                out[f"{key}.{sub}"] = v
        else:
            out[key] = value
    return out
