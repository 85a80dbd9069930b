"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored; keys may use ``-`` or ``_``.
Values are converted against a dataclass's field types, and any failure is
reported with the offending line number.
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ParseError, PathError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv_text(text: str) -> dict[str, tuple[str, int]]:
    """Return ``{key: (raw value, line number)}``."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ParseError(f"expected 'key = value', got {line.strip()!r}", lineno)
        key, value = (s.strip() for s in stripped.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno)
        out[key.replace("-", "_")] = (value, lineno)
    return out


def read_kv_file(path) -> dict[str, tuple[str, int]]:
    path = Path(path)
    if not path.is_file():
        raise PathError(f"config file {path} not found")
    try:
        return parse_kv_text(path.read_text())
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None


def parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _split_list(raw: str) -> list[str]:
    for sep in (":", ","):
        if sep in raw:
            return [p.strip() for p in raw.split(sep) if p.strip()]
    return [raw.strip()] if raw.strip() else []


def convert(raw: str, annotation):
    """Convert ``raw`` to the type named by a dataclass field annotation."""
    if isinstance(annotation, str):
        annotation = annotation.replace(" ", "")
        optional = "None" in annotation.split("|")
        base = [a for a in annotation.split("|") if a != "None"][0]
    else:
        args = typing.get_args(annotation)
        optional = type(None) in args
        base = next((a for a in args if a is not type(None)), annotation) if args else annotation
        base = getattr(base, "__name__", str(base))
    if optional and raw.strip().lower() in ("", "none", "null"):
        return None
    if base == "bool":
        return parse_bool(raw)
    if base == "int":
        return int(raw)
    if base == "float":
        return float(raw)
    if base == "tuple":
        parts = _split_list(raw)
        try:
            return tuple(float(p) for p in parts)
        except ValueError:
            return tuple(parts)
    return raw


def typed_values(cls, entries: dict[str, tuple[str, int]], source: str = "config") -> dict:
    """Convert parsed entries into constructor kwargs for dataclass ``cls``."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, (raw, lineno) in entries.items():
        if key not in types:
            raise ParseError(f"{source}: unknown key {key!r}", lineno)
        try:
            out[key] = convert(raw, types[key])
        except ValueError as exc:
            raise ParseError(f"{source}: invalid value for {key}: {exc}", lineno) from None
    return out


def write_kv_file(path, values: dict) -> Path:
    path = Path(path)
    lines = []
    for k, v in values.items():
        if isinstance(v, (list, tuple)):
            v = ":".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif v is None:
            v = "none"
        lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")
    return path
