"""Plain ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored. Keys are the field names of
``EncoderConfig``, ``TrainConfig``, ``DecodeConfig`` and ``RetrievalConfig``
(flat namespace; the field names do not collide). Values are parsed as int,
float or bool when they look like one, otherwise kept as text.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ValidationError


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"line {n}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def format_kv(items: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in items.items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coerce(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def load_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    return {k: coerce(v) for k, v in parse_kv(Path(path).read_text()).items()}


def build(cls, values: dict, strict: bool = False):
    """Instantiate dataclass ``cls`` from the matching keys of ``values``."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k in names:
            ftype = names[k].type
            if ftype in ("float", float) and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            kwargs[k] = v
        elif strict:
            raise ValidationError(f"unknown config key {k!r} for {cls.__name__}")
    return cls(**kwargs)


def check_known(values: dict, *classes) -> None:
    known = set()
    for cls in classes:
        known |= {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
