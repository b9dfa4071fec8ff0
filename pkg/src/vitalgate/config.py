"""Flat ``key = value`` configuration files."""

from __future__ import annotations

from .errors import DataError


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment; duplicate keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in out:
            raise DataError(f"config line {lineno}: duplicate key {k!r}")
        out[k] = v.strip()
    return out


def parse_number(raw: str) -> int | float:
    try:
        return int(raw)
    except ValueError:
        return float(raw)
