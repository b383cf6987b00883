"""Flat dotted-key text format: one `key = value` per line.

Used for config files, config echoes, and dataset/world manifests. Chosen
for diffability; values are written with repr-level precision so that
parse(format(d)) round-trips exactly.
"""

from __future__ import annotations

from .errors import ConfigError


def parse_flat(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_flat(items: dict[str, object]) -> str:
    """Render a mapping as sorted `key = value` lines."""
    lines = []
    for key in sorted(items):
        v = items[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def parse_bool(value: str, key: str) -> bool:
    if value == "true":
        return True
    if value == "false":
        return False
    raise ConfigError(f"key {key!r}: expected true/false, got {value!r}")
