"""Flat key=value config files with dotted keys.

One assignment per line, `#` comments, values inferred as bool/int/float/
string; comma-separated values parse to lists.  Dotted keys group naturally
(`stage.1.lr = 5e-5, 5e-5, 1e-4, 3e-4`) and `nest` rebuilds the hierarchy.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Raised on unparseable lines, duplicate keys, or schema conflicts."""


def _parse_scalar(token: str):
    t = token.strip()
    low = t.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def _parse_value(raw: str):
    raw = raw.strip()
    if "," in raw:
        return [_parse_scalar(tok) for tok in raw.split(",")]
    return _parse_scalar(raw)


def parse_config(text: str) -> dict:
    """Parse config text into a flat {dotted_key: value} mapping."""
    flat: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = _parse_value(raw)
    return flat


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def format_config(flat: dict) -> str:
    lines = []
    for key in sorted(flat):
        value = flat[key]
        if isinstance(value, (list, tuple)):
            rendered = ", ".join(_format_scalar(v) for v in value)
        else:
            rendered = _format_scalar(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


def read_config_file(path: str | Path) -> dict:
    return parse_config(Path(path).read_text())


def write_config_file(path: str | Path, flat: dict) -> None:
    Path(path).write_text(format_config(flat))


def nest(flat: dict) -> dict:
    """Expand dotted keys into nested dicts.

    A key may not be both a leaf and a prefix of another key.
    """
    tree: dict = {}
    for key in sorted(flat):
        parts = key.split(".")
        node = tree
        for i, part in enumerate(parts[:-1]):
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                prefix = ".".join(parts[: i + 1])
                raise ConfigError(f"key {prefix!r} is both a value and a group")
            node = child
        leaf = parts[-1]
        if isinstance(node.get(leaf), dict):
            raise ConfigError(f"key {key!r} is both a value and a group")
        node[leaf] = flat[key]
    return tree
