"""Flat ``key = value`` text files used for run and generator configs.

Values are JSON literals (numbers, ``true``/``false``, quoted strings, lists);
bare words and comma-separated scalars are accepted as a convenience.
"""
import json

from .exceptions import ConfigError


def _parse_value(raw, lineno):
    raw = raw.strip()
    if not raw:
        raise ConfigError(f"line {lineno}: missing value")
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if "," in raw:
        return [_parse_value(part, lineno) for part in raw.split(",")]
    return raw


def loads(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value, lineno)
    return out


def dumps(mapping):
    lines = []
    for key in sorted(mapping):
        value = mapping[key]
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dump(mapping, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(mapping))
