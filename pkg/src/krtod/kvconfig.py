"""Flat ``key = value`` config files."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def read_kv(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            raise ConfigError(f"{path}: line {n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def write_kv(path, values: dict) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def coerce(raw: str, like):
    """Convert ``raw`` to the type of the default value ``like``."""
    try:
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(like).__name__}") from None
    return raw
