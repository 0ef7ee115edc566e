"""Config-file loading (TOML or JSON) into plain dicts."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    if path.suffix.lower() == ".toml":
        return tomllib.loads(text.decode("utf-8"))
    if path.suffix.lower() == ".json":
        return json.loads(text)
    raise ValueError(f"config {path} must be .toml or .json")


def pick(d: dict, keys, section: str | None = None) -> dict:
    """Sub-dict of ``d`` (or ``d[section]``) restricted to ``keys``; unknown keys raise."""
    src = d.get(section, {}) if section else d
    unknown = set(src) - set(keys)
    if unknown:
        where = f"[{section}]" if section else "top level"
        raise ValueError(f"unknown config keys in {where}: {sorted(unknown)}")
    return dict(src)


def config_hash(obj) -> str:
    """Short sha256 of the canonical JSON encoding of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
