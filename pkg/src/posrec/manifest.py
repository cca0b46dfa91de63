"""Flat ``key = value`` manifests: the one config/provenance format used everywhere."""

from __future__ import annotations

import hashlib


def dumps(mapping: dict) -> str:
    lines = [f"{key} = {mapping[key]}" for key in sorted(mapping)]
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write(path, mapping: dict) -> str:
    text = dumps(mapping)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return digest(text)


def read(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as f:
        return loads(f.read())


def digest(text: str) -> str:
    """Short stable hash of manifest content."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def digest_mapping(mapping: dict) -> str:
    return digest(dumps(mapping))
