"""Tiny key-value text document codec.

Used for volume metadata sidecars, metrics reports, and the HTTP API's
non-image bodies.  One entry per line, ``key<space>value``, keys are
identifiers, values are free text up to the newline.  Lines starting with
'#' and blank lines are ignored when parsing.  Emission is deterministic
(insertion order), so round trips are bit-exact.
"""

from __future__ import annotations


def dumps(entries: dict[str, str]) -> str:
    lines = []
    for key, value in entries.items():
        if not key or any(c.isspace() for c in key):
            raise ValueError(f"invalid key: {key!r}")
        value = str(value)
        if "\n" in value:
            raise ValueError(f"value for {key!r} contains a newline")
        lines.append(f"{key} {value}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 1)
        if len(parts) == 1:
            raise ValueError(f"line {lineno}: missing value for key {parts[0]!r}")
        entries[parts[0]] = parts[1]
    return entries


def dump(entries: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(entries))


def load(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())
