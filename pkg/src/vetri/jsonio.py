"""Canonical JSON serialization used for every file the store writes.

Sorted keys, two-space indent, trailing newline: re-running a command with
unchanged inputs must produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .errors import ParseError


def canonical_json(obj: Any) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode()


def write_json(path: Path | str, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(canonical_json(obj))


def read_json(path: Path | str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
