"""Canonical JSON reading/writing for profile, plan and report documents.

Machine-format outputs must be byte-identical across runs, so every document
goes through :func:`canonical_dumps` (sorted keys, two-space indent, full
float repr, trailing newline).
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ParseError


def canonical_dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_document(doc: dict, path) -> None:
    Path(path).write_text(canonical_dumps(doc), encoding="utf-8")


def read_document(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}: not valid JSON: {err}") from err
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    return doc
