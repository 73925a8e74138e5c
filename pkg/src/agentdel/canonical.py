"""Canonical JSON encoding used for every signature and hash in the package.

Keys are sorted (code-point order, which equals UTF-8 byte order), no
insignificant whitespace, integers in shortest decimal form, UTF-8 output.
Floats are rejected so that numeric rendering can never differ between
implementations.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


class CanonicalizationError(TypeError):
    """Value cannot be represented in canonical form."""

    code = "EncodingError"


def _check(value: Any, path: str) -> None:
    if value is None or isinstance(value, (bool, str)):
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        raise CanonicalizationError(f"{path or '$'}: floats are not allowed in canonical JSON")
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise CanonicalizationError(f"{path or '$'}: map key {key!r} is not a string")
            _check(item, f"{path}.{key}")
        return
    raise CanonicalizationError(f"{path or '$'}: unsupported type {type(value).__name__}")


def canonical_bytes(value: Any) -> bytes:
    _check(value, "")
    try:
        text = json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
        return text.encode("utf-8")
    except (ValueError, UnicodeEncodeError) as exc:
        raise CanonicalizationError(str(exc)) from exc


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
