"""Content hashing and the canonical JSON form used for commitments."""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any

from ..errors import IoFailure


def sha256_file(path: str | os.PathLike, block_size: int = 1 << 16) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(block_size), b""):
                digest.update(block)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return digest.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json_bytes(obj: Any) -> bytes:
    """UTF-8 JSON with sorted keys and no insignificant whitespace.

    Floats use Python's shortest round-trip repr. NaN and infinities are
    rejected because they have no JSON spelling.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")
