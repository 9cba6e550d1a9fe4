"""Deterministic per-task seeds derived from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _canon(values) -> str:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    return ",".join(f"{v:.12e}" for v in arr)


def derive_seed(master: int, kind: str, x=(), xi=(), index: int = 0) -> int:
    """64-bit seed from ``sha256(master | kind | x | xi | index)``."""
    text = f"{int(master)}|{kind}|{_canon(x)}|{_canon(xi)}|{int(index)}"
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
