# src/chordgraph/utils.py
from __future__ import annotations

import json
import math
from typing import Any

from pydantic import ValidationError


def _normalize(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    if isinstance(obj, float):
        if math.isinf(obj):
            return "unreachable" if obj > 0 else "-inf"
        if obj == 0.0:
            return 0.0
    return obj


def canonical_json(obj: Any) -> str:
    """Deterministic JSON: sorted keys, compact separators, tuples as lists."""
    return json.dumps(_normalize(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def validation_error_keys(exc: ValidationError) -> list[str]:
    """Dotted locations of every field a pydantic validation error points at."""
    keys: list[str] = []
    for error in exc.errors():
        key = ".".join(str(part) for part in error.get("loc", ()))
        if key and key not in keys:
            keys.append(key)
    return keys
