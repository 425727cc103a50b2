"""Deterministic JSON text: sorted keys, floats fixed at six decimals."""

from __future__ import annotations

import json
import math
from typing import Any

import numpy as np

FLOAT_DIGITS = 6


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot encode non-finite float {x!r}")
    text = f"{x:.{FLOAT_DIGITS}f}"
    if text.startswith("-") and float(text) == 0.0:
        text = text[1:]
    return text


def _encode(obj: Any, indent: int | None, level: int) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if hasattr(obj, "value") and isinstance(obj.value, str):  # str enums
        return json.dumps(obj.value)

    if indent is None:
        pad, inner, sep, colon = "", "", ",", ":"
    else:
        pad = "\n" + " " * (indent * level)
        inner = "\n" + " " * (indent * (level + 1))
        sep, colon = ",", ": "

    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = sorted((str(k), v) for k, v in obj.items())
        body = sep.join(f"{inner}{json.dumps(k)}{colon}{_encode(v, indent, level + 1)}" for k, v in items)
        return "{" + body + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        body = sep.join(f"{inner}{_encode(v, indent, level + 1)}" for v in obj)
        return "[" + body + pad + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps(obj: Any, indent: int | None = 2) -> str:
    return _encode(obj, indent, 0)
