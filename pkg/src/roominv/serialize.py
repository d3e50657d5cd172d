"""Canonical JSON writing.

Output files that participate in byte-identity checks (scenes, recovered
rooms, reports, manifests) are written with this serializer: insertion-order
fields, floats at 17 significant digits (lossless round trip), two-space
indentation, trailing newline.
"""

import json

import numpy as np


def _format_float(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError(f"non-finite value not serializable: {x!r}")
    s = format(float(x), ".17g")
    if "." not in s and "e" not in s and "E" not in s:
        s += ".0"
    return s


def _write(obj, parts, indent, level):
    pad = " " * (indent * level)
    pad_in = " " * (indent * (level + 1))
    if isinstance(obj, dict):
        if not obj:
            parts.append("{}")
            return
        parts.append("{\n")
        for i, (key, val) in enumerate(obj.items()):
            parts.append(pad_in + json.dumps(str(key)) + ": ")
            _write(val, parts, indent, level + 1)
            parts.append(",\n" if i < len(obj) - 1 else "\n")
        parts.append(pad + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = list(np.asarray(obj).tolist()) if isinstance(obj, np.ndarray) else list(obj)
        if not items:
            parts.append("[]")
            return
        parts.append("[\n")
        for i, val in enumerate(items):
            parts.append(pad_in)
            _write(val, parts, indent, level + 1)
            parts.append(",\n" if i < len(items) - 1 else "\n")
        parts.append(pad + "]")
    elif isinstance(obj, bool) or obj is None:
        parts.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(_format_float(obj))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    else:
        raise TypeError(f"cannot canonically serialize {type(obj)!r}")


def dumps_canonical(obj, indent: int = 2) -> str:
    parts = []
    _write(obj, parts, indent, 0)
    parts.append("\n")
    return "".join(parts)


def dump_canonical(obj, path, indent: int = 2) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(obj, indent=indent))


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
