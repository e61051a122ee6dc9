"""JSON output with floats written to 17 significant digits."""

import json
import math
from pathlib import Path

import numpy as np


def _fmt(x, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(x, dict):
        if not x:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_fmt(v, indent, level + 1)}" for k, v in x.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(x, (list, tuple)):
        if not x:
            return "[]"
        if all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in x):
            return "[" + ", ".join(_fmt(v, indent, level) for v in x) + "]"
        return "[\n" + ",\n".join(pad + _fmt(v, indent, level + 1) for v in x) + "\n" + end + "]"
    if isinstance(x, np.ndarray):
        return _fmt(x.tolist(), indent, level)
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return "null"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x) or math.isinf(x):
            return "null"
        return f"{x:.17g}"
    if isinstance(x, Path):
        return json.dumps(str(x))
    return json.dumps(x)


def dumps(obj, indent=1):
    """JSON with every float written to 17 significant digits."""
    return _fmt(obj, indent, 0) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))
    return Path(path)
