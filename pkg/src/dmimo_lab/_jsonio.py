"""JSON writer that prints floats with 17 significant digits."""

import math

import numpy as np


def dumps17(obj) -> str:
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"non-finite number {x!r} cannot be serialized")
        s = format(x, ".17g")
        # keep floats recognisable as floats after a round trip
        if s.lstrip("-").isdigit():
            s += ".0"
        return s
    if isinstance(obj, str):
        import json

        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{dumps17(str(k))}:{dumps17(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return dumps17(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps17(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")
