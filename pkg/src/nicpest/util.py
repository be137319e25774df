"""Small shared helpers: seeded integer streams and deterministic JSON."""
from __future__ import annotations

import hashlib
import math
from typing import Any, Iterator

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int) -> Iterator[int]:
    """Yield an endless deterministic stream of 64-bit integers.

    Splitmix-style mixer: platform independent, cheap, and serializable
    as a single integer seed.
    """
    state = seed & _MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield (z ^ (z >> 31)) & _MASK64


def derive_seed(master: int, index: int) -> int:
    """Deterministic child seed for sub-task ``index``."""
    stream = splitmix64((master ^ (index * 0xA3EC647659359ACD)) & _MASK64)
    return next(stream)


def coin(stream: Iterator[int]) -> bool:
    return bool(next(stream) & 1)


def registry_hash(names) -> str:
    joined = "\n".join(names)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def _format_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError("non-finite float cannot be serialized")
    # 17 significant digits round-trip any IEEE double exactly.
    return format(x, ".17g")


def dumps_json(obj: Any, indent: int = 0, _level: int = 0) -> str:
    """Serialize to JSON with floats at full (17 digit) precision.

    The stdlib encoder prints floats with repr(); the on-disk contract
    here asks for explicit 17-significant-digit decimals, so a small
    recursive writer is used instead. Key order is insertion order,
    which makes output byte-deterministic for deterministic inputs.
    """
    import json as _json

    pad = "\n" + " " * (indent * (_level + 1)) if indent else ""
    endpad = "\n" + " " * (indent * _level) if indent else ""
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, str):
        return _json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _format_float(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = []
        for key, val in obj.items():
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be str, got {type(key)!r}")
            items.append(pad + _json.dumps(key) + ": " + dumps_json(val, indent, _level + 1))
        return "{" + ",".join(items) + endpad + "}"
    if isinstance(obj, (list, tuple)):
        if not len(obj):
            return "[]"
        return ("[" + ",".join(pad + dumps_json(v, indent, _level + 1) for v in obj)
                + endpad + "]")
    # numpy scalars land here; coerce through item()
    if hasattr(obj, "item"):
        return dumps_json(obj.item(), indent, _level)
    raise TypeError(f"cannot serialize {type(obj)!r}")


def dump_json(obj: Any, path, indent: int = 1) -> None:
    text = dumps_json(obj, indent=indent) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_json(path) -> Any:
    import json as _json

    with open(path, "r", encoding="utf-8") as fh:
        return _json.load(fh)


def sig6(x: float) -> str:
    """Render a float with 6 significant digits (report output contract)."""
    if math.isnan(x):
        return "nan"
    return format(x, ".6g")
