"""Deterministic report writers: JSON with 17-significant-digit floats,
JSON-lines streams and CSV tables.  Byte-identical output for identical
inputs is part of the contract."""
from __future__ import annotations

import math
from typing import Iterable, Sequence


def fmt_float(x: float) -> str:
    if isinstance(x, bool):  # guard: bools are ints
        return "true" if x else "false"
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return f"{x:.17g}"


def to_json(obj, indent: int = 0, pretty: bool = False) -> str:
    pad = "  " * (indent + 1) if pretty else ""
    end = "\n" if pretty else ""
    closepad = "  " * indent if pretty else ""
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return fmt_float(obj)
    if isinstance(obj, str):
        return '"' + obj.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{to_json(str(k))}: {to_json(v, indent + 1, pretty)}"
                 for k, v in obj.items()]
        return "{" + end + ("," + end).join(items) + end + closepad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{pad}{to_json(v, indent + 1, pretty)}" for v in obj]
        return "[" + end + ("," + end).join(items) + end + closepad + "]"
    try:
        import numpy as np
        if isinstance(obj, np.bool_):
            return "true" if obj else "false"
        if isinstance(obj, np.integer):
            return str(int(obj))
        if isinstance(obj, np.floating):
            return fmt_float(float(obj))
        if isinstance(obj, np.ndarray):
            return to_json(obj.tolist(), indent, pretty)
    except ImportError:  # pragma: no cover
        pass
    raise TypeError(f"cannot serialize {type(obj)}")


def write_json(path, obj, pretty: bool = True) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(obj, pretty=pretty))
        fh.write("\n")


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(to_json(row))
            fh.write("\n")


def csv_cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return fmt_float(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(csv_cell(v) for v in row) + "\n")
