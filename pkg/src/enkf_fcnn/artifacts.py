"""Text serialization helpers shared by every on-disk artifact.

Floats are written in decimal with 17 significant digits, which round-trips
IEEE doubles exactly. Documents are plain JSON otherwise, so any JSON reader
can load them.
"""

import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

from .errors import CorruptFileError


def fmt_float(x):
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x}")
    return format(x, ".17g")


def _emit(obj, indent, level, out):
    pad = " " * (indent * (level + 1))
    end_pad = " " * (indent * level)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist() if obj.dtype.kind in "biu" else obj.astype(np.float64).tolist()
        _emit_array(obj, out)
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = list(obj.items())
        for i, (key, value) in enumerate(items):
            out.append(pad + json.dumps(str(key)) + ": ")
            _emit(value, indent, level + 1, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(end_pad + "}")
    elif isinstance(obj, (list, tuple)):
        if _is_numeric_nest(obj):
            _emit_array(obj, out)
            return
        if not obj:
            out.append("[]")
            return
        out.append("[\n")
        for i, value in enumerate(obj):
            out.append(pad)
            _emit(value, indent, level + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end_pad + "]")
    else:
        out.append(_scalar(obj))


def _scalar(obj):
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _is_numeric_nest(obj):
    if isinstance(obj, (list, tuple)):
        return len(obj) > 0 and all(_is_numeric_nest(v) for v in obj)
    return isinstance(obj, (int, float, np.integer, np.floating)) and not isinstance(obj, (bool, np.bool_))


def _emit_array(obj, out):
    if isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(", ")
            _emit_array(v, out)
        out.append("]")
    else:
        out.append(_scalar(obj))


def dumps(obj, indent=1):
    out = []
    _emit(obj, indent, 0, out)
    out.append("\n")
    return "".join(out)


def write_json(path, obj):
    text = dumps(obj)
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_json(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable ({exc})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def content_sha256(obj):
    """Hash of the canonical serialization of ``obj``."""
    return hashlib.sha256(dumps(obj, indent=0).encode("utf-8")).hexdigest()


def array_sha256(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
