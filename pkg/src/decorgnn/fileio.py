"""Atomic text writes and the named-parameter manifest format."""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np


class DataFormatError(ValueError):
    """A file's content violates its documented format."""


def atomic_write_text(path, text: str) -> None:
    """Write text to path via a temp file and rename, never a partial file."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".partial-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_manifest(path, arrays: dict[str, np.ndarray]) -> None:
    """Persist named matrices, one JSON record per line, names sorted.

    Each record carries the shape and row-major values at full float
    precision, so a save/load round trip is exact.
    """
    lines = []
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"manifest entries must be 2-D, {name!r} is {a.ndim}-D")
        lines.append(json.dumps({
            "name": name,
            "rows": int(a.shape[0]),
            "cols": int(a.shape[1]),
            "values": a.reshape(-1).tolist(),
        }))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_manifest(path) -> dict[str, np.ndarray]:
    """Read a manifest back into a name -> matrix dict."""
    arrays: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataFormatError(f"{path}:{lineno}: not valid JSON: {err}") from None
            if not isinstance(record, dict) or set(record) != {"name", "rows", "cols", "values"}:
                raise DataFormatError(f"{path}:{lineno}: expected name/rows/cols/values record")
            name, rows, cols = record["name"], record["rows"], record["cols"]
            values = record["values"]
            if not isinstance(rows, int) or not isinstance(cols, int) or rows < 1 or cols < 1:
                raise DataFormatError(f"{path}:{lineno}: bad shape {rows}x{cols}")
            if len(values) != rows * cols:
                raise DataFormatError(
                    f"{path}:{lineno}: {rows}x{cols} needs {rows * cols} values, got {len(values)}")
            if name in arrays:
                raise DataFormatError(f"{path}:{lineno}: duplicate parameter {name!r}")
            arrays[name] = np.asarray(values, dtype=np.float64).reshape(rows, cols)
    return arrays
