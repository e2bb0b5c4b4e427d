"""Versioned plain-text checkpoint files.

Format (line oriented, exact float round-trip via shortest repr):

    #seqctr-ckpt v1
    meta <key> <value>
    tensor <name> <dim0> [dim1 ...]
    <row of values, space separated>      (one line per leading row; a single
                                           line for 0-d/1-d tensors)

Values are written with Python float repr, which round-trips bit-exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "#seqctr-ckpt"
VERSION = "v1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    """Write named float64 arrays plus string metadata to `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: list[str] = [f"{MAGIC} {VERSION}"]
    for key, value in sorted((meta or {}).items()):
        value = str(value)
        if any(c.isspace() for c in value):
            raise CheckpointError(f"meta value for {key!r} must not contain whitespace")
        lines.append(f"meta {key} {value}")
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        dims = " ".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"tensor {name} {dims}")
        rows = arr.reshape(1, -1) if arr.ndim <= 1 else arr.reshape(arr.shape[0], -1)
        for row in rows:
            lines.append(" ".join(repr(float(x)) for x in row))
    path.write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Read a checkpoint; returns (meta, arrays). Refuses unknown versions."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().rstrip("\n")
        parts = header.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise CheckpointError(f"{path}: not a seqctr checkpoint")
        if parts[1] != VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {parts[1]!r} (expected {VERSION})"
            )
        meta: dict[str, str] = {}
        arrays: dict[str, np.ndarray] = {}
        name = None
        shape: tuple[int, ...] = ()
        rows: list[list[float]] = []
        expected_rows = 0

        def finish():
            if name is None:
                return
            if len(rows) != expected_rows:
                raise CheckpointError(
                    f"{path}: tensor {name!r} has {len(rows)} rows, expected {expected_rows}"
                )
            arr = np.array(rows, dtype=np.float64).reshape(shape)
            arrays[name] = arr

        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("meta "):
                _, key, value = line.split(" ", 2)
                meta[key] = value
            elif line.startswith("tensor "):
                finish()
                fields = line.split()
                name = fields[1]
                if fields[2:] == ["scalar"]:
                    shape = ()
                else:
                    shape = tuple(int(d) for d in fields[2:])
                rows = []
                expected_rows = 1 if len(shape) <= 1 else shape[0]
            else:
                if name is None:
                    raise CheckpointError(f"{path}:{lineno}: values before any tensor header")
                try:
                    rows.append([float(x) for x in line.split()])
                except ValueError as err:
                    raise CheckpointError(f"{path}:{lineno}: bad value ({err})") from None
        finish()
    return meta, arrays
