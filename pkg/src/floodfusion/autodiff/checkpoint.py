"""Binary checkpoints.

Layout::

    FFCKPT1
    meta <one-line JSON>          # model spec and anything else the caller stores
    entries <n>
    <name> <d1>,<d2>,...          # n lines, registration order; scalars use "-"
    end
    <payload: little-endian float64 arrays, concatenated in the same order>
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "FFCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    lines = [MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True), f"entries {len(arrays)}"]
    for name, arr in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"invalid entry name {name!r}")
        shape = ",".join(str(d) for d in np.shape(arr)) or "-"
        lines.append(f"{name} {shape}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in arrays.values())
    Path(path).write_bytes(header + payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    pos = 0

    def next_line():
        nonlocal pos
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        return line

    try:
        if next_line() != MAGIC:
            raise CheckpointError(f"{path}: not a {MAGIC} checkpoint")
        meta_line = next_line()
        meta = json.loads(meta_line[len("meta "):])
        count = int(next_line().split()[1])
        entries = []
        for _ in range(count):
            name, shape = next_line().split()
            entries.append((name, () if shape == "-" else tuple(int(d) for d in shape.split(","))))
        if next_line() != "end":
            raise CheckpointError(f"{path}: malformed header")
    except (ValueError, IndexError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed header ({exc})") from None

    arrays = {}
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[pos:pos + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated payload at {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return arrays, meta
