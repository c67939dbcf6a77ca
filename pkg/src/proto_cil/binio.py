"""Checkpoint format: one JSON header line, then raw little-endian float64 blocks.

The header carries `meta` (caller-defined) and `blocks`, an ordered list of
[name, shape] entries matching the binary payload.
"""

import json

import numpy as np


class CheckpointError(ValueError):
    pass


def save_blocks(path, meta: dict, arrays: dict) -> None:
    header = {
        "meta": meta,
        "blocks": [[name, list(arr.shape)] for name, arr in arrays.items()],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_blocks(path):
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: bad checkpoint header") from exc
        arrays = {}
        for name, shape in header["blocks"]:
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"{path}: truncated block {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last block")
    return header["meta"], arrays
