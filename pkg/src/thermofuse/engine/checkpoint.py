"""PTCKPT1 checkpoints: one JSON manifest line, then float64 LE parameter blobs."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "PTCKPT1"
_F64 = np.dtype("<f8")


class CheckpointError(Exception):
    pass


def save_checkpoint(path, params, *, step: int = 0, seed: int = 0, extra: dict | None = None) -> None:
    """``params`` is an ordered iterable of Parameters with unique names."""
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("parameter names must be unique")
    manifest = {
        "magic": MAGIC,
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
        "step": int(step),
        "seed": int(seed),
        "extra": extra or {},
    }
    header = json.dumps(manifest, separators=(",", ":"), sort_keys=True).encode("utf-8") + b"\n"
    payload = b"".join(np.ascontiguousarray(p.data, dtype=_F64).tobytes() for p in params)
    Path(path).write_bytes(header + payload)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing manifest line")
    try:
        manifest = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"bad manifest: {exc}") from None
    if manifest.get("magic") != MAGIC:
        raise CheckpointError("not a PTCKPT1 file")
    payload = raw[nl + 1:]
    arrays, offset = {}, 0
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = n * _F64.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError("payload shorter than manifest implies")
        arrays[entry["name"]] = np.frombuffer(payload, _F64, n, offset).reshape(entry["shape"]).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("payload longer than manifest implies")
    return manifest, arrays


def load_into(params, arrays: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {p.name!r}")
        if arrays[p.name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {p.name!r}")
        p.data[...] = arrays[p.name]
