"""Checkpoint persistence: a JSON manifest plus one little-endian float32 blob.

Layout of a checkpoint directory::

    manifest.json   {"format": ..., "blob": "weights.bin",
                     "params": [{"name", "shape", "offset", "length"}, ...]}
    weights.bin     float32 values, params concatenated in manifest order
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

FORMAT = "dsem-lab-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "weights.bin"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Mapping[str, np.ndarray], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "blob": BLOB, "params": entries}
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(
    path: str | os.PathLike,
    expected: Mapping[str, tuple[int, ...]] | None = None,
) -> dict[str, np.ndarray]:
    """Read every parameter, validating the blob before returning anything.

    With ``expected`` (name -> shape of the consuming model) unknown names and
    shape mismatches are errors; names missing from the checkpoint are allowed
    so detector-only consumers can read adapted checkpoints.
    """
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        blob = (path / manifest.get("blob", BLOB)).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")

    entries = manifest["params"]
    if expected is not None:
        unknown = [e["name"] for e in entries if e["name"] not in expected]
        if unknown:
            raise CheckpointError(f"{path}: unknown parameter(s) {', '.join(unknown)}")
    out: dict[str, np.ndarray] = {}
    for e in entries:
        name, shape = e["name"], tuple(e["shape"])
        off, length = int(e["offset"]), int(e["length"])
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: parameter {name} declares shape {shape} but length {length}")
        if off < 0 or off + length > len(blob):
            raise CheckpointError(f"{path}: blob truncated at parameter {name} (need {off + length} bytes, have {len(blob)})")
        if expected is not None and tuple(expected[name]) != shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {shape}, model expects {tuple(expected[name])}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=off).reshape(shape).astype(np.float32)
    return out


def merge(*states: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for s in states:
        out.update(s)
    return out


def strip_prefixes(state: Mapping[str, np.ndarray], prefixes: Iterable[str]) -> dict[str, np.ndarray]:
    prefixes = tuple(prefixes)
    return {k: v for k, v in state.items() if not k.startswith(prefixes)}
