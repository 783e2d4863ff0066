"""Named-tensor checkpoint files.

Layout (little-endian)::

    b"DGCK" | u32 format_version | u64 header_len | header JSON (UTF-8) | payload

The header holds a manifest of ``{name, shape, dtype, offset}`` entries plus a
free-form ``meta`` object (config echo, rng state, optimiser scalars, metrics).
Every tensor is stored as ``<f4``; offsets are relative to the payload start.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DGCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors whose names start with ``prefix + '.'``, with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    @staticmethod
    def prefixed(prefix: str, arrays: dict) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for k, v in arrays.items()}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr)
        if not np.issubdtype(a.dtype, np.floating):
            raise CheckpointError(f"tensor {name!r} has non-float dtype {a.dtype}")
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(a.shape), "dtype": "<f4", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"manifest": manifest, "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", ckpt.format_version, len(header)) + header + b"".join(chunks)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 16
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    payload = memoryview(raw)[start + hlen:]
    tensors = {}
    for entry in header["manifest"]:
        name = entry["name"]
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r} in manifest")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=entry["dtype"], count=count, offset=entry["offset"])
        tensors[name] = arr.reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(tensors=tensors, meta=header["meta"], format_version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically so an interrupted save never clobbers the previous file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)
