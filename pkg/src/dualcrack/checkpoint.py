"""Flat binary checkpoints.

Layout::

    b"DFFM" | uint32 version | uint32 header length | UTF-8 JSON header | payload

The header names every tensor with its shape; the payload is the tensors'
little-endian float32 bytes in header order (parameters, then Adam first and
second moments when present).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

MAGIC = b"DFFM"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


class DigestMismatch(CheckpointError):
    def __init__(self, expected: str, found: str) -> None:
        self.expected, self.found = expected, found
        super().__init__(f"checkpoint config digest {found} does not match model config digest {expected}")


@dataclass
class Checkpoint:
    config_digest: str
    params: dict[str, np.ndarray]
    step: int = 0
    model_config: dict = field(default_factory=dict)
    adam_t: int = 0
    adam_m: Optional[dict[str, np.ndarray]] = None
    adam_v: Optional[dict[str, np.ndarray]] = None
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)


def to_bytes(ck: Checkpoint) -> bytes:
    names = list(ck.params)
    has_moments = ck.adam_m is not None and ck.adam_v is not None
    header: dict[str, Any] = {
        "config_digest": ck.config_digest,
        "model_config": ck.model_config,
        "step": int(ck.step),
        "params": [[n, list(ck.params[n].shape)] for n in names],
        "adam": {"t": int(ck.adam_t), "moments": has_moments},
        "rng_state": ck.rng_state,
        "extra": ck.extra,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    groups = [ck.params] + ([ck.adam_m, ck.adam_v] if has_moments else [])
    for group in groups:
        for n in names:
            chunks.append(np.ascontiguousarray(group[n], dtype=_LE_F32).tobytes())
    return b"".join(chunks)


def from_bytes(blob: bytes, expected_digest: Optional[str] = None) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if expected_digest is not None and header["config_digest"] != expected_digest:
        raise DigestMismatch(expected_digest, header["config_digest"])
    offset = 12 + hlen
    specs = [(n, tuple(s)) for n, s in header["params"]]

    def read_group() -> dict[str, np.ndarray]:
        nonlocal offset
        out = {}
        for n, shape in specs:
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=offset)
            out[n] = arr.reshape(shape).astype(np.float32)
            offset += count * 4
        return out

    try:
        params = read_group()
        m = v = None
        if header["adam"]["moments"]:
            m = read_group()
            v = read_group()
    except ValueError as exc:
        raise CheckpointError("truncated checkpoint payload") from exc
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes in checkpoint")
    return Checkpoint(header["config_digest"], params, header["step"], header["model_config"],
                      header["adam"]["t"], m, v, header["rng_state"], header.get("extra", {}))


def save(ck: Checkpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)
    return path


def load(path: Path, expected_digest: Optional[str] = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_digest)
