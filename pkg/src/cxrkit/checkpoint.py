"""Single-file checkpoint format.

Layout: magic "MXC1" | version u32 LE | manifest length u64 LE | manifest
JSON (UTF-8) | raw float32 little-endian payload. The manifest maps tensor
names to shape/offset/length and carries arbitrary metadata (vocab, config
hash). Offsets are contiguous in sorted-name order, so save -> load -> save
is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"MXC1"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = {}
    offset = 0
    names = sorted(tensors)
    for name in names:
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        length = arr.nbytes
        entries[name] = {"dtype": "f32", "shape": list(arr.shape),
                         "offset": offset, "length": length}
        offset += length
    manifest = json.dumps({"tensors": entries, "meta": meta or {}},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).astype("<u4").tobytes())
        fh.write(np.uint64(len(manifest)).astype("<u8").tobytes())
        fh.write(manifest)
        for name in names:
            fh.write(np.asarray(tensors[name], dtype="<f4", order="C").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    mlen = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    payload = raw[16 + mlen:]
    tensors = {}
    for name, ent in manifest["tensors"].items():
        start, length = ent["offset"], ent["length"]
        if start + length > len(payload):
            raise TruncationError(f"payload truncated at tensor {name!r}")
        buf = payload[start:start + length]
        tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(ent["shape"]).copy()
    return tensors, manifest["meta"]
