"""Self-describing checkpoint files.

Layout: magic ``PFSCKPT\\x01``, a u64 little-endian manifest length, the
UTF-8 JSON manifest, then raw little-endian tensor payloads in manifest
order.  Parameters, batchnorm running statistics and Adam moments are all
stored so a training run resumes exactly.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PFSCKPT\x01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, module, extra=None):
    entries, blobs = [], []

    def push(name, kind, arr):
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "dtype": dt.str})
        blobs.append(arr.astype(dt, copy=False).tobytes())

    steps = {}
    for name, p in module.named_parameters():
        push(name, "param", p.data)
        push(name, "adam_m", p.m)
        push(name, "adam_v", p.v)
        steps[name] = int(p.step)
    for name, buf in module.named_buffers():
        push(name, "buffer", buf)
    manifest = {"tensors": entries, "adam_steps": steps, "extra": extra or {}}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_checkpoint(path):
    """Return (manifest, {(kind, name): array})."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + n].decode())
    offset = 16 + n
    arrays = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arrays[(e["kind"], e["name"])] = (
            np.frombuffer(chunk, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
        )
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return manifest, arrays


def load_into(module, manifest, arrays):
    for name, p in module.named_parameters():
        try:
            value = arrays[("param", name)]
        except KeyError:
            raise CheckpointError(f"checkpoint lacks parameter {name}") from None
        if value.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {value.shape} vs {p.data.shape}")
        p.data = value.astype(p.data.dtype)
        p.m = arrays[("adam_m", name)].astype(p.data.dtype)
        p.v = arrays[("adam_v", name)].astype(p.data.dtype)
        p.step = int(manifest["adam_steps"][name])
        p.zero_grad()
    for name, buf in module.named_buffers():
        value = arrays[("buffer", name)]
        if value.shape != buf.shape:
            raise CheckpointError(f"shape mismatch for buffer {name}")
        buf[...] = value
