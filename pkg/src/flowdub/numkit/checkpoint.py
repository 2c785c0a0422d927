"""Binary checkpoint format.

Layout (little-endian): magic ``FDCK``, u32 version, then records of
(u32 name length, utf-8 name, u32 rank, rank x u32 shape, float32 payload)
until end of file. Adam moments are stored as ``<name>/m`` and ``<name>/v``;
the step counter is the rank-0 record ``_step``.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .optim import ParamStore
from .tensor import Tensor

MAGIC = b"FDCK"
VERSION = 1
STEP_KEY = "_step"


class CheckpointError(ValueError):
    pass


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f4", order="C")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dump_arrays(records: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in records.items():
        out.append(_record(name, np.asarray(arr)))
    return b"".join(out)


def parse_arrays(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic, not an FDCK checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    records: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"truncated payload for {name!r}")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            records[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return records


def save_checkpoint(path: str | os.PathLike, store: ParamStore) -> None:
    records: dict[str, np.ndarray] = {}
    for name, t in store.params.items():
        records[name] = t.data
    for name in store.params:
        records[name + "/m"] = store.m[name]
        records[name + "/v"] = store.v[name]
    records[STEP_KEY] = np.asarray(store.step, dtype=np.float32)
    Path(path).write_bytes(dump_arrays(records))


def load_checkpoint(path: str | os.PathLike) -> ParamStore:
    records = parse_arrays(Path(path).read_bytes())
    store = ParamStore()
    for name, arr in records.items():
        if name == STEP_KEY or name.endswith(("/m", "/v")):
            continue
        store.params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        store.m[name] = records.get(name + "/m", np.zeros_like(arr)).copy()
        store.v[name] = records.get(name + "/v", np.zeros_like(arr)).copy()
    store.step = int(records[STEP_KEY]) if STEP_KEY in records else 0
    return store
