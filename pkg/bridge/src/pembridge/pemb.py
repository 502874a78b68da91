"""Writer for the PEMB v1 binary embedding format.

Layout: magic "PEMB", version u32 LE = 1, dim u32 LE, record_count u32 LE,
then per record: name_len u32 LE, UTF-8 name, label i32 LE, modality u8
(0 = image global, 1 = image patch set, 2 = text prompt), vec_count u32 LE,
then vec_count * dim float32 LE values. This module is the bridge-side
implementation of the engine's ingestion schema.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PEMB"
VERSION = 1

IMAGE_GLOBAL = 0
IMAGE_PATCH_SET = 1
TEXT_PROMPT = 2

_HEADER = struct.Struct("<4sIII")
_NAME_LEN = struct.Struct("<I")
_REC_META = struct.Struct("<iBI")


class PembWriteError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    name: str
    label: int
    modality: int
    vectors: np.ndarray  # (vec_count, dim) float32


def make_record(name: str, label: int, modality: int, vectors) -> Record:
    arr = np.asarray(vectors, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise PembWriteError(f"record {name!r}: vectors must be a non-empty 2-D block")
    if not np.all(np.isfinite(arr)):
        raise PembWriteError(f"record {name!r}: non-finite values")
    if modality in (IMAGE_GLOBAL, TEXT_PROMPT) and arr.shape[0] != 1:
        raise PembWriteError(f"record {name!r}: this modality holds exactly one vector")
    if modality not in (IMAGE_GLOBAL, IMAGE_PATCH_SET, TEXT_PROMPT):
        raise PembWriteError(f"record {name!r}: unknown modality {modality}")
    return Record(name=name, label=int(label), modality=int(modality), vectors=arr)


def write_pemb(path: str | Path, dim: int, records: list[Record]) -> int:
    """Serialize records; returns bytes written. Names must be unique."""
    seen: set[str] = set()
    for rec in records:
        if rec.vectors.shape[1] != dim:
            raise PembWriteError(f"record {rec.name!r} dim {rec.vectors.shape[1]} != {dim}")
        if rec.name in seen:
            raise PembWriteError(f"duplicate record name {rec.name!r}")
        seen.add(rec.name)

    written = 0
    with open(path, "wb") as fh:
        written += fh.write(_HEADER.pack(MAGIC, VERSION, dim, len(records)))
        for rec in records:
            name = rec.name.encode("utf-8")
            written += fh.write(_NAME_LEN.pack(len(name)))
            written += fh.write(name)
            written += fh.write(_REC_META.pack(rec.label, rec.modality, rec.vectors.shape[0]))
            written += fh.write(rec.vectors.astype("<f4", copy=False).tobytes())
    return written
