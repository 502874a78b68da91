"""Embedding tables, the PEMB v1 binary format, and the synthetic generator.

Tables are the only ingestion boundary of the engine: every image, patch and
prompt representation enters as a named, labeled, modality-tagged collection
of fixed-dimension vectors. Vectors are stored as little-endian float32 so a
write -> read round trip is bit-exact; all downstream arithmetic promotes to
float64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import (
    BadMagic,
    BadModality,
    BadVersion,
    DuplicateName,
    FormatError,
    NonFiniteValue,
    TrailingBytes,
    Truncated,
    ZeroVector,
)

MAGIC = b"PEMB"
VERSION = 1

_HEADER = struct.Struct("<4sIII")  # magic, version, dim, record_count
_NAME_LEN = struct.Struct("<I")
_REC_META = struct.Struct("<iBI")  # label, modality, vec_count


class Modality(IntEnum):
    IMAGE_GLOBAL = 0
    IMAGE_PATCH_SET = 1
    TEXT_PROMPT = 2


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm, preserving its direction.

    Raises:
        ZeroVector: if the input has zero norm.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ZeroVector("cannot normalize a zero vector")
    return v / norm


@dataclass(frozen=True)
class EmbeddingRecord:
    """One named entry: a label, a modality tag and its vectors.

    ``vectors`` always has shape (vec_count, dim) and dtype float32. Global
    image and text prompt records carry exactly one vector; patch-set records
    carry one vector per patch. Label -1 marks unknown/OOD samples.
    """

    name: str
    label: int
    modality: Modality
    vectors: np.ndarray

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float32)
        if vecs.ndim == 1:
            vecs = vecs.reshape(1, -1)
        if vecs.ndim != 2 or vecs.shape[0] < 1 or vecs.shape[1] < 1:
            raise FormatError(f"record {self.name!r}: vectors must form a non-empty 2-D block")
        if not np.all(np.isfinite(vecs)):
            raise NonFiniteValue(f"record {self.name!r} contains non-finite values")
        if self.modality in (Modality.IMAGE_GLOBAL, Modality.TEXT_PROMPT) and vecs.shape[0] != 1:
            raise FormatError(
                f"record {self.name!r}: modality {self.modality.name} requires exactly 1 vector"
            )
        vecs.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.name == other.name
            and self.label == other.label
            and self.modality == other.modality
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


@dataclass(frozen=True)
class EmbeddingTable:
    """An ordered, immutable collection of records sharing one dimension."""

    dim: int
    records: tuple[EmbeddingRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.dim <= 0:
            raise FormatError("dimension must be positive")
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        for rec in self.records:
            if rec.dim != self.dim:
                raise FormatError(
                    f"record {rec.name!r} has dim {rec.dim}, table expects {self.dim}"
                )
            if rec.name in seen:
                raise DuplicateName(f"duplicate record name {rec.name!r}")
            seen.add(rec.name)

    def __len__(self) -> int:
        return len(self.records)

    def by_name(self) -> dict[str, EmbeddingRecord]:
        return {rec.name: rec for rec in self.records}

    def select(self, modality: Modality) -> tuple[EmbeddingRecord, ...]:
        return tuple(rec for rec in self.records if rec.modality == modality)


def write_table(table: EmbeddingTable, sink: BinaryIO) -> int:
    """Serialize a table in PEMB v1 format.

    Returns:
        Number of bytes written.
    """
    written = sink.write(_HEADER.pack(MAGIC, VERSION, table.dim, len(table.records)))
    for rec in table.records:
        name_bytes = rec.name.encode("utf-8")
        written += sink.write(_NAME_LEN.pack(len(name_bytes)))
        written += sink.write(name_bytes)
        written += sink.write(_REC_META.pack(rec.label, int(rec.modality), rec.vectors.shape[0]))
        written += sink.write(rec.vectors.astype("<f4", copy=False).tobytes())
    return written


def _read_exact(source: BinaryIO, count: int, what: str) -> bytes:
    data = source.read(count)
    if len(data) != count:
        raise Truncated(f"stream ended while reading {what}")
    return data


def read_table(source: BinaryIO) -> EmbeddingTable:
    """Parse a PEMB v1 stream, validating every table invariant.

    Raises:
        BadMagic, BadVersion, Truncated, DuplicateName, NonFiniteValue,
        BadModality, TrailingBytes: on the corresponding format violations.
    """
    header = _read_exact(source, _HEADER.size, "header")
    magic, version, dim, count = _HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if dim == 0:
        raise FormatError("header declares zero dimension")

    records = []
    for _ in range(count):
        (name_len,) = _NAME_LEN.unpack(_read_exact(source, _NAME_LEN.size, "name length"))
        try:
            name = _read_exact(source, name_len, "record name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"record name is not valid UTF-8: {exc}") from exc
        label, modality_byte, vec_count = _REC_META.unpack(
            _read_exact(source, _REC_META.size, f"metadata of {name!r}")
        )
        try:
            modality = Modality(modality_byte)
        except ValueError:
            raise BadModality(f"record {name!r}: unknown modality byte {modality_byte}")
        if vec_count == 0:
            raise FormatError(f"record {name!r} declares zero vectors")
        raw = _read_exact(source, vec_count * dim * 4, f"vectors of {name!r}")
        vectors = np.frombuffer(raw, dtype="<f4").reshape(vec_count, dim).copy()
        records.append(EmbeddingRecord(name=name, label=label, modality=modality, vectors=vectors))

    if source.read(1):
        raise TrailingBytes("unexpected bytes after the last record")
    return EmbeddingTable(dim=dim, records=tuple(records))


def save_table(table: EmbeddingTable, path: str | Path) -> int:
    with open(path, "wb") as fh:
        return write_table(table, fh)


def load_table(path: str | Path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        return read_table(fh)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the deterministic synthetic dataset generator."""

    num_classes: int
    per_class: int
    dim: int
    patches_per_image: int = 1
    cluster_spread: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise FormatError("num_classes must be at least 2")
        if self.per_class < 1:
            raise FormatError("per_class must be at least 1")
        if self.dim < 1:
            raise FormatError("dim must be positive")
        if self.patches_per_image < 1:
            raise FormatError("patches_per_image must be at least 1")
        if self.cluster_spread < 0:
            raise FormatError("cluster_spread must be non-negative")


def synth_dataset(spec: SynthSpec) -> tuple[EmbeddingTable, EmbeddingTable, EmbeddingTable]:
    """Generate (image table, patch table, class-mean table) from a spec.

    Each category draws a unit mean; images perturb the mean with isotropic
    Gaussian noise of scale ``cluster_spread`` and re-normalize, and each
    image's patches perturb the image vector the same way. Output is a pure
    function of the spec.
    """
    rng = np.random.default_rng(spec.seed)
    means = []
    for _ in range(spec.num_classes):
        means.append(l2_normalize(rng.standard_normal(spec.dim)))

    image_records = []
    patch_records = []
    sigma = spec.cluster_spread
    for c in range(spec.num_classes):
        for i in range(spec.per_class):
            name = f"c{c:03d}_s{i:04d}"
            image = l2_normalize(means[c] + sigma * rng.standard_normal(spec.dim))
            patches = np.stack(
                [
                    l2_normalize(image + sigma * rng.standard_normal(spec.dim))
                    for _ in range(spec.patches_per_image)
                ]
            )
            image_records.append(
                EmbeddingRecord(name=name, label=c, modality=Modality.IMAGE_GLOBAL, vectors=image)
            )
            patch_records.append(
                EmbeddingRecord(
                    name=name, label=c, modality=Modality.IMAGE_PATCH_SET, vectors=patches
                )
            )

    mean_records = [
        EmbeddingRecord(
            name=f"mean_c{c:03d}", label=c, modality=Modality.IMAGE_GLOBAL, vectors=means[c]
        )
        for c in range(spec.num_classes)
    ]
    return (
        EmbeddingTable(dim=spec.dim, records=tuple(image_records)),
        EmbeddingTable(dim=spec.dim, records=tuple(patch_records)),
        EmbeddingTable(dim=spec.dim, records=tuple(mean_records)),
    )


def stack_vectors(records: Iterable[EmbeddingRecord]) -> np.ndarray:
    """Concatenate record vectors into one float64 matrix, in record order."""
    blocks = [rec.vectors.astype(np.float64) for rec in records]
    if not blocks:
        raise FormatError("no records to stack")
    return np.concatenate(blocks, axis=0)
