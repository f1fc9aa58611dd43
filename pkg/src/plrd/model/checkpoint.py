"""Named-tensor checkpoints and their on-disk format.

File layout (all integers little-endian)::

    magic        8 bytes   b"PLRDCKPT"
    version      u32       FORMAT_VERSION
    header_len   u64       length of the JSON header in bytes
    header       JSON      {"graph", "tensors": [{name, shape, dtype, offset, nbytes}],
                            "payload_nbytes"}; sorted keys, no whitespace
    padding      zeros up to the next multiple of 64
    payload      tensors, each starting at a 64-byte aligned offset
                 (relative to the payload start), row-major, little-endian
    checksum     32 bytes  SHA-256 of everything before it

See ``docs/checkpoint_format.md`` for the full description.
"""

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from ..errors import (
    ChecksumError,
    CorruptionError,
    FormatError,
    PayloadLengthError,
    VersionError,
)
from ..graph import ModelGraph

MAGIC = b"PLRDCKPT"
FORMAT_VERSION = 1
ALIGN = 64
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def _align(n):
    return -(-n // ALIGN) * ALIGN


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """A graph plus float64 tensors matching ``graph.tensor_shapes()``.

    Tensors are stored read-only; surgery and training build new checkpoints.
    """

    graph: ModelGraph
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        expected = self.graph.tensor_shapes()
        missing = [n for n in expected if n not in self.tensors]
        extra = [n for n in self.tensors if n not in expected]
        if missing or extra:
            raise CorruptionError(
                f"tensors do not match graph (missing {missing}, unexpected {extra})"
            )
        frozen: Dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            a = np.array(self.tensors[name], dtype=np.float64, copy=True)
            if a.shape != shape:
                raise CorruptionError(f"{name}: shape {a.shape}, graph declares {shape}")
            if not np.isfinite(a).all():
                raise CorruptionError(f"{name} contains NaN or Inf")
            a.flags.writeable = False
            frozen[name] = a
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name) -> np.ndarray:
        return self.tensors[name]

    def replace(self, graph=None, **updates) -> "Checkpoint":
        """New checkpoint with some tensors swapped (and optionally a new graph)."""
        graph = self.graph if graph is None else graph
        shapes = graph.tensor_shapes()
        tensors = {n: updates.get(n, self.tensors.get(n)) for n in shapes}
        return Checkpoint(graph, tensors)

    def with_tensors(self, tensors: Mapping[str, np.ndarray], graph=None) -> "Checkpoint":
        return self.replace(graph=graph, **tensors)

    def to_bytes(self, dtype="float32") -> bytes:
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}")
        dt = _DTYPES[dtype]
        entries, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                            "offset": offset, "nbytes": len(raw)})
            padded = _align(len(raw))
            chunks.append(raw + b"\0" * (padded - len(raw)))
            offset += padded
        header = json.dumps(
            {"graph": self.graph.to_dict(), "tensors": entries, "payload_nbytes": offset},
            sort_keys=True, separators=(",", ":"),
        ).encode()
        prefix = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header
        body = prefix + b"\0" * (_align(len(prefix)) - len(prefix)) + b"".join(chunks)
        return body + hashlib.sha256(body).digest()

    def digest(self, dtype="float32") -> str:
        return hashlib.sha256(self.to_bytes(dtype)).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _PREFIX.size:
            raise PayloadLengthError(_PREFIX.size, len(data))
        magic, version, header_len = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise FormatError("not a PLRD checkpoint (bad magic bytes)")
        if version != FORMAT_VERSION:
            raise VersionError(version, FORMAT_VERSION)
        header_end = _PREFIX.size + header_len
        if len(data) < header_end:
            raise PayloadLengthError(header_end, len(data))
        try:
            header = json.loads(data[_PREFIX.size:header_end])
            graph = ModelGraph.from_dict(header["graph"])
            entries = header["tensors"]
            payload_nbytes = int(header["payload_nbytes"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"malformed header: {exc}") from exc
        start = _align(header_end)
        expected = start + payload_nbytes + hashlib.sha256().digest_size
        if len(data) < expected:
            raise PayloadLengthError(expected, len(data))
        if len(data) > expected:
            raise FormatError(f"{len(data) - expected} trailing bytes after checksum")
        body, checksum = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != checksum:
            raise ChecksumError("checkpoint checksum mismatch")

        shapes = graph.tensor_shapes()
        if [e["name"] for e in entries] != list(shapes):
            raise CorruptionError("header tensor list does not match graph")
        tensors, end_prev = {}, 0
        for e in entries:
            name, shape = e["name"], tuple(e["shape"])
            if shape != shapes[name]:
                raise CorruptionError(f"{name}: header shape {shape}, graph {shapes[name]}")
            dt = _DTYPES.get(e["dtype"])
            if dt is None:
                raise FormatError(f"{name}: unknown dtype {e['dtype']!r}")
            off, nbytes = int(e["offset"]), int(e["nbytes"])
            if off % ALIGN or off < end_prev or off + nbytes > payload_nbytes:
                raise CorruptionError(f"{name}: bad offset {off}")
            if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
                raise CorruptionError(f"{name}: nbytes {nbytes} inconsistent with shape")
            end_prev = off + nbytes
            tensors[name] = np.frombuffer(
                data, dtype=dt, count=nbytes // dt.itemsize, offset=start + off
            ).reshape(shape)
        return cls(graph, tensors)


def save(ckpt: Checkpoint, path, dtype="float32") -> str:
    """Write ``ckpt``; returns the SHA-256 hex digest of the file."""
    data = ckpt.to_bytes(dtype)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
