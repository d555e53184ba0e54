"""Named, ordered parameter snapshots and their binary container format.

A :class:`ModelSnapshot` is the unit of aggregation, serialization and head
surgery: an ordered list of (name, float64 array) pairs plus a role tag.
Snapshots are immutable; training works on private copies.

File format (little-endian throughout):

    magic   5 bytes  b"FSSL1"
    count   u32      number of parameters
    per parameter:
        name_len  u32
        name      UTF-8 bytes
        rank      u32
        extents   u32 * rank
        data      float64 * prod(extents), raw little-endian, row-major

The role tag is not stored; it is recovered from the trailing parameter
name on load (a classifier snapshot ends with the ``head.*`` pair, an SSL
snapshot with ``proj.*``). Parameter bytes round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, parameter
from .errors import ContractError, FormatError

MAGIC = b"FSSL1"

ROLE_SSL = "ssl"
ROLE_CLASSIFIER = "classifier"


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64).copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ModelSnapshot:
    """Ordered (name, tensor) parameter list with a role tag."""

    params: tuple[tuple[str, np.ndarray], ...]
    role: str

    def __post_init__(self):
        if self.role not in (ROLE_SSL, ROLE_CLASSIFIER):
            raise ContractError(f"unknown snapshot role {self.role!r}")
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names in snapshot")
        object.__setattr__(
            self, "params",
            tuple((n, _frozen(a)) for n, a in self.params))

    def names(self) -> list[str]:
        return [n for n, _ in self.params]

    def get(self, name: str) -> np.ndarray:
        for n, a in self.params:
            if n == name:
                return a
        raise KeyError(name)

    def param_count(self) -> int:
        return sum(a.size for _, a in self.params)

    def to_tensors(self) -> list[Tensor]:
        """Fresh writable parameter tensors for a training run."""
        return [parameter(a.copy(), name=n) for n, a in self.params]

    @classmethod
    def from_tensors(cls, tensors: Iterable[Tensor], role: str) -> "ModelSnapshot":
        return cls(tuple((t.name, t.data) for t in tensors), role)


def infer_role(names: Sequence[str]) -> str:
    if names and names[-1].startswith("head."):
        return ROLE_CLASSIFIER
    return ROLE_SSL


def save_snapshot(snap: ModelSnapshot, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(snap.params)))
        for name, arr in snap.params:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_snapshot(path) -> ModelSnapshot:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated snapshot while reading {what}", offset=pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(5, "magic") != MAGIC:
        raise FormatError("bad magic string, not a snapshot file", offset=0)
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    params: list[tuple[str, np.ndarray]] = []
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of parameter {i}"))
        try:
            name = take(name_len, f"name of parameter {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"parameter {i} name is not UTF-8", offset=pos) from exc
        (rank,) = struct.unpack("<I", take(4, f"rank of {name!r}"))
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for {name!r}", offset=pos - 4)
        extents = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name!r}"))
        size = int(np.prod(extents, dtype=np.int64)) if rank else 1
        raw = take(8 * size, f"data of {name!r}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(extents)
        params.append((name, arr))
    if pos != len(blob):
        raise FormatError("trailing bytes after last parameter", offset=pos)
    return ModelSnapshot(tuple(params), infer_role([n for n, _ in params]))
