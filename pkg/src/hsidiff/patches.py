"""3D hyperspectral patches, their binary container format and PSNR.

A patch is a ``(rows, cols, bands)`` array. Patch sets are persisted in a
small little-endian container::

    b"DVGPATCH"            8-byte magic
    u32 version            currently 1
    u32 count, d1, d2, d3
    count x { i32 label (-1 = unlabeled), d1*d2*d3 float32 row-major }
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

MAGIC = b"DVGPATCH"
VERSION = 1
HEADER = struct.Struct("<8sIIIII")
LABEL = struct.Struct("<i")

# Identical patches have zero MSE; PSNR is reported as +inf and serialized "inf".
PSNR_INF = math.inf
DEFAULT_PSNR_THRESHOLD = 20.0


class PatchFormatError(ValueError):
    """Raised for a malformed patch-set header."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PatchTruncatedError(PatchFormatError):
    """Raised when the payload is shorter or longer than the header declares."""


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Patch3D:
    """Immutable ``(d1, d2, d3)`` tensor with an optional class label.

    Float32 and float64 values are kept as given; anything else is cast to
    float64. The array is made read-only.
    """

    values: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"patch must be a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("patch values must be finite")
        arr = np.array(arr, copy=True, order="C")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    def with_values(self, values: np.ndarray) -> "Patch3D":
        """New patch with the same label and dtype."""
        return Patch3D(np.asarray(values).astype(self.values.dtype, copy=False), self.label)

    def __eq__(self, other):
        if not isinstance(other, Patch3D):
            return NotImplemented
        return (
            self.label == other.label
            and self.values.dtype == other.values.dtype
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def __hash__(self):
        return hash((self.label, self.values.shape, self.values.tobytes()))


@dataclass(frozen=True)
class PatchSet:
    patches: tuple[Patch3D, ...]
    provenance: str = ""
    shape: Optional[tuple] = None  # dims of an empty set; ignored otherwise

    def __post_init__(self):
        patches = tuple(self.patches)
        object.__setattr__(self, "patches", patches)
        if patches:
            dims = patches[0].dims
            for i, p in enumerate(patches):
                if p.dims != dims:
                    raise ShapeError(f"patch {i} has dims {p.dims}, expected {dims}")

    @classmethod
    def from_array(cls, values: np.ndarray, labels: Optional[Sequence[int]] = None,
                   provenance: str = "") -> "PatchSet":
        """Build from an ``(n, d1, d2, d3)`` array."""
        values = np.asarray(values)
        if labels is None:
            labels = [None] * len(values)
        return cls(tuple(Patch3D(v, l) for v, l in zip(values, labels)), provenance)

    @property
    def dims(self) -> tuple[int, int, int]:
        if not self.patches:
            if self.shape is None:
                raise ValueError("empty patch set has no dims")
            return tuple(int(d) for d in self.shape)
        return self.patches[0].dims

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self) -> Iterator[Patch3D]:
        return iter(self.patches)

    def __getitem__(self, idx: int) -> Patch3D:
        return self.patches[idx]


def encode_patchset(patchset: PatchSet) -> bytes:
    if len(patchset) == 0 and patchset.shape is None:
        raise ValueError("cannot write an empty patch set without a shape")
    d1, d2, d3 = patchset.dims
    chunks = [HEADER.pack(MAGIC, VERSION, len(patchset), d1, d2, d3)]
    for p in patchset:
        chunks.append(LABEL.pack(-1 if p.label is None else p.label))
        chunks.append(np.ascontiguousarray(p.values, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_patchset(data: bytes, provenance: str = "") -> PatchSet:
    if len(data) < HEADER.size:
        raise PatchTruncatedError("file shorter than header", len(data))
    magic, version, count, d1, d2, d3 = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise PatchFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise PatchFormatError(f"unsupported version {version}", 8)
    if min(d1, d2, d3) < 1:
        raise PatchFormatError(f"invalid dims {(d1, d2, d3)}", 16)
    n = d1 * d2 * d3
    record = LABEL.size + 4 * n
    expected = HEADER.size + count * record
    if len(data) != expected:
        raise PatchTruncatedError(
            f"payload size {len(data)} does not match declared {count} patches of {(d1, d2, d3)} "
            f"({expected} bytes)", min(len(data), expected))
    patches = []
    offset = HEADER.size
    for _ in range(count):
        (label,) = LABEL.unpack_from(data, offset)
        values = np.frombuffer(data, dtype="<f4", count=n, offset=offset + LABEL.size)
        patches.append(Patch3D(values.astype(np.float32).reshape(d1, d2, d3),
                               None if label == -1 else label))
        offset += record
    return PatchSet(tuple(patches), provenance, None if patches else (d1, d2, d3))


def write_patchset(patchset: PatchSet, path) -> None:
    data = encode_patchset(patchset)
    path = Path(path)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"failed to write patch set to {path}: {exc}") from exc


def read_patchset(path) -> PatchSet:
    path = Path(path)
    return decode_patchset(path.read_bytes(), provenance=str(path))


def psnr(original: Patch3D, distorted: Patch3D) -> float:
    """Peak signal-to-noise ratio in dB over the whole cube.

    The peak is the maximum absolute value of ``original``. Returns
    ``PSNR_INF`` when the patches are identical.
    """
    a = _as_array(original)
    b = _as_array(distorted)
    if a.shape != b.shape:
        raise ShapeError(f"psnr needs identical dims, got {a.shape} and {b.shape}")
    a = a.astype(np.float64)
    mse = float(np.mean((a - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_INF
    peak = float(np.max(np.abs(a)))
    if peak == 0.0:
        return -PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def is_valid(original: Patch3D, distorted: Patch3D,
             threshold: float = DEFAULT_PSNR_THRESHOLD) -> bool:
    if threshold <= 0:
        raise ValueError("PSNR threshold must be positive")
    return psnr(original, distorted) >= threshold


def format_psnr(value: float) -> object:
    """JSON-friendly PSNR: the infinite sentinel becomes the string ``"inf"``."""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _as_array(p) -> np.ndarray:
    return p.values if isinstance(p, Patch3D) else np.asarray(p)
