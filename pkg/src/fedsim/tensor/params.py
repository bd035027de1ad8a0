"""Named, ordered parameter segments flattened into one vector.

``ParamVector`` is the currency exchanged between clients and the server:
model weights, deltas and gradients all share the same layout.

Binary layout (all integers and reals little-endian)::

    b"FSPV" | u32 version=1 | u32 segment count
    per segment: u16 name length | utf-8 name | u8 ndim | u32 dim * ndim
    then every segment's values as f8, in segment order
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Iterator, Mapping

import numpy as np

from fedsim.errors import FormatError, StructuralError
from fedsim.tensor.engine import Tensor

MAGIC = b"FSPV"
VERSION = 1


class ParamVector:
    __slots__ = ("_segments",)

    def __init__(self, segments: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = segments.items() if isinstance(segments, Mapping) else segments
        self._segments: dict[str, np.ndarray] = {}
        for name, value in items:
            if name in self._segments:
                raise StructuralError(f"duplicate segment name {name!r}")
            arr = np.array(value, dtype=np.float64, copy=True)
            if arr.ndim == 0 or any(n < 1 for n in arr.shape):
                raise StructuralError(f"segment {name!r} needs a positive shape, got {arr.shape}")
            self._segments[name] = arr

    # structure
    @property
    def names(self) -> list[str]:
        return list(self._segments)

    @property
    def structure(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((n, a.shape) for n, a in self._segments.items())

    @property
    def size(self) -> int:
        return sum(a.size for a in self._segments.values())

    @property
    def nbytes(self) -> int:
        return 8 * self.size

    def __len__(self) -> int:
        return len(self._segments)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._segments.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._segments[name]

    def __repr__(self) -> str:
        shapes = ", ".join(f"{n}{list(s)}" for n, s in self.structure)
        return f"ParamVector({shapes})"

    def congruent(self, other: "ParamVector") -> bool:
        return self.structure == other.structure

    def check_congruent(self, other: "ParamVector", what: str = "ParamVector") -> None:
        if not self.congruent(other):
            raise StructuralError(f"{what} structure mismatch: {self.structure} vs {other.structure}")

    # flat view
    def flatten(self) -> np.ndarray:
        if not self._segments:
            return np.zeros(0)
        return np.concatenate([a.reshape(-1) for a in self._segments.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamVector":
        """A vector with this structure holding the values of ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise StructuralError(f"flat vector of shape {flat.shape} does not fit structure of size {self.size}")
        out = ParamVector()
        offset = 0
        for name, arr in self._segments.items():
            out._segments[name] = flat[offset : offset + arr.size].reshape(arr.shape).copy()
            offset += arr.size
        return out

    def copy(self) -> "ParamVector":
        return self.unflatten(self.flatten())

    def zeros_like(self) -> "ParamVector":
        return self.unflatten(np.zeros(self.size))

    # arithmetic (returns new vectors)
    def _binary(self, other: "ParamVector", op) -> "ParamVector":
        self.check_congruent(other)
        return self.unflatten(op(self.flatten(), other.flatten()))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return self._binary(other, np.add)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return self._binary(other, np.subtract)

    def __mul__(self, scalar: float) -> "ParamVector":
        return self.unflatten(self.flatten() * float(scalar))

    __rmul__ = __mul__

    def equals(self, other: "ParamVector") -> bool:
        """Bit-exact equality of structure and values."""
        return self.congruent(other) and self.flatten().tobytes() == other.flatten().tobytes()

    # autodiff bridge
    def leaves(self) -> dict[str, Tensor]:
        return {name: Tensor(arr.copy(), requires_grad=True) for name, arr in self._segments.items()}

    def gradient_from(self, leaves: Mapping[str, Tensor]) -> "ParamVector":
        """Collect ``leaf.grad`` for each segment (zero where no gradient flowed)."""
        return ParamVector(
            (name, leaves[name].grad if leaves[name].grad is not None else np.zeros_like(arr))
            for name, arr in self._segments.items()
        )

    # wire format
    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self._segments))]
        for name, arr in self._segments.items():
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(self.flatten().astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamVector":
        vector, end = cls.read_from(blob, 0)
        if end != len(blob):
            raise FormatError(f"{len(blob) - end} trailing bytes after ParamVector at offset {end}")
        return vector

    @classmethod
    def read_from(cls, blob: bytes, offset: int) -> tuple["ParamVector", int]:
        """Parse one vector starting at ``offset``; returns it and the end offset."""

        def take(n: int) -> bytes:
            nonlocal offset
            if offset + n > len(blob):
                raise FormatError(f"truncated ParamVector: need {n} bytes at offset {offset}, have {len(blob) - offset}")
            chunk = blob[offset : offset + n]
            offset += n
            return chunk

        if take(4) != MAGIC:
            raise FormatError(f"bad ParamVector magic at offset {offset - 4}")
        version, count = struct.unpack("<II", take(8))
        if version != VERSION:
            raise FormatError(f"unsupported ParamVector version {version}")
        table = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = take(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            table.append((name, shape))
        total = sum(int(np.prod(s)) for _, s in table)
        flat = np.frombuffer(take(8 * total), dtype="<f8").astype(np.float64)
        template = ParamVector((n, np.zeros(s)) for n, s in table)
        return template.unflatten(flat), offset

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


Gradient = ParamVector


def sgd_step(params: ParamVector, grads: ParamVector, lr: float) -> ParamVector:
    """Plain gradient descent step ``params - lr * grads``."""
    params.check_congruent(grads, "gradient")
    if lr == 0:
        return params.copy()
    return params.unflatten(params.flatten() - lr * grads.flatten())
