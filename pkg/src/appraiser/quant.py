"""Bit-exact int8 tensors and the bit-level primitives built on them.

All bit operations use two's-complement semantics on the stored 8-bit value.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AddressError, ComparisonError

INT8_MIN, INT8_MAX = -128, 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


@dataclass(frozen=True)
class BitAddress:
    flat_index: int
    bit_pos: int

    def to_list(self) -> list[int]:
        return [int(self.flat_index), int(self.bit_pos)]


@dataclass(frozen=True, eq=False)
class QuantTensor:
    """Immutable shaped container of int8 values.

    ``data`` is stored flat in row-major order. ``scale_shift`` is metadata
    only (real value = stored * 2**-scale_shift); arithmetic never uses it.
    """

    shape: tuple[int, ...]
    data: np.ndarray = field(repr=False)
    scale_shift: int = 0

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if any(d <= 0 for d in shape):
            raise ValueError(f"shape dimensions must be positive, got {shape}")
        raw = np.asarray(self.data)
        if raw.dtype != np.int8:
            if raw.size and (raw.min() < INT8_MIN or raw.max() > INT8_MAX):
                raise ValueError("tensor values outside int8 range")
            raw = raw.astype(np.int8)
        flat = np.array(raw.reshape(-1), dtype=np.int8, copy=True)
        if flat.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(
                f"data length {flat.size} does not match shape {shape}"
            )
        if self.scale_shift < 0:
            raise ValueError("scale_shift must be non-negative")
        flat.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", flat)

    @classmethod
    def from_array(cls, array, scale_shift: int = 0) -> "QuantTensor":
        array = np.asarray(array)
        return cls(array.shape, array, scale_shift)

    @property
    def size(self) -> int:
        return self.data.size

    def array(self) -> np.ndarray:
        """Read-only view with the tensor's shape."""
        return self.data.reshape(self.shape)

    def checksum(self) -> str:
        return hashlib.sha256(self.data.tobytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.scale_shift == other.scale_shift
            and np.array_equal(self.data, other.data)
        )

    def __hash__(self):
        return hash((self.shape, self.scale_shift, self.data.tobytes()))


def truncate_requantize(acc, shift: int):
    """Arithmetic right shift of a 32-bit accumulator, saturated to int8.

    Works on Python ints and on integer numpy arrays. Accumulators wider
    than 32 bits wrap to int32 first, as a 32-bit register would.
    """
    if not 0 <= shift <= 31:
        raise ValueError(f"shift must be in [0, 31], got {shift}")
    if isinstance(acc, np.ndarray):
        shifted = acc.astype(np.int32) >> np.int32(shift)
        return np.clip(shifted, INT8_MIN, INT8_MAX).astype(np.int8)
    acc = (int(acc) - INT32_MIN) % 2**32 + INT32_MIN
    return max(INT8_MIN, min(INT8_MAX, acc >> shift))


def check_address(t: QuantTensor, addr: BitAddress) -> None:
    if not 0 <= addr.flat_index < t.size:
        raise AddressError(
            f"flat_index {addr.flat_index} out of range for {t.size} elements"
        )
    if not 0 <= addr.bit_pos <= 7:
        raise AddressError(f"bit_pos {addr.bit_pos} outside [0, 7]")


def flip_bits(t: QuantTensor, addrs: Sequence[BitAddress]) -> QuantTensor:
    for addr in addrs:
        check_address(t, addr)
    raw = t.data.view(np.uint8).copy()
    for addr in addrs:
        raw[addr.flat_index] ^= np.uint8(1 << addr.bit_pos)
    return QuantTensor(t.shape, raw.view(np.int8), t.scale_shift)


def flip_bit(t: QuantTensor, addr: BitAddress) -> QuantTensor:
    """Return a copy of ``t`` with one bit inverted."""
    return flip_bits(t, [addr])


def count_bit_mismatches(a: QuantTensor, b: QuantTensor) -> tuple[int, int]:
    """Return ``(mismatched_bits, total_bits)`` between two same-shape tensors."""
    if a.shape != b.shape:
        raise ComparisonError(f"shape mismatch: {a.shape} vs {b.shape}")
    return mismatched_bits(a.data, b.data), 8 * a.size


def mismatched_bits(a: np.ndarray, b: np.ndarray) -> int:
    """Popcount of ``a XOR b`` over int8 arrays of equal shape."""
    diff = np.bitwise_xor(a.view(np.uint8), b.view(np.uint8))
    return int(np.bitwise_count(diff).sum(dtype=np.int64))
