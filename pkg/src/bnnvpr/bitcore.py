"""Bit-packed ±1 tensors and the XNOR-popcount kernels built on them.

Encoding: bit 1 means +1, bit 0 means -1. Bits are stored LSB-first inside
64-bit words and every bit past ``valid_bits`` is zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence

import numpy as np

WORD_BITS = 64
WORD_DTYPE = np.dtype("<u8")


class EncodingError(ValueError):
    """A value that should be exactly +1 or -1 was something else."""


class DimensionError(ValueError):
    """Operand shapes or lengths do not agree."""


def n_words(n_bits: int) -> int:
    return -(-n_bits // WORD_BITS)


@dataclass(frozen=True, eq=False)
class BitTensor:
    logical_shape: tuple[int, ...]
    words: np.ndarray
    valid_bits: int

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.logical_shape)
        object.__setattr__(self, "logical_shape", shape)
        if self.valid_bits != prod(shape):
            raise DimensionError(
                f"valid_bits={self.valid_bits} does not match shape {shape}"
            )
        words = np.array(self.words, dtype=WORD_DTYPE).reshape(-1)
        if words.size != n_words(self.valid_bits):
            raise DimensionError(
                f"expected {n_words(self.valid_bits)} words, got {words.size}"
            )
        tail = self.valid_bits % WORD_BITS
        if tail:
            # padding is never meaningful; clear whatever the caller passed in
            words[-1] &= np.uint64((1 << tail) - 1)
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitTensor):
            return NotImplemented
        return (
            self.logical_shape == other.logical_shape
            and self.valid_bits == other.valid_bits
            and np.array_equal(self.words, other.words)
        )

    def __hash__(self) -> int:
        return hash((self.logical_shape, self.words.tobytes()))

    @property
    def nbytes(self) -> int:
        return self.words.size * WORD_DTYPE.itemsize

    def to_bytes(self) -> bytes:
        return self.words.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, logical_shape: Sequence[int]) -> BitTensor:
        shape = tuple(logical_shape)
        return cls(shape, np.frombuffer(data, dtype=WORD_DTYPE).copy(), prod(shape))

    def bits(self) -> np.ndarray:
        """Flat uint8 array of 0/1 bits, length ``valid_bits``."""
        raw = np.unpackbits(self.words.view(np.uint8), bitorder="little")
        return raw[: self.valid_bits]

    def complement(self) -> BitTensor:
        return pack_bits(1 - self.bits(), self.logical_shape)


def pack_bits(bits: np.ndarray, logical_shape: Sequence[int] | None = None) -> BitTensor:
    """Pack a 0/1 array (flattened in C order) into a BitTensor."""
    bits = np.asarray(bits, dtype=np.uint8)
    shape = tuple(bits.shape) if logical_shape is None else tuple(logical_shape)
    flat = bits.reshape(-1)
    n = flat.size
    padded = np.zeros(n_words(n) * WORD_BITS, dtype=np.uint8)
    padded[:n] = flat
    words = np.packbits(padded, bitorder="little").view(WORD_DTYPE)
    return BitTensor(shape, words, n)


def pack(values: Sequence[float] | np.ndarray) -> BitTensor:
    """Pack a tensor of ±1 values; the array shape becomes the logical shape."""
    arr = np.asarray(values, dtype=np.float64)
    pos = arr == 1.0
    if not np.all(pos | (arr == -1.0)):
        bad = arr[~(pos | (arr == -1.0))].ravel()[0]
        raise EncodingError(f"value {bad!r} is not +1 or -1")
    return pack_bits(pos.astype(np.uint8), arr.shape)


def unpack(t: BitTensor) -> np.ndarray:
    """Return the ±1 values of ``t`` as float32, reshaped to its logical shape."""
    signs = t.bits().astype(np.float32) * 2.0 - 1.0
    return signs.reshape(t.logical_shape)


def xnor_dot(a: BitTensor, w: BitTensor) -> int:
    """±1 dot product of two packed vectors via XNOR and popcount."""
    n = a.valid_bits
    if w.valid_bits != n:
        raise DimensionError(f"length mismatch: {n} vs {w.valid_bits}")
    agree = np.bitwise_count(~(a.words ^ w.words)).sum()
    # xnor turns the zero padding into ones; discount them
    matches = int(agree) - (a.words.size * WORD_BITS - n)
    return 2 * matches - n


def real_binary_dot(x: Sequence[float] | np.ndarray, w: BitTensor) -> float:
    """Dot product of real values with packed signs using only adds and subtracts."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != w.valid_bits:
        raise DimensionError(f"length mismatch: {x.size} vs {w.valid_bits}")
    positive = w.bits().astype(bool)
    return float(x[positive].sum() - x[~positive].sum())


def pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack each row of a 2-D 0/1 array into LSB-first uint64 words.

    Returns an array of shape ``(rows, n_words(cols))`` with zero padding.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    rows, cols = bits.shape
    width = n_words(cols) * WORD_BITS
    if width != cols:
        bits = np.concatenate([bits, np.zeros((rows, width - cols), np.uint8)], axis=1)
    packed = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view(WORD_DTYPE)


def xnor_matmul(
    a_words: np.ndarray, w_words: np.ndarray, n: int, block_elems: int = 1 << 22
) -> np.ndarray:
    """All-pairs ±1 dot products between packed rows.

    ``a_words`` is ``(P, words)`` and ``w_words`` is ``(Q, words)``, both packed
    from ``n`` valid bits with zero padding. The result is the ``(P, Q)``
    integer matrix ``n - 2 * popcount(a ^ w)``, which equals
    ``2 * popcount(xnor(a, w)) - n`` because padding bits cancel in the XOR.
    """
    if a_words.shape[1] != w_words.shape[1]:
        raise DimensionError("packed operands have different word counts")
    out = np.empty((a_words.shape[0], w_words.shape[0]), dtype=np.int64)
    if a_words.shape[0] < 32:
        # few rows (dense layers): one broadcast XOR per row block
        step = max(1, block_elems // max(1, w_words.size))
        for start in range(0, a_words.shape[0], step):
            block = a_words[start : start + step, None, :] ^ w_words[None, :, :]
            out[start : start + step] = n - 2 * np.bitwise_count(block).sum(axis=2, dtype=np.int64)
        return out
    # many rows (convolutions): one word column at a time keeps the working set at P x Q
    a_cols = np.ascontiguousarray(a_words.T)
    w_cols = np.ascontiguousarray(w_words.T)
    step = max(1, block_elems // max(1, w_words.shape[0]))
    for start in range(0, a_words.shape[0], step):
        stop = min(start + step, a_words.shape[0])
        xor = np.empty((stop - start, w_words.shape[0]), dtype=WORD_DTYPE)
        mismatches = np.zeros(xor.shape, dtype=np.int32)
        for a_col, w_col in zip(a_cols[:, start:stop], w_cols):
            np.bitwise_xor(a_col[:, None], w_col[None, :], out=xor)
            mismatches += np.bitwise_count(xor)
        out[start:stop] = n - 2 * mismatches.astype(np.int64)
    return out
