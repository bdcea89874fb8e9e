"""Bit-packed binary codes, codebooks and Hamming-space utilities.

Layout: bit ``i`` of a K-bit code lives in 64-bit word ``i // 64`` at bit
position ``i % 64`` (LSB first). A set bit stands for +1, a clear bit for -1.
Storage past bit K-1 is always zero.
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"CRHC"
CODEBOOK_VERSION = 1

# Unique sampling enumerates the whole space up to this many codes.
_ENUMERATE_LIMIT = 1 << 20


def n_words(k: int) -> int:
    return (k + 63) // 64


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# packing


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array of shape (..., K) into uint64 words of shape (..., W)."""
    bits = np.asarray(bits, dtype=bool)
    k = bits.shape[-1]
    if k < 1:
        raise ConfigError("code length must be >= 1")
    lead = bits.shape[:-1]
    w = n_words(k)
    flat = bits.reshape(-1, k)
    packed = np.packbits(flat, axis=1, bitorder="little")
    out = np.zeros((flat.shape[0], 8 * w), dtype=np.uint8)
    out[:, : packed.shape[1]] = packed
    return out.view("<u8").astype(np.uint64).reshape(*lead, w)


def unpack_bits(words: np.ndarray, k: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns a bool array of shape (..., k)."""
    words = np.asarray(words, dtype=np.uint64)
    if words.shape[-1] != n_words(k):
        raise ConfigError(f"{words.shape[-1]} words cannot hold exactly {k} bits")
    lead = words.shape[:-1]
    raw = np.ascontiguousarray(words.reshape(-1, words.shape[-1]).astype("<u8")).view(np.uint8)
    bits = np.unpackbits(raw, axis=1, count=k, bitorder="little")
    return bits.astype(bool).reshape(*lead, k)


def pack_signs(signs: np.ndarray) -> np.ndarray:
    """Pack a +-1 array (entries > 0 become set bits)."""
    return pack_bits(np.asarray(signs) > 0)


def unpack_signs(words: np.ndarray, k: int) -> np.ndarray:
    return np.where(unpack_bits(words, k), 1, -1).astype(np.int8)


def binarize(h: np.ndarray) -> np.ndarray:
    """sign() with sign(0) = +1, packed."""
    return pack_bits(np.asarray(h) >= 0)


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words).sum(axis=-1, dtype=np.int64)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between packed rows of ``a`` (n, W) and ``b`` (m, W)."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape[-1] != b.shape[-1]:
        raise ConfigError("packed width mismatch")
    return popcount(a[:, None, :] ^ b[None, :, :])


def slice_packed(words: np.ndarray, k: int, start: int, stop: int) -> np.ndarray:
    """Bits [start, stop) of every packed row, repacked."""
    return pack_bits(unpack_bits(words, k)[..., start:stop])


# ---------------------------------------------------------------------------
# value types


class BinaryCode:
    """An immutable K-bit code over {-1, +1}."""

    __slots__ = ("words", "length")

    def __init__(self, words, length: int):
        length = int(length)
        if length < 1:
            raise ConfigError("code length must be >= 1")
        arr = np.array(words, dtype=np.uint64).reshape(-1)
        if arr.shape[0] != n_words(length):
            raise ConfigError(f"expected {n_words(length)} words for {length} bits, got {arr.shape[0]}")
        tail = length % 64
        if tail:
            arr[-1] &= np.uint64((1 << tail) - 1)
        arr.setflags(write=False)
        object.__setattr__(self, "words", arr)
        object.__setattr__(self, "length", length)

    def __setattr__(self, name, value):
        raise AttributeError("BinaryCode is immutable")

    @classmethod
    def from_signs(cls, signs) -> BinaryCode:
        signs = np.asarray(signs).reshape(-1)
        if not np.isin(signs, (-1, 1)).all():
            raise ConfigError("signs must be -1 or +1")
        return cls(pack_signs(signs), signs.shape[0])

    @classmethod
    def from_bits(cls, bits) -> BinaryCode:
        bits = np.asarray(bits, dtype=bool).reshape(-1)
        return cls(pack_bits(bits), bits.shape[0])

    @classmethod
    def from_bitstring(cls, text: str) -> BinaryCode:
        if not text or set(text) - {"0", "1"}:
            raise ConfigError(f"not a bit string: {text!r}")
        return cls.from_bits([c == "1" for c in text])

    def to_bits(self) -> np.ndarray:
        return unpack_bits(self.words, self.length)

    def to_signs(self) -> np.ndarray:
        return unpack_signs(self.words, self.length)

    def bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.to_bits())

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryCode):
            return NotImplemented
        return self.length == other.length and bool(np.array_equal(self.words, other.words))

    def __hash__(self) -> int:
        return hash((self.length, self.words.tobytes()))

    def __repr__(self) -> str:
        s = self.bitstring()
        if len(s) > 32:
            s = s[:29] + "..."
        return f"BinaryCode({s!r}, K={self.length})"


@dataclass(frozen=True)
class HeadLayout:
    """Partition of K bits into H contiguous heads of d bits each."""

    H: int
    d: int

    def __post_init__(self):
        if self.H < 1 or self.d < 1:
            raise ConfigError(f"invalid head layout H={self.H}, d={self.d}")

    @property
    def K(self) -> int:
        return self.H * self.d

    @classmethod
    def for_bits(cls, k: int, heads: int | None = None, head_bits: int | None = None) -> HeadLayout:
        if heads is None and head_bits is None:
            heads = 1
        if heads is not None:
            if heads < 1 or k % heads:
                raise ConfigError(f"H={heads} does not divide K={k}")
            layout = cls(heads, k // heads)
        else:
            if head_bits < 1 or k % head_bits:
                raise ConfigError(f"d={head_bits} does not divide K={k}")
            layout = cls(k // head_bits, head_bits)
        if head_bits is not None and layout.d != head_bits:
            raise ConfigError(f"H={heads} and d={head_bits} disagree with K={k}")
        return layout

    def bounds(self, h: int) -> tuple[int, int]:
        if not 0 <= h < self.H:
            raise ConfigError(f"head index {h} out of range for H={self.H}")
        return h * self.d, (h + 1) * self.d

    def check_strict(self, m: int) -> None:
        """Raise when H exceeds the collision-free bound for an M-entry codebook."""
        if m >= 2 and self.H > max_heads(self.K, m):
            raise ConfigError(
                f"H={self.H} exceeds max_heads(K={self.K}, M={m})={max_heads(self.K, m)}"
            )


class Codebook:
    """M candidate codes of K bits, stored packed as an (M, W) uint64 array."""

    def __init__(self, words: np.ndarray, k: int):
        words = np.array(words, dtype=np.uint64)
        if words.ndim != 2 or words.shape[1] != n_words(k):
            raise ConfigError(f"codebook words must have shape (M, {n_words(k)})")
        if words.shape[0] < 1:
            raise ConfigError("codebook must hold at least one code")
        words.setflags(write=False)
        self.words = words
        self.K = int(k)

    @classmethod
    def from_signs(cls, signs) -> Codebook:
        signs = np.asarray(signs)
        return cls(pack_signs(signs), signs.shape[1])

    @classmethod
    def from_codes(cls, codes: Sequence[BinaryCode]) -> Codebook:
        k = codes[0].length
        if any(c.length != k for c in codes):
            raise ConfigError("all codebook entries must share one length")
        return cls(np.stack([c.words for c in codes]), k)

    @property
    def M(self) -> int:
        return self.words.shape[0]

    def __len__(self) -> int:
        return self.M

    def __getitem__(self, i: int) -> BinaryCode:
        return BinaryCode(self.words[i], self.K)

    def __iter__(self):
        return (self[i] for i in range(self.M))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Codebook):
            return NotImplemented
        return self.K == other.K and bool(np.array_equal(self.words, other.words))

    def signs(self) -> np.ndarray:
        return unpack_signs(self.words, self.K)

    def head_words(self, layout: HeadLayout, h: int) -> np.ndarray:
        """Packed d-bit slices of every entry for head ``h``."""
        if layout.K != self.K:
            raise ConfigError(f"layout covers {layout.K} bits, codebook has {self.K}")
        start, stop = layout.bounds(h)
        return slice_packed(self.words, self.K, start, stop)

    def duplicate_groups(self) -> list[list[int]]:
        """Index groups of identical entries (only groups of size >= 2)."""
        return _duplicate_groups(self.words)

    def is_distinct(self) -> bool:
        return not self.duplicate_groups()


def _duplicate_groups(words: np.ndarray) -> list[list[int]]:
    _, inverse, counts = np.unique(words, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    groups = []
    for g in np.flatnonzero(counts > 1):
        groups.append(np.flatnonzero(inverse == g).tolist())
    groups.sort()
    return groups


def unique_rows(words: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct packed rows in order of first appearance.

    Returns ``(distinct, first_index, inverse)`` where ``distinct[j]`` equals
    ``words[first_index[j]]`` and ``words[i] == distinct[inverse[i]]``.
    """
    _, first, inverse = np.unique(words, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.shape[0])
    first = first[order]
    return words[first], first, rank[inverse]


# ---------------------------------------------------------------------------
# operations


def _check_same_length(a: BinaryCode, b: BinaryCode) -> None:
    if a.length != b.length:
        raise ConfigError(f"code length mismatch: {a.length} vs {b.length}")


def hamming_distance(a: BinaryCode, b: BinaryCode) -> int:
    _check_same_length(a, b)
    return int(popcount(a.words ^ b.words))


def sq_euclidean(a: BinaryCode, b: BinaryCode) -> int:
    """Squared Euclidean distance of the +-1 vectors; always 4 * Hamming."""
    return 4 * hamming_distance(a, b)


def _check_sizes(k: int, m: int) -> None:
    if int(k) < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    if int(m) < 1:
        raise ConfigError(f"M must be >= 1, got {m}")


def sample_codebook_bernoulli(k: int, m: int, seed=None) -> Codebook:
    """Every bit i.i.d. +-1 with probability 1/2.

    Duplicates are possible for small K; they are logged and can be listed with
    :meth:`Codebook.duplicate_groups`.
    """
    _check_sizes(k, m)
    rng = as_rng(seed)
    bits = rng.integers(0, 2, size=(m, k), dtype=np.uint8).astype(bool)
    cb = Codebook(pack_bits(bits), k)
    dups = cb.duplicate_groups()
    if dups:
        log.warning("bernoulli codebook (K=%d, M=%d) has %d duplicate groups", k, m, len(dups))
    return cb


def sample_codebook_unique(k: int, m: int, seed=None) -> Codebook:
    """M pairwise-distinct codes drawn uniformly without replacement from {-1,+1}^K."""
    _check_sizes(k, m)
    if k < 64 and m > (1 << k):
        raise ConfigError(f"cannot draw {m} distinct codes from a {k}-bit space ({1 << k} codes)")
    rng = as_rng(seed)
    if k <= 20 and (1 << k) <= _ENUMERATE_LIMIT:
        idx = rng.permutation(1 << k)[:m]
        bits = ((idx[:, None] >> np.arange(k)) & 1).astype(bool)
        return Codebook(pack_bits(bits), k)
    seen: set[bytes] = set()
    rows: list[np.ndarray] = []
    while len(rows) < m:
        draw = pack_bits(rng.integers(0, 2, size=(m - len(rows), k), dtype=np.uint8).astype(bool))
        for row in draw:
            key = row.tobytes()
            if key not in seen:
                seen.add(key)
                rows.append(row)
    return Codebook(np.stack(rows), k)


def sample_codebook(k: int, m: int, method: str = "unique", seed=None) -> Codebook:
    if method == "unique":
        return sample_codebook_unique(k, m, seed)
    if method == "bernoulli":
        return sample_codebook_bernoulli(k, m, seed)
    raise ConfigError(f"unknown codebook sampling {method!r}")


def head_slice(code: BinaryCode, layout: HeadLayout, h: int) -> BinaryCode:
    if layout.K != code.length:
        raise ConfigError(f"layout covers {layout.K} bits, code has {code.length}")
    start, stop = layout.bounds(h)
    return BinaryCode(slice_packed(code.words, code.length, start, stop), layout.d)


def concat_heads(parts: Sequence[BinaryCode]) -> BinaryCode:
    if not parts:
        raise ConfigError("need at least one head part")
    d = parts[0].length
    if any(p.length != d for p in parts):
        raise ConfigError("all head parts must have the same length")
    bits = np.concatenate([p.to_bits() for p in parts])
    return BinaryCode.from_bits(bits)


def max_heads(k: int, m: int) -> int:
    """Largest H for which d = K/H bits can still index M distinct sub-codes."""
    if m < 2:
        raise ConfigError(f"max_heads needs M >= 2, got {m}")
    bits_needed = (int(m) - 1).bit_length()  # ceil(log2 M)
    return int(k) // bits_needed


@dataclass(frozen=True)
class DistanceStats:
    """Minimum and mean pairwise Hamming distance; the mean is kept exact."""

    d_min: int
    total: int
    pairs: int

    @property
    def d_avg(self) -> Fraction:
        return Fraction(self.total, self.pairs)

    @property
    def d_avg_float(self) -> float:
        return self.total / self.pairs

    def as_dict(self) -> dict:
        return {"d_min": self.d_min, "d_avg": self.d_avg_float,
                "d_avg_exact": [self.total, self.pairs]}


def _to_packed(codes) -> np.ndarray:
    if isinstance(codes, Codebook):
        return codes.words
    if isinstance(codes, np.ndarray):
        return pack_signs(codes)
    codes = list(codes)
    if codes and isinstance(codes[0], BinaryCode):
        k = codes[0].length
        if any(c.length != k for c in codes):
            raise ConfigError("all codes must share one length")
        return np.stack([c.words for c in codes])
    return pack_signs(np.asarray(codes))


def codebook_distance_stats(centers: Iterable[BinaryCode] | np.ndarray) -> DistanceStats:
    """d_min and d_avg over all unordered pairs of centers.

    ``centers`` may be a sequence of :class:`BinaryCode`, a :class:`Codebook`,
    or a (C, K) array of +-1 entries.
    """
    words = _to_packed(centers)
    c = words.shape[0]
    if c < 2:
        raise ConfigError(f"distance statistics need at least 2 centers, got {c}")
    dist = hamming_matrix(words, words)
    iu = np.triu_indices(c, k=1)
    upper = dist[iu]
    return DistanceStats(int(upper.min()), int(upper.sum()), int(upper.shape[0]))


# ---------------------------------------------------------------------------
# CRHC file format

_CRHC_HEADER = struct.Struct("<4sIII")


def codebook_to_bytes(cb: Codebook) -> bytes:
    nbytes = (cb.K + 7) // 8
    raw = np.ascontiguousarray(cb.words.astype("<u8")).view(np.uint8)[:, :nbytes]
    return _CRHC_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, cb.K, cb.M) + raw.tobytes()


def codebook_from_bytes(data: bytes) -> Codebook:
    if len(data) < _CRHC_HEADER.size:
        raise DataFormatError(
            f"codebook header truncated: expected {_CRHC_HEADER.size} bytes, got {len(data)}", 0)
    magic, version, k, m = _CRHC_HEADER.unpack_from(data)
    if magic != CODEBOOK_MAGIC:
        raise DataFormatError(f"bad codebook magic {magic!r}", 0)
    if version != CODEBOOK_VERSION:
        raise DataFormatError(f"unsupported codebook version {version}", 4)
    if k < 1 or m < 1:
        raise DataFormatError(f"invalid codebook sizes K={k}, M={m}", 8)
    nbytes = (k + 7) // 8
    expected = _CRHC_HEADER.size + m * nbytes
    if len(data) != expected:
        raise DataFormatError(
            f"codebook length mismatch: expected {expected} bytes, got {len(data)}",
            min(len(data), expected))
    recs = np.frombuffer(data, dtype=np.uint8, offset=_CRHC_HEADER.size).reshape(m, nbytes)
    tail = k % 8
    if tail:
        bad = np.flatnonzero(recs[:, -1] >> tail)
        if bad.size:
            raise DataFormatError(
                f"nonzero padding bits in codebook record {bad[0]}",
                _CRHC_HEADER.size + int(bad[0]) * nbytes + nbytes - 1)
    padded = np.zeros((m, 8 * n_words(k)), dtype=np.uint8)
    padded[:, :nbytes] = recs
    return Codebook(padded.view("<u8").astype(np.uint64), k)


def write_codebook(cb: Codebook, path) -> None:
    Path(path).write_bytes(codebook_to_bytes(cb))


def read_codebook(path) -> Codebook:
    return codebook_from_bytes(Path(path).read_bytes())
