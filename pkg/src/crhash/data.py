"""Feature datasets, embedding files and the synthetic hierarchical generator.

CRHF layout (little-endian)::

    b"CRHF" | u32 version=1 | u64 N | u32 D | u32 C | u8 flags (bit0 single_label)
    N records: D float32, then ceil(C/8) label bytes (bit c of byte c//8 = class c)

CRHE layout::

    b"CRHE" | u32 version=1 | u64 N | u32 E | N*E float32
"""

from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .evaluation import cosine_similarity_matrix

FEATURE_MAGIC = b"CRHF"
EMBED_MAGIC = b"CRHE"
VERSION = 1

_FEATURE_HEADER = struct.Struct("<4sIQIIB")
_EMBED_HEADER = struct.Struct("<4sIQI")


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # (N, D) float32
    labels: np.ndarray  # (N, C) bool
    single_label: bool = False

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float32)
        y = np.ascontiguousarray(self.labels, dtype=bool)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DataFormatError(f"features {x.shape} and labels {y.shape} do not align")
        if not np.isfinite(x).all():
            raise DataFormatError(f"sample {int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])} "
                                  "has a non-finite feature")
        card = y.sum(axis=1)
        if (card == 0).any():
            raise DataFormatError(f"sample {int(np.flatnonzero(card == 0)[0])} has no label")
        if self.single_label and (card != 1).any():
            raise DataFormatError(f"sample {int(np.flatnonzero(card != 1)[0])} is multi-label "
                                  "in a single-label dataset")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    @property
    def C(self) -> int:
        return self.labels.shape[1]

    def label_counts(self) -> np.ndarray:
        return self.labels.sum(axis=1)

    def empty_classes(self) -> list[int]:
        return np.flatnonzero(~self.labels.any(axis=0)).tolist()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.single_label == other.single_label
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


def _record_dtype(d: int, c: int) -> np.dtype:
    return np.dtype([("x", "<f4", (d,)), ("y", "u1", ((c + 7) // 8,))])


def dataset_to_bytes(ds: Dataset) -> bytes:
    rec = np.zeros(ds.N, dtype=_record_dtype(ds.D, ds.C))
    rec["x"] = ds.features
    rec["y"] = np.packbits(ds.labels, axis=1, bitorder="little").reshape(ds.N, -1)
    head = _FEATURE_HEADER.pack(FEATURE_MAGIC, VERSION, ds.N, ds.D, ds.C, int(ds.single_label))
    return head + rec.tobytes()


def dataset_from_bytes(data: bytes) -> Dataset:
    hs = _FEATURE_HEADER.size
    if len(data) < hs:
        raise DataFormatError(f"truncated header: expected {hs} bytes, got {len(data)}", len(data))
    magic, version, n, d, c, flags = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    if version != VERSION:
        raise DataFormatError(f"unsupported version {version}", 4)
    if d < 1 or c < 1:
        raise DataFormatError(f"invalid dimensions D={d}, C={c}", 16)
    if flags & ~1:
        raise DataFormatError(f"unknown flag bits {flags:#x}", 24)
    dt = _record_dtype(d, c)
    expected = hs + n * dt.itemsize
    if len(data) != expected:
        raise DataFormatError(f"file length mismatch: expected {expected} bytes, got {len(data)}",
                              min(len(data), expected))
    rec = np.frombuffer(data, dtype=dt, count=n, offset=hs)
    labels = np.unpackbits(rec["y"].reshape(n, -1), axis=1, bitorder="little")
    if labels.shape[1] > c:
        bad = np.flatnonzero(labels[:, c:].any(axis=1))
        if bad.size:
            i = int(bad[0])
            raise DataFormatError(f"record {i} has a label index >= C={c}",
                                  hs + i * dt.itemsize + 4 * d)
    labels = labels[:, :c].astype(bool)
    empty = np.flatnonzero(~labels.any(axis=1))
    if empty.size:
        i = int(empty[0])
        raise DataFormatError(f"record {i} has no label", hs + i * dt.itemsize + 4 * d)
    single = bool(flags & 1)
    if single:
        multi = np.flatnonzero(labels.sum(axis=1) != 1)
        if multi.size:
            i = int(multi[0])
            raise DataFormatError(f"record {i} is multi-label but the single-label flag is set",
                                  hs + i * dt.itemsize + 4 * d)
    return Dataset(rec["x"].copy(), labels, single)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def embeddings_to_bytes(emb: np.ndarray) -> bytes:
    emb = np.asarray(emb, dtype="<f4")
    if emb.ndim != 2:
        raise ConfigError("embeddings must be an (N, E) array")
    return _EMBED_HEADER.pack(EMBED_MAGIC, VERSION, emb.shape[0], emb.shape[1]) + emb.tobytes()


def embeddings_from_bytes(data: bytes, expected_n: int | None = None) -> np.ndarray:
    hs = _EMBED_HEADER.size
    if len(data) < hs:
        raise DataFormatError(f"truncated header: expected {hs} bytes, got {len(data)}", len(data))
    magic, version, n, e = _EMBED_HEADER.unpack_from(data)
    if magic != EMBED_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {EMBED_MAGIC!r}", 0)
    if version != VERSION:
        raise DataFormatError(f"unsupported version {version}", 4)
    if e < 1:
        raise DataFormatError("embedding dimension must be >= 1", 16)
    expected = hs + 4 * n * e
    if len(data) != expected:
        raise DataFormatError(f"file length mismatch: expected {expected} bytes, got {len(data)}",
                              min(len(data), expected))
    if expected_n is not None and n != expected_n:
        raise DataFormatError(f"embedding file has {n} records, dataset has {expected_n}", 8)
    return np.frombuffer(data, dtype="<f4", count=n * e, offset=hs).reshape(n, e).astype(np.float32)


def write_embeddings(emb: np.ndarray, path) -> None:
    Path(path).write_bytes(embeddings_to_bytes(emb))


def read_embeddings(path, expected_n: int | None = None) -> np.ndarray:
    return embeddings_from_bytes(Path(path).read_bytes(), expected_n)


def import_csv(path, num_classes: int | None = None, single_label: bool | None = None) -> Dataset:
    """Feature columns followed by one column of ';'-separated label indices.

    A header row is skipped when its first cell is not numeric.
    """
    rows, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                feats = [float(v) for v in row[:-1]]
            except ValueError:
                if lineno == 1:
                    continue
                raise DataFormatError(f"line {lineno}: non-numeric feature") from None
            try:
                idx = [int(t) for t in row[-1].split(";") if t.strip()]
            except ValueError:
                raise DataFormatError(f"line {lineno}: bad label list {row[-1]!r}") from None
            if not idx:
                raise DataFormatError(f"line {lineno}: sample has no label")
            if min(idx) < 0:
                raise DataFormatError(f"line {lineno}: negative label index")
            if rows and len(feats) != len(rows[0]):
                raise DataFormatError(f"line {lineno}: expected {len(rows[0])} features, got {len(feats)}")
            rows.append(feats)
            labels.append(idx)
    if not rows:
        raise DataFormatError("CSV contains no samples")
    c = max(max(i) for i in labels) + 1
    if num_classes is not None:
        if c > num_classes:
            raise DataFormatError(f"label index {c - 1} out of range for C={num_classes}")
        c = num_classes
    y = np.zeros((len(rows), c), dtype=bool)
    for r, idx in enumerate(labels):
        y[r, idx] = True
    if single_label is None:
        single_label = bool((y.sum(axis=1) == 1).all())
    return Dataset(np.array(rows, dtype=np.float32), y, single_label)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    C: int = 16
    G: int = 4
    D: int = 32
    per_class: int = 100
    sigma_super: float = 4.0
    sigma_class: float = 1.0
    sigma_noise: float = 0.5
    rho: float = 0.0
    seed: int = 0
    queries_per_class: int = 0

    def __post_init__(self):
        if self.C < 1 or self.G < 1 or self.G > self.C:
            raise ConfigError(f"need 1 <= G <= C, got G={self.G}, C={self.C}")
        if self.D < 1 or self.per_class < 1:
            raise ConfigError("D and per_class must be >= 1")
        if self.queries_per_class < 0:
            raise ConfigError("queries_per_class must be >= 0")
        if min(self.sigma_super, self.sigma_class, self.sigma_noise) < 0:
            raise ConfigError("standard deviations must be >= 0")
        if not 0 <= self.rho < 1:
            raise ConfigError(f"rho must be in [0, 1), got {self.rho}")

    @classmethod
    def from_dict(cls, data: dict) -> SynthSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth spec fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def superclass_of(self) -> np.ndarray:
        """Contiguous blocks: class c belongs to superclass c * G // C."""
        return np.arange(self.C) * self.G // self.C


@dataclass(frozen=True, eq=False)
class SynthResult:
    dataset: Dataset
    prototypes: np.ndarray  # (C, D) ground-truth class prototypes
    simref: np.ndarray  # (C, C) cosine similarities of the prototypes
    superclass: np.ndarray
    queries: Dataset | None = None


def _draw_samples(rng, spec: SynthSpec, protos: np.ndarray, sup: np.ndarray, per_class: int) -> Dataset:
    cls = np.repeat(np.arange(spec.C), per_class)
    n = cls.shape[0]
    x = protos[cls] + rng.normal(0.0, spec.sigma_noise, size=(n, spec.D))
    y = np.zeros((n, spec.C), dtype=bool)
    y[np.arange(n), cls] = True
    if spec.rho > 0:
        extra = rng.random(n) < spec.rho
        pick = rng.random(n)
        for i in np.flatnonzero(extra):
            mates = np.flatnonzero((sup == sup[cls[i]]) & (np.arange(spec.C) != cls[i]))
            if mates.size:
                y[i, mates[int(pick[i] * mates.size)]] = True
    return Dataset(x.astype(np.float32), y, single_label=bool((y.sum(axis=1) == 1).all()))


def generate_synthetic(spec: SynthSpec) -> SynthResult:
    """Gaussian hierarchy: superclass centers, class offsets, per-sample noise.

    With probability ``rho`` a sample also carries one other class from its
    superclass (its features are unchanged). Queries, when requested, are drawn
    after the training samples from the same prototypes.
    """
    rng = np.random.default_rng(spec.seed)
    sup = spec.superclass_of()
    super_protos = rng.normal(0.0, spec.sigma_super, size=(spec.G, spec.D))
    protos = super_protos[sup] + rng.normal(0.0, spec.sigma_class, size=(spec.C, spec.D))
    ds = _draw_samples(rng, spec, protos, sup, spec.per_class)
    queries = None
    if spec.queries_per_class:
        queries = _draw_samples(rng, spec, protos, sup, spec.queries_per_class)
    return SynthResult(ds, protos, cosine_similarity_matrix(protos), sup, queries)
