"""Retrieval mAP and semantic-alignment metrics for learned centers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyClassError
from .hamming import BinaryCode, DistanceStats, codebook_distance_stats, hamming_matrix


def _packed(codes) -> np.ndarray:
    if isinstance(codes, np.ndarray):
        return np.asarray(codes, dtype=np.uint64)
    codes = list(codes)
    if codes and isinstance(codes[0], BinaryCode):
        return np.stack([c.words for c in codes])
    return np.asarray(codes, dtype=np.uint64)


def average_precisions(db_codes, db_labels, q_codes, q_labels, k: int | None = None,
                       chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Per-query AP and whether each query had any relevant item in its top k.

    The database is ranked by Hamming distance; equal distances keep database
    order. An item is relevant when it shares at least one label with the query.
    """
    db = _packed(db_codes)
    q = _packed(q_codes)
    yd = np.asarray(db_labels, dtype=bool)
    yq = np.asarray(q_labels, dtype=bool)
    if db.shape[0] == 0 or q.shape[0] == 0:
        raise ConfigError("database and queries must be nonempty")
    if yd.shape[0] != db.shape[0] or yq.shape[0] != q.shape[0] or yd.shape[1] != yq.shape[1]:
        raise ConfigError("code and label arrays do not align")
    if k is not None and k < 1:
        raise ConfigError(f"cutoff k must be >= 1, got {k}")
    top = db.shape[0] if k is None else min(k, db.shape[0])
    ranks = np.arange(1, top + 1, dtype=np.float64)
    aps = np.zeros(q.shape[0])
    has_rel = np.zeros(q.shape[0], dtype=bool)
    ydf = yd.astype(np.float32)
    for s in range(0, q.shape[0], chunk):
        dist = hamming_matrix(q[s:s + chunk], db)
        order = np.argsort(dist, axis=1, kind="stable")[:, :top]
        rel = (yq[s:s + chunk].astype(np.float32) @ ydf.T) > 0
        rel = np.take_along_axis(rel, order, axis=1)
        hits = np.cumsum(rel, axis=1)
        n_rel = hits[:, -1]
        prec_sum = (rel * hits / ranks).sum(axis=1)
        ok = n_rel > 0
        aps[s:s + chunk][ok] = prec_sum[ok] / n_rel[ok]
        has_rel[s:s + chunk] = ok
    return aps, has_rel


def map_at_k(db_codes, db_labels, q_codes, q_labels, k: int | None = None,
             exclude_unanswerable: bool = False) -> float:
    """Mean average precision over the top-k ranked database items (``k=None``: all).

    Queries without any relevant item in the top k count as AP 0 unless
    ``exclude_unanswerable`` is set.
    """
    aps, has_rel = average_precisions(db_codes, db_labels, q_codes, q_labels, k)
    if exclude_unanswerable:
        if not has_rel.any():
            return 0.0
        aps = aps[has_rel]
    return float(aps.mean())


def class_prototypes(embeddings: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-class mean embedding, each sample weighted by 1/(its number of labels)."""
    e = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if e.shape[0] != y.shape[0]:
        raise ConfigError(f"{e.shape[0]} embeddings for {y.shape[0]} label rows")
    card = y.sum(axis=1)
    if (card == 0).any():
        raise ConfigError(f"sample {int(np.flatnonzero(card == 0)[0])} has no label")
    w = y / card[:, None]
    mass = w.sum(axis=0)
    empty = np.flatnonzero(mass == 0)
    if empty.size:
        raise EmptyClassError(int(empty[0]))
    return (w.T @ e) / mass[:, None]


def cosine_similarity_matrix(vectors: np.ndarray) -> np.ndarray:
    """Symmetric cosine matrix with an exact unit diagonal."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if (norms == 0).any():
        raise ConfigError(f"vector {int(np.flatnonzero(norms == 0)[0])} has zero norm")
    u = v / norms[:, None]
    s = u @ u.T
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return np.clip(s, -1.0, 1.0)


def center_similarity_matrix(centers: np.ndarray) -> np.ndarray:
    """Cosines of +-1 centers, i.e. 1 - 2 * hamming / K, computed exactly."""
    c = np.asarray(centers)
    if not np.isin(c, (-1, 1)).all():
        raise ConfigError("centers must be +-1")
    c = c.astype(np.int64)
    return (c @ c.T) / c.shape[1]


def _upper(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError("similarity matrices must be square")
    return a[np.triu_indices(a.shape[0], k=1)]


def pcc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of the strictly upper-triangular entries."""
    if np.shape(a) != np.shape(b):
        raise ConfigError(f"matrix shapes differ: {np.shape(a)} vs {np.shape(b)}")
    if np.shape(a)[0] < 3:
        raise ConfigError("PCC needs at least 3 classes")
    x, y = _upper(a), _upper(b)
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt((x * x).sum()), np.sqrt((y * y).sum())
    if sx == 0 or sy == 0:
        raise ConfigError("PCC undefined: a similarity matrix has constant off-diagonal entries")
    return float(np.clip((x * y).sum() / (sx * sy), -1.0, 1.0))


@dataclass(frozen=True)
class AlignmentReport:
    pcc: float
    stats: DistanceStats

    @property
    def d_min(self) -> int:
        return self.stats.d_min

    @property
    def d_avg(self) -> float:
        return self.stats.d_avg_float


def semantic_alignment_report(centers: np.ndarray, simref: np.ndarray | None = None,
                              embeddings: np.ndarray | None = None,
                              labels: np.ndarray | None = None) -> AlignmentReport:
    """PCC between center similarities and a reference, plus center distance stats.

    The reference is either given directly (``simref``) or built from
    per-sample ``embeddings`` and ``labels`` via weighted class prototypes.
    """
    c = np.asarray(centers)
    if simref is None:
        if embeddings is None or labels is None:
            raise ConfigError("need simref or embeddings + labels")
        simref = cosine_similarity_matrix(class_prototypes(embeddings, labels))
    if np.shape(simref) != (c.shape[0], c.shape[0]):
        raise ConfigError(f"reference is {np.shape(simref)} for {c.shape[0]} centers")
    value = pcc(center_similarity_matrix(c), simref)
    return AlignmentReport(value, codebook_distance_stats(c))
