"""Class-to-center assignment over a binary codebook.

Costs are mean squared Euclidean distances between binarized sample codes
and candidate codes, weighted by 1/|labels| per sample. They are kept as
exact rationals: ``numer[c, m] / denom[c]`` with integer numerators and
denominators. Solvers see the rows rescaled to a common denominator, so
integer arithmetic gives the same argmin as the rationals.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, EmptyClassError, InfeasibleAssignmentError
from .hamming import (
    BinaryCode,
    Codebook,
    HeadLayout,
    as_rng,
    hamming_matrix,
    pack_bits,
    pack_signs,
    slice_packed,
    unique_rows,
    unpack_signs,
)

# Float64 holds integers exactly below this bound.
_EXACT_FLOAT = 1 << 53


def _as_packed_codes(codes, bits: int) -> np.ndarray:
    if isinstance(codes, np.ndarray):
        return np.asarray(codes, dtype=np.uint64).reshape(codes.shape[0], -1)
    codes = list(codes)
    for i, c in enumerate(codes):
        if c.length != bits:
            raise ConfigError(f"sample {i} has {c.length}-bit code, expected {bits}")
    return np.stack([c.words for c in codes])


def _as_labels(labels, n: int | None = None) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 2:
        raise ConfigError("labels must be an (N, C) multi-hot array")
    y = y.astype(bool)
    if n is not None and y.shape[0] != n:
        raise ConfigError(f"{y.shape[0]} label rows for {n} codes")
    return y


def _int_array(values: list[int]) -> np.ndarray:
    """int64 array when every entry fits comfortably, else Python ints."""
    if all(abs(v) < (1 << 62) for v in values):
        return np.array(values, dtype=np.int64)
    return np.array(values, dtype=object)


# ---------------------------------------------------------------------------
# cost matrices


@dataclass
class CostMatrix:
    """Exact C x M' costs ``numer[c, m] / denom[c]``.

    ``columns[m]`` is the codebook index that candidate column m stands for.
    """

    numer: np.ndarray
    denom: np.ndarray
    columns: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.numer.ndim != 2 or self.denom.shape != (self.numer.shape[0],):
            raise ConfigError("cost numerators must be (C, M') with one denominator per row")
        if self.columns is None:
            self.columns = np.arange(self.numer.shape[1])

    @property
    def class_count(self) -> int:
        return self.numer.shape[0]

    @property
    def column_count(self) -> int:
        return self.numer.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.numer.shape

    def entry(self, c: int, m: int) -> Fraction:
        return Fraction(int(self.numer[c, m]), int(self.denom[c]))

    def fractions(self) -> list[list[Fraction]]:
        return [[self.entry(c, m) for m in range(self.column_count)] for c in range(self.class_count)]

    def to_float(self) -> np.ndarray:
        return np.array([[float(v) for v in row] for row in self.fractions()])

    def scaled_integers(self) -> tuple[np.ndarray, int]:
        """Entries times ``lcm(denom)`` as exact integers, plus that common factor."""
        common = math.lcm(*(int(d) for d in self.denom))
        rows = []
        for c in range(self.class_count):
            f = common // int(self.denom[c])
            rows.append([int(v) * f for v in self.numer[c]])
        flat = [v for r in rows for v in r]
        if max(flat) * self.class_count < _EXACT_FLOAT:
            return np.array(rows, dtype=np.float64), common
        return np.array(rows, dtype=object), common

    def total(self, cols: Sequence[int]) -> Fraction:
        return sum((self.entry(c, int(m)) for c, m in enumerate(cols)), Fraction(0))


class CostAccumulator:
    """Running per-class distance sums, bucketed by label cardinality.

    Adding batches one at a time yields the same matrix as one pass over the
    union of the batches.
    """

    def __init__(self, num_classes: int, candidates: np.ndarray, code_bits: int):
        self.C = int(num_classes)
        self.candidates = np.asarray(candidates, dtype=np.uint64)
        self.bits = int(code_bits)
        self._sums: dict[int, np.ndarray] = {}
        self._counts: dict[int, np.ndarray] = {}

    def add(self, codes, labels) -> None:
        words = _as_packed_codes(codes, self.bits)
        if words.shape[1] != self.candidates.shape[1]:
            raise ConfigError("sample codes and candidate codes differ in width")
        y = _as_labels(labels, words.shape[0])
        if y.shape[1] != self.C:
            raise ConfigError(f"labels have {y.shape[1]} classes, expected {self.C}")
        card = y.sum(axis=1)
        if (card == 0).any():
            raise ConfigError(f"sample {int(np.flatnonzero(card == 0)[0])} has no label")
        sq = 4 * hamming_matrix(words, self.candidates)
        for k in np.unique(card).tolist():
            mask = card == k
            yk = y[mask].astype(np.int64)
            part = yk.T @ sq[mask]
            if k in self._sums:
                self._sums[k] += part
                self._counts[k] += yk.sum(axis=0)
            else:
                self._sums[k] = part
                self._counts[k] = yk.sum(axis=0)

    def is_empty(self) -> bool:
        return not self._counts

    def matrix(self, columns: np.ndarray | None = None) -> CostMatrix:
        if not self._counts:
            raise EmptyClassError(0, "(no samples accumulated)")
        ks = sorted(self._counts)
        lcm = math.lcm(*ks)
        denom = [sum((lcm // k) * int(self._counts[k][c]) for k in ks) for c in range(self.C)]
        for c, d in enumerate(denom):
            if d == 0:
                raise EmptyClassError(c)
        numer = [
            [sum((lcm // k) * int(self._sums[k][c, m]) for k in ks) for m in range(self.candidates.shape[0])]
            for c in range(self.C)
        ]
        flat = [v for row in numer for v in row]
        numer_arr = _int_array(flat).reshape(self.C, -1)
        return CostMatrix(numer_arr, _int_array(denom), columns)


def build_cost_matrix(codes, labels, sub_codebook: Codebook | np.ndarray,
                      code_bits: int | None = None, columns: np.ndarray | None = None) -> CostMatrix:
    """Weighted mean squared distance from each class's codes to each candidate.

    ``codes`` is a sequence of :class:`BinaryCode` or an (N, W) packed array;
    ``sub_codebook`` a :class:`Codebook` (or packed array) of distinct candidates.
    """
    if isinstance(sub_codebook, Codebook):
        cand, bits = sub_codebook.words, sub_codebook.K
    else:
        cand = np.asarray(sub_codebook, dtype=np.uint64)
        bits = code_bits
    if bits is None:
        raise ConfigError("code width unknown; pass code_bits")
    if code_bits is not None and code_bits != bits:
        raise ConfigError(f"sample codes have {code_bits} bits, candidates have {bits}")
    y = _as_labels(labels)
    acc = CostAccumulator(y.shape[1], cand, bits)
    acc.add(codes, y)
    return acc.matrix(columns)


# ---------------------------------------------------------------------------
# solvers


class Solution(NamedTuple):
    columns: np.ndarray
    total: object


def _solver_input(cost) -> tuple[np.ndarray, CostMatrix | None]:
    if isinstance(cost, CostMatrix):
        values, _ = cost.scaled_integers()
        return values, cost
    arr = np.asarray(cost)
    if arr.ndim != 2:
        raise ConfigError("cost must be a 2-D matrix")
    if arr.dtype == object:
        return arr, None
    return arr.astype(np.float64), None


def _check_shape(values: np.ndarray) -> None:
    n, m = values.shape
    if n < 1:
        raise ConfigError("cost matrix has no rows")
    if n > m:
        raise InfeasibleAssignmentError(
            f"cannot assign {n} classes injectively to {m} columns", available=m, needed=n)


def _total(values: np.ndarray, source: CostMatrix | None, cols: np.ndarray):
    if source is not None:
        return source.total(cols)
    return sum(values[i, j] for i, j in enumerate(cols))


def _shortest_augmenting_path(cost: np.ndarray) -> np.ndarray:
    """Rectangular min-cost assignment (rows <= columns) with dual potentials."""
    n, m = cost.shape
    exact = cost.dtype == object
    dtype = object if exact else np.float64
    zero = 0 if exact else 0.0
    inf = math.inf
    u = np.full(n + 1, zero, dtype=dtype)
    v = np.full(m + 1, zero, dtype=dtype)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) holding column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf, dtype=dtype)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            idx = np.flatnonzero(better) + 1
            minv[idx] = cur[idx - 1]
            way[idx] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_cols = np.flatnonzero(used)
            u[p[used_cols]] += delta
            v[used_cols] -= delta
            open_cols = np.flatnonzero(~used)
            minv[open_cols] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def hungarian_assign(cost) -> Solution:
    """Optimal injective row-to-column assignment.

    ``cost`` is a :class:`CostMatrix` (total returned as an exact Fraction) or
    any 2-D numeric array with rows <= columns.
    """
    values, source = _solver_input(cost)
    _check_shape(values)
    cols = _shortest_augmenting_path(values)
    return Solution(cols, _total(values, source, cols))


def _check_order(order, n: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64).reshape(-1)
    if order.shape[0] != n or not np.array_equal(np.sort(order), np.arange(n)):
        raise ConfigError(f"class order must be a permutation of 0..{n - 1}")
    return order


def greedy_assign(cost, class_order=None) -> Solution:
    """Rows in ``class_order`` each take their cheapest free column (ties: lowest index)."""
    if isinstance(cost, CostMatrix):
        # Rows are compared only against themselves, so numerators suffice.
        values, source = cost.numer, cost
    else:
        values, source = _solver_input(cost)
    _check_shape(values)
    n, m = values.shape
    order = np.arange(n) if class_order is None else _check_order(class_order, n)
    taken = np.zeros(m, dtype=bool)
    cols = np.full(n, -1, dtype=np.int64)
    for c in order:
        free = np.flatnonzero(~taken)
        j = int(free[int(np.argmin(values[c, free]))])
        cols[c] = j
        taken[j] = True
    return Solution(cols, _total(values, source, cols))


def solve(cost, method: str, rng=None, class_order=None) -> Solution:
    if method == "hungarian":
        return hungarian_assign(cost)
    if method == "greedy":
        if class_order is None:
            n = cost.class_count if isinstance(cost, CostMatrix) else np.asarray(cost).shape[0]
            class_order = as_rng(rng).permutation(n)
        return greedy_assign(cost, class_order)
    raise ConfigError(f"unknown solver {method!r}")


# ---------------------------------------------------------------------------
# center assignments


@dataclass
class CenterAssignment:
    """Per-head class -> codebook-index maps; class centers concatenate the head slices."""

    codebook: Codebook
    layout: HeadLayout
    per_head: tuple[np.ndarray, ...]
    totals: tuple | None = None

    def __post_init__(self):
        if self.layout.K != self.codebook.K:
            raise ConfigError(f"layout covers {self.layout.K} bits, codebook has {self.codebook.K}")
        if len(self.per_head) != self.layout.H:
            raise ConfigError(f"{len(self.per_head)} head maps for H={self.layout.H}")
        maps = []
        for h, cols in enumerate(self.per_head):
            cols = np.asarray(cols, dtype=np.int64).reshape(-1)
            if maps and cols.shape[0] != maps[0].shape[0]:
                raise ConfigError("all heads must map the same number of classes")
            if ((cols < 0) | (cols >= self.codebook.M)).any():
                raise ConfigError(f"head {h} maps outside the codebook")
            if np.unique(cols).shape[0] != cols.shape[0]:
                raise ConfigError(f"head {h} map is not injective")
            cols.setflags(write=False)
            maps.append(cols)
        self.per_head = tuple(maps)

    @property
    def C(self) -> int:
        return self.per_head[0].shape[0]

    @property
    def H(self) -> int:
        return self.layout.H

    def center_signs(self) -> np.ndarray:
        signs = self.codebook.signs()
        parts = []
        for h, cols in enumerate(self.per_head):
            start, stop = self.layout.bounds(h)
            parts.append(signs[cols, start:stop])
        return np.concatenate(parts, axis=1)

    def center_words(self) -> np.ndarray:
        return pack_signs(self.center_signs())

    def centers(self) -> list[BinaryCode]:
        return [BinaryCode(w, self.codebook.K) for w in self.center_words()]

    def changed(self, other: CenterAssignment) -> np.ndarray:
        """Boolean mask of classes whose materialized center differs from ``other``'s."""
        return (self.center_signs() != other.center_signs()).any(axis=1)

    def same_maps(self, other: CenterAssignment) -> bool:
        return len(self.per_head) == len(other.per_head) and all(
            np.array_equal(a, b) for a, b in zip(self.per_head, other.per_head))

    def to_json_dict(self) -> dict:
        return {
            "K": self.codebook.K,
            "M": self.codebook.M,
            "H": self.layout.H,
            "per_head": [cols.tolist() for cols in self.per_head],
            "centers": [c.bitstring() for c in self.centers()],
        }

    @classmethod
    def from_json_dict(cls, data: dict, codebook: Codebook) -> CenterAssignment:
        if data["K"] != codebook.K or data["M"] != codebook.M:
            raise ConfigError("assignment does not match the codebook sizes")
        layout = HeadLayout.for_bits(codebook.K, heads=data["H"])
        return cls(codebook, layout, tuple(np.asarray(c, dtype=np.int64) for c in data["per_head"]))


def centers_from_json(data: dict) -> np.ndarray:
    """(C, K) +-1 centers from an exported assignment, without needing the codebook."""
    rows = [BinaryCode.from_bitstring(s).to_signs() for s in data["centers"]]
    return np.stack(rows)


def head_candidates(codebook: Codebook, layout: HeadLayout, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Distinct d-bit sub-codes of head h and the lowest codebook index for each."""
    distinct, first, _ = unique_rows(codebook.head_words(layout, h))
    return distinct, first


def _check_feasible(h: int, available: int, needed: int) -> None:
    if available < needed:
        raise InfeasibleAssignmentError(
            f"head {h}: only {available} distinct sub-codes for {needed} classes",
            head=h, available=available, needed=needed)


def head_cost_matrices(codes, labels, codebook: Codebook, layout: HeadLayout) -> list[CostMatrix]:
    words = _as_packed_codes(codes, codebook.K)
    y = _as_labels(labels, words.shape[0])
    mats = []
    for h in range(layout.H):
        cand, first = head_candidates(codebook, layout, h)
        _check_feasible(h, cand.shape[0], y.shape[1])
        start, stop = layout.bounds(h)
        sub = slice_packed(words, codebook.K, start, stop) if layout.H > 1 else words
        mats.append(build_cost_matrix(sub, y, cand, code_bits=layout.d, columns=first))
    return mats


def solve_heads(matrices: Sequence[CostMatrix], codebook: Codebook, layout: HeadLayout,
                method: str = "greedy", rng=None, order_scope: str = "per_head",
                executor=None) -> CenterAssignment:
    """Solve each head's matrix and map its columns back to codebook indices.

    Greedy class orders are drawn from ``rng`` up front (one per head, or one
    shared per event when ``order_scope == "per_event"``), so threaded solving
    yields the same result as sequential solving.
    """
    if len(matrices) != layout.H:
        raise ConfigError(f"{len(matrices)} cost matrices for H={layout.H}")
    for h, mat in enumerate(matrices):
        _check_feasible(h, mat.column_count, mat.class_count)
    orders: list = [None] * layout.H
    if method == "greedy":
        rng = as_rng(rng)
        c = matrices[0].class_count
        if order_scope == "per_event":
            orders = [rng.permutation(c)] * layout.H
        elif order_scope == "per_head":
            orders = [rng.permutation(c) for _ in range(layout.H)]
        else:
            raise ConfigError(f"unknown greedy order scope {order_scope!r}")

    def run(h):
        return solve(matrices[h], method, class_order=orders[h])

    if executor is None:
        sols = [run(h) for h in range(layout.H)]
    else:
        sols = list(executor.map(run, range(layout.H)))
    per_head = tuple(matrices[h].columns[sol.columns] for h, sol in enumerate(sols))
    return CenterAssignment(codebook, layout, per_head, totals=tuple(s.total for s in sols))


def reassign_centers(codes, labels, codebook: Codebook, layout: HeadLayout,
                     method: str = "greedy", rng=None, order_scope: str = "per_head",
                     executor=None) -> CenterAssignment:
    """Re-solve every head's class -> sub-code mapping from binarized sample codes.

    ``codes`` are full K-bit codes (packed (N, W) array or BinaryCode list).
    The returned assignment carries exact per-head optimal/greedy totals.
    """
    mats = head_cost_matrices(codes, labels, codebook, layout)
    return solve_heads(mats, codebook, layout, method, rng, order_scope, executor)


def initial_assignment(codebook: Codebook, layout: HeadLayout, num_classes: int, seed=None) -> CenterAssignment:
    """C distinct codebook rows chosen uniformly; the same row index in every head."""
    if codebook.M < num_classes:
        raise InfeasibleAssignmentError(
            f"codebook has {codebook.M} entries for {num_classes} classes",
            available=codebook.M, needed=num_classes)
    cols = as_rng(seed).permutation(codebook.M)[:num_classes]
    return CenterAssignment(codebook, layout, tuple(cols.copy() for _ in range(layout.H)))


# ---------------------------------------------------------------------------
# full-space approximation


def _nearest_free(z: np.ndarray, taken: set[bytes]) -> np.ndarray:
    """Closest code to ``z`` (bool bits) not in ``taken``; ties go to the lexicographically smallest."""
    k = z.shape[0]
    for r in range(1, k + 1):
        best = None
        for flips in itertools.combinations(range(k), r):
            cand = z.copy()
            cand[list(flips)] ^= True
            if pack_bits(cand).tobytes() in taken:
                continue
            if best is None or tuple(cand) < tuple(best):
                best = cand
        if best is not None:
            return best
    raise InfeasibleAssignmentError(f"all {1 << k} codes are taken")


def fullspace_reassign(codes, labels, k: int, class_order=None) -> list[BinaryCode]:
    """Centers drawn from all of {-1,+1}^K without enumerating it.

    Each class (in ``class_order``) takes the sign of its weighted code sum
    (sign(0) = +1), or the nearest still-free code when that one is taken.
    """
    words = _as_packed_codes(codes, k)
    y = _as_labels(labels, words.shape[0])
    n, c = y.shape
    if k < 63 and c > (1 << k):
        raise InfeasibleAssignmentError(f"{c} classes cannot get distinct {k}-bit codes")
    order = np.arange(c) if class_order is None else _check_order(class_order, c)
    signs = unpack_signs(words, k).astype(np.int64)
    card = y.sum(axis=1)
    if (card == 0).any():
        raise ConfigError(f"sample {int(np.flatnonzero(card == 0)[0])} has no label")
    lcm = math.lcm(*np.unique(card).tolist())
    weights = lcm // card
    taken: set[bytes] = set()
    out: list[BinaryCode | None] = [None] * c
    for cls in order:
        members = np.flatnonzero(y[:, cls])
        if members.size == 0:
            raise EmptyClassError(int(cls))
        total = (weights[members, None] * signs[members]).sum(axis=0)
        z = total >= 0
        key = pack_bits(z).tobytes()
        if key in taken:
            z = _nearest_free(z, taken)
            key = pack_bits(z).tobytes()
        taken.add(key)
        out[cls] = BinaryCode.from_bits(z)
    return out
