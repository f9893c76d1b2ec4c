"""User-level item co-occurrence counting and the sparse PPMI matrix.

Two items co-occur when the same user clicked both.  With ``#(i)`` the
number of users who clicked ``i`` and ``#(i,j)`` the number who clicked
both, the empirical PMI is ``log(#(i,j) * T / (#(i) * #(j)))`` where the
normalizer ``T`` is either the number of users (``user_count``) or the
number of ordered co-click pairs (``pair_count``).  Non-positive values
are dropped.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.sparse as sp

from .data import ClickLog

_logger = logging.getLogger(__name__)

DenominatorMode = Literal["user_count", "pair_count"]
DENOMINATOR_MODES = ("user_count", "pair_count")


class UndefinedItemError(ValueError):
    """PMI requested for an item nobody clicked."""


@dataclass
class CooccurrenceStats:
    n_items: int
    item_user_count: np.ndarray
    # unordered pairs, pair_i < pair_j, sorted by (i, j)
    pair_i: np.ndarray
    pair_j: np.ndarray
    pair_count: np.ndarray
    n_users_total: int
    n_pairs_total: int

    def pair_user_count(self, i: int, j: int) -> int:
        if i > j:
            i, j = j, i
        key = i * self.n_items + j
        keys = self.pair_i * self.n_items + self.pair_j
        k = np.searchsorted(keys, key)
        if k < len(keys) and keys[k] == key:
            return int(self.pair_count[k])
        return 0

    def normalizer(self, mode: DenominatorMode) -> int:
        if mode == "user_count":
            return self.n_users_total
        if mode == "pair_count":
            return self.n_pairs_total
        raise ValueError(f"unknown denominator mode {mode!r}")

    def check(self) -> None:
        ci = self.item_user_count[self.pair_i]
        cj = self.item_user_count[self.pair_j]
        if np.any(self.pair_count < 1):
            raise AssertionError("stored pair with zero count")
        if np.any(self.pair_count > np.minimum(ci, cj)):
            raise AssertionError("pair count exceeds an item count")
        if np.any(self.pair_i >= self.pair_j):
            raise AssertionError("pairs must be stored with i < j")


def count_cooccurrence(clicks: ClickLog, max_clicks_per_user: int | None = None) -> CooccurrenceStats:
    """Count ``#(i)``, ``#(i,j)``, the number of users and ordered co-click pairs.

    Users with more than ``max_clicks_per_user`` clicks are skipped entirely
    (with a warning); by default nobody is skipped.
    """
    sizes = np.array([len(c) for c in clicks.clicks_by_user], dtype=np.int64)
    X = clicks.to_csr().astype(np.int64)
    if max_clicks_per_user is not None:
        heavy = sizes > max_clicks_per_user
        if heavy.any():
            _logger.warning("skipping %d user(s) with more than %d clicks", heavy.sum(), max_clicks_per_user)
            X = sp.diags((~heavy).astype(np.int64)) @ X
            X.eliminate_zeros()
            sizes = np.where(heavy, 0, sizes)
            n_users = int((~heavy).sum())
        else:
            n_users = clicks.n_users
    else:
        n_users = clicks.n_users

    item_count = np.asarray(X.sum(axis=0)).ravel().astype(np.int64)
    C = sp.triu(X.T @ X, k=1).tocsr()
    C.sum_duplicates()
    C.sort_indices()
    coo = C.tocoo()
    return CooccurrenceStats(
        n_items=clicks.n_items,
        item_user_count=item_count,
        pair_i=coo.row.astype(np.int64),
        pair_j=coo.col.astype(np.int64),
        pair_count=coo.data.astype(np.int64),
        n_users_total=n_users,
        n_pairs_total=int((sizes * (sizes - 1)).sum()),
    )


def _pmi(pair_count, count_i, count_j, total) -> np.ndarray:
    num = np.asarray(pair_count, dtype=np.int64) * np.int64(total)
    den = np.asarray(count_i, dtype=np.int64) * np.asarray(count_j, dtype=np.int64)
    with np.errstate(divide="ignore"):
        return np.log(num / den)


def empirical_pmi(stats: CooccurrenceStats, i: int, j: int,
                  denominator_mode: DenominatorMode = "user_count") -> float:
    if i == j:
        raise ValueError("PMI is only defined for two distinct items")
    ci, cj = int(stats.item_user_count[i]), int(stats.item_user_count[j])
    if ci == 0 or cj == 0:
        raise UndefinedItemError(f"item {i if ci == 0 else j} was never clicked")
    cij = stats.pair_user_count(i, j)
    if cij == 0:
        return -math.inf
    return float(_pmi([cij], [ci], [cj], stats.normalizer(denominator_mode))[0])


class PpmiMatrix:
    """Sparse symmetric PPMI matrix in CSR form; only positive entries are stored."""

    def __init__(self, n_items: int, indptr, indices, data, denominator_mode: str = "user_count"):
        self.n_items = int(n_items)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.denominator_mode = denominator_mode
        if len(self.indptr) != self.n_items + 1 or self.indptr[-1] != len(self.indices):
            raise ValueError("malformed CSR structure")

    @property
    def nnz(self) -> int:
        return len(self.data)

    @property
    def density(self) -> float:
        return self.nnz / (self.n_items ** 2) if self.n_items else 0.0

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.indptr[i], self.indptr[i + 1]
        return self.indices[s:e], self.data[s:e]

    def rows(self) -> dict[int, list[tuple[int, float]]]:
        return {
            i: list(zip(*(a.tolist() for a in self.row(i))))
            for i in range(self.n_items)
            if self.indptr[i + 1] > self.indptr[i]
        }

    def triples(self):
        rows = np.repeat(np.arange(self.n_items), np.diff(self.indptr))
        return zip(rows.tolist(), self.indices.tolist(), self.data.tolist())

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n_items, self.n_items))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def check(self) -> None:
        """Assert positivity, symmetry and an empty diagonal."""
        if np.any(self.data <= 0) or not np.all(np.isfinite(self.data)):
            raise AssertionError("PPMI entries must be finite and positive")
        rows = np.repeat(np.arange(self.n_items), np.diff(self.indptr))
        if np.any(rows == self.indices):
            raise AssertionError("PPMI matrix has diagonal entries")
        A = self.to_scipy()
        if (A != A.T).nnz:
            raise AssertionError("PPMI matrix is not symmetric")

    @classmethod
    def empty(cls, n_items: int, denominator_mode: str = "user_count") -> "PpmiMatrix":
        return cls(n_items, np.zeros(n_items + 1), [], [], denominator_mode)

    @classmethod
    def from_triples(cls, n_items: int, rows, cols, values, denominator_mode: str = "user_count") -> "PpmiMatrix":
        A = sp.csr_matrix((np.asarray(values, dtype=np.float64), (rows, cols)), shape=(n_items, n_items))
        A.sort_indices()
        return cls(n_items, A.indptr, A.indices, A.data, denominator_mode)

    def save(self, path) -> None:
        """Write ``i,j,value`` triples to ``path`` and a JSON header next to it."""
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["i", "j", "value"])
            for i, j, v in self.triples():
                w.writerow([i, j, repr(v)])
        header = {"n_items": self.n_items, "nnz": self.nnz, "denominator_mode": self.denominator_mode}
        with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
            json.dump(header, f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "PpmiMatrix":
        path = Path(path)
        with open(path.with_suffix(".json"), encoding="utf-8") as f:
            header = json.load(f)
        rows, cols, vals = [], [], []
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            next(reader)
            for row in reader:
                rows.append(int(row[0]))
                cols.append(int(row[1]))
                vals.append(float(row[2]))
        S = cls.from_triples(header["n_items"], rows, cols, vals, header["denominator_mode"])
        if S.nnz != header["nnz"]:
            raise ValueError(f"{path}: header says nnz={header['nnz']}, file has {S.nnz}")
        S.check()
        return S

    def __repr__(self) -> str:
        return f"PpmiMatrix(n_items={self.n_items}, nnz={self.nnz}, mode={self.denominator_mode!r})"


def build_ppmi(stats: CooccurrenceStats, denominator_mode: DenominatorMode = "user_count") -> PpmiMatrix:
    total = stats.normalizer(denominator_mode)
    if len(stats.pair_count) == 0:
        return PpmiMatrix.empty(stats.n_items, denominator_mode)
    pmi = _pmi(stats.pair_count, stats.item_user_count[stats.pair_i],
               stats.item_user_count[stats.pair_j], total)
    keep = pmi > 0
    i, j, v = stats.pair_i[keep], stats.pair_j[keep], pmi[keep]
    S = PpmiMatrix.from_triples(
        stats.n_items, np.concatenate([i, j]), np.concatenate([j, i]), np.concatenate([v, v]),
        denominator_mode,
    )
    S.check()
    return S
