"""Interaction ingestion, click/rating derivation and train/validation/test splits.

Click data is the binarized interaction log (every record, rated or not).
Rating data is a random subsample of the rated records.  Users and items
are indexed once over the whole log so the rating matrix and the PPMI
matrix share item indices.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Literal, Sequence

import numpy as np

_logger = logging.getLogger(__name__)

SplitMode = Literal["in_matrix", "out_matrix"]
FileFormat = Literal["movielens_dat", "csv"]


class DataError(ValueError):
    """Raised for unreadable, malformed or unusable input data."""


class ParseError(DataError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True, slots=True)
class InteractionRecord:
    user_id: str
    item_id: str
    value: float
    timestamp: int | None = None

    @property
    def is_click_only(self) -> bool:
        return self.value == 0


def _record(path, line_no, user, item, value, ts=None) -> InteractionRecord:
    if not user or not item:
        raise ParseError(path, line_no, "empty user or item id")
    try:
        v = float(value)
    except ValueError:
        raise ParseError(path, line_no, f"rating {value!r} is not a number") from None
    if not math.isfinite(v) or v < 0:
        raise ParseError(path, line_no, f"rating {value!r} must be finite and >= 0")
    t = None
    if ts not in (None, ""):
        try:
            t = int(ts)
        except ValueError:
            raise ParseError(path, line_no, f"timestamp {ts!r} is not an integer") from None
    return InteractionRecord(user, item, v, t)


def parse_interactions(path, format: FileFormat = "movielens_dat") -> list[InteractionRecord]:
    """Read interaction records from a MovieLens ``::`` file or a headed CSV.

    CSV files need a header ``user,item,rating`` with an optional
    ``timestamp`` column.  A rating of 0 marks a click with no rating.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interaction file not found: {path}")
    records: list[InteractionRecord] = []
    if format == "movielens_dat":
        with open(path, encoding="latin-1") as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split("::")
                if len(parts) not in (3, 4):
                    raise ParseError(path, line_no, f"expected user::item::rating[::timestamp], got {len(parts)} field(s)")
                records.append(_record(path, line_no, *parts))
    elif format == "csv":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: empty file")
            header = [h.strip() for h in header]
            if header[:3] != ["user", "item", "rating"] or len(header) > 4 or (
                len(header) == 4 and header[3] != "timestamp"
            ):
                raise ParseError(path, 1, "header must be user,item,rating[,timestamp]")
            for row in reader:
                line_no = reader.line_num
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise ParseError(path, line_no, f"expected {len(header)} fields, got {len(row)}")
                records.append(_record(path, line_no, *(c.strip() for c in row)))
    else:
        raise ValueError(f"unknown format {format!r}")
    if not records:
        raise DataError(f"{path}: no interaction records")
    return records


@dataclass
class IdMap:
    """Stable mapping between opaque string ids and dense indices."""

    ids: list[str] = field(default_factory=list)
    index: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_ids(cls, ids: Iterable[str]) -> "IdMap":
        m = cls()
        for x in ids:
            if x not in m.index:
                m.index[x] = len(m.ids)
                m.ids.append(x)
        return m

    def __len__(self) -> int:
        return len(self.ids)

    def get(self, key: str) -> int | None:
        return self.index.get(key)


@dataclass
class IdMaps:
    users: IdMap
    items: IdMap

    @classmethod
    def from_records(cls, records: Sequence[InteractionRecord]) -> "IdMaps":
        """Index users and items in first-seen order over clicks and ratings alike."""
        return cls(
            IdMap.from_ids(r.user_id for r in records),
            IdMap.from_ids(r.item_id for r in records),
        )

    def to_json(self) -> dict:
        return {"users": list(self.users.ids), "items": list(self.items.ids)}

    @classmethod
    def from_json(cls, obj: dict) -> "IdMaps":
        return cls(IdMap.from_ids(obj["users"]), IdMap.from_ids(obj["items"]))


def _csr(rows: np.ndarray, n_rows: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(rows, kind="stable")
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
    return indptr, order


class SparseRatings:
    """Observed (user, item, rating) triples with per-user and per-item adjacency."""

    def __init__(self, n_users: int, n_items: int, users, items, ratings):
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.users = np.ascontiguousarray(users, dtype=np.int64)
        self.items = np.ascontiguousarray(items, dtype=np.int64)
        self.ratings = np.ascontiguousarray(ratings, dtype=np.float64)
        n = len(self.ratings)
        if not (len(self.users) == len(self.items) == n):
            raise ValueError("users, items and ratings must have equal length")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item index out of range")
            keys = self.users * self.n_items + self.items
            if len(np.unique(keys)) != n:
                raise DataError("duplicate (user, item) rating")
        self.global_mean = float(self.ratings.mean()) if n else 0.0

        self.user_indptr, order = _csr(self.users, self.n_users)
        self.user_items = self.items[order]
        self.user_ratings = self.ratings[order]
        self.item_indptr, order = _csr(self.items, self.n_items)
        self.item_users = self.users[order]
        self.item_ratings = self.ratings[order]

    @property
    def nnz(self) -> int:
        return len(self.ratings)

    def __len__(self) -> int:
        return self.nnz

    @property
    def density(self) -> float:
        cells = self.n_users * self.n_items
        return self.nnz / cells if cells else 0.0

    def entries(self) -> Iterator[tuple[int, int, float]]:
        for u, i, r in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()):
            yield u, i, r

    def by_user(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        """Items rated by ``u`` and the matching ratings."""
        s, e = self.user_indptr[u], self.user_indptr[u + 1]
        return self.user_items[s:e], self.user_ratings[s:e]

    def by_item(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.item_indptr[i], self.item_indptr[i + 1]
        return self.item_users[s:e], self.item_ratings[s:e]

    def user_counts(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    def item_counts(self) -> np.ndarray:
        return np.diff(self.item_indptr)

    def select(self, mask_or_index) -> "SparseRatings":
        """Subset of entries, keeping dimensions."""
        return SparseRatings(
            self.n_users,
            self.n_items,
            self.users[mask_or_index],
            self.items[mask_or_index],
            self.ratings[mask_or_index],
        )

    @classmethod
    def empty(cls, n_users: int, n_items: int) -> "SparseRatings":
        return cls(n_users, n_items, [], [], [])

    @classmethod
    def from_records(cls, records: Sequence[InteractionRecord], id_maps: IdMaps) -> "SparseRatings":
        """Rated records only; click-only records (value 0) are dropped."""
        rated = [r for r in records if r.value > 0]
        return cls(
            len(id_maps.users),
            len(id_maps.items),
            [id_maps.users.index[r.user_id] for r in rated],
            [id_maps.items.index[r.item_id] for r in rated],
            [r.value for r in rated],
        )

    def __repr__(self) -> str:
        return f"SparseRatings(n_users={self.n_users}, n_items={self.n_items}, nnz={self.nnz})"


@dataclass
class ClickLog:
    """Per-user sets of clicked item indices (user-based context)."""

    n_users: int
    n_items: int
    clicks_by_user: list[frozenset[int]]

    def __post_init__(self):
        if len(self.clicks_by_user) != self.n_users:
            raise ValueError("clicks_by_user must have one entry per user")

    @property
    def n_clicks(self) -> int:
        return sum(len(c) for c in self.clicks_by_user)

    def pairs(self) -> Iterator[tuple[int, int]]:
        for u, items in enumerate(self.clicks_by_user):
            for i in sorted(items):
                yield u, i

    def to_csr(self):
        """Binary user x item matrix as ``scipy.sparse.csr_matrix``."""
        from scipy.sparse import csr_matrix

        indptr = np.zeros(self.n_users + 1, dtype=np.int64)
        np.cumsum([len(c) for c in self.clicks_by_user], out=indptr[1:])
        indices = np.fromiter(
            (i for c in self.clicks_by_user for i in sorted(c)), dtype=np.int64, count=int(indptr[-1])
        )
        data = np.ones(len(indices), dtype=np.float64)
        return csr_matrix((data, indices, indptr), shape=(self.n_users, self.n_items))


def binarize_to_clicks(records: Sequence[InteractionRecord], id_maps: IdMaps | None = None) -> ClickLog:
    """Every record, whatever its value, counts as one click; repeats collapse."""
    if id_maps is None:
        id_maps = IdMaps.from_records(records)
    sets: list[set[int]] = [set() for _ in range(len(id_maps.users))]
    for r in records:
        sets[id_maps.users.index[r.user_id]].add(id_maps.items.index[r.item_id])
    return ClickLog(len(id_maps.users), len(id_maps.items), [frozenset(s) for s in sets])


def subsample_ratings(
    records: Sequence[InteractionRecord],
    percent: float,
    seed: int,
    id_maps: IdMaps | None = None,
) -> SparseRatings:
    """Uniformly pick ``floor(eligible * percent / 100)`` rated records without replacement."""
    if not 0 < percent <= 100:
        raise ValueError(f"percent must be in (0, 100], got {percent}")
    if id_maps is None:
        id_maps = IdMaps.from_records(records)
    eligible = [k for k, r in enumerate(records) if r.value > 0]
    if not eligible:
        raise DataError("no rated records to subsample")
    n_pick = math.floor(len(eligible) * percent / 100)
    if n_pick == 0:
        raise DataError(f"{percent}% of {len(eligible)} rated records rounds down to zero")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(eligible), size=n_pick, replace=False))
    return SparseRatings.from_records([records[eligible[k]] for k in picked], id_maps)


@dataclass(frozen=True)
class SplitSpec:
    mode: SplitMode = "in_matrix"
    train_fraction: float = 0.8
    validation_fraction_of_train: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("in_matrix", "out_matrix"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        for name in ("train_fraction", "validation_fraction_of_train"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must be in (0, 1), got {v}")


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def _entry_holdout(items: np.ndarray, candidates: np.ndarray, keep_fraction: float,
                   n_items: int, rng: np.random.Generator) -> np.ndarray:
    """Hold out all but ``floor(keep_fraction * len(candidates))`` random entries.

    Held-out entries whose item has no remaining candidate entry are put
    back, so every held-out item still occurs in what is kept.
    """
    n_hold = len(candidates) - math.floor(len(candidates) * keep_fraction)
    held = np.zeros(len(items), dtype=bool)
    held[candidates[rng.permutation(len(candidates))[:n_hold]]] = True
    kept = np.zeros(len(items), dtype=bool)
    kept[candidates] = True
    kept &= ~held
    covered = np.bincount(items[kept], minlength=n_items) > 0
    held &= covered[items]
    return held


def _item_holdout(items: np.ndarray, candidates: np.ndarray, fraction: float,
                  rng: np.random.Generator, min_keep: int = 1) -> np.ndarray:
    """Hold out every entry of a random ``fraction`` of the items in ``candidates``."""
    pool = np.unique(items[candidates])
    n_hold = min(_round(len(pool) * fraction), len(pool) - min_keep)
    held_items = pool[rng.permutation(len(pool))[:max(n_hold, 0)]]
    held = np.zeros(len(items), dtype=bool)
    held[candidates] = np.isin(items[candidates], held_items)
    return held


def split_ratings(ratings: SparseRatings, spec: SplitSpec) -> tuple[SparseRatings, SparseRatings, SparseRatings]:
    """Partition ratings into (train, validation, test).

    ``in_matrix``: random 80/20 entry split, then test entries on items
    missing from train are moved back to train.  ``out_matrix``: a random
    20% of the rated items go to test with all their ratings.  Validation
    is carved out of train the same way.
    """
    if ratings.nnz == 0:
        raise DataError("cannot split an empty rating set")
    rng = np.random.default_rng(spec.seed)
    items = ratings.items
    everything = np.arange(ratings.nnz)
    if spec.mode == "in_matrix":
        test = _entry_holdout(items, everything, spec.train_fraction, ratings.n_items, rng)
        val = _entry_holdout(items, np.flatnonzero(~test), 1 - spec.validation_fraction_of_train,
                             ratings.n_items, rng)
    else:
        if len(np.unique(items)) < 2:
            raise DataError("out-of-matrix split needs at least two rated items")
        test = _item_holdout(items, everything, 1 - spec.train_fraction, rng)
        val = _item_holdout(items, np.flatnonzero(~test), spec.validation_fraction_of_train, rng)
    train = ~(test | val)
    if not train.any():
        raise DataError("split leaves the training set empty")
    return ratings.select(train), ratings.select(val), ratings.select(test)


# ---------------------------------------------------------------------------
# On-disk split manifests

def write_ratings_csv(path, ratings: SparseRatings, id_maps: IdMaps) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["user", "item", "rating"])
        for u, i, r in ratings.entries():
            w.writerow([id_maps.users.ids[u], id_maps.items.ids[i], repr(r)])


def read_ratings_csv(path, id_maps: IdMaps) -> SparseRatings:
    users, items, values = [], [], []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["user", "item", "rating"]:
            raise ParseError(path, 1, "header must be user,item,rating")
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(path, reader.line_num, f"expected 3 fields, got {len(row)}")
            u, i = id_maps.users.get(row[0]), id_maps.items.get(row[1])
            if u is None or i is None:
                raise ParseError(path, reader.line_num, "id not present in the manifest id maps")
            users.append(u)
            items.append(i)
            values.append(float(row[2]))
    return SparseRatings(len(id_maps.users), len(id_maps.items), users, items, values)


def write_clicks_csv(path, clicks: ClickLog, id_maps: IdMaps) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["user", "item"])
        for u, i in clicks.pairs():
            w.writerow([id_maps.users.ids[u], id_maps.items.ids[i]])


def read_clicks_csv(path, id_maps: IdMaps) -> ClickLog:
    sets: list[set[int]] = [set() for _ in range(len(id_maps.users))]
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        if next(reader, None) != ["user", "item"]:
            raise ParseError(path, 1, "header must be user,item")
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(path, reader.line_num, f"expected 2 fields, got {len(row)}")
            u, i = id_maps.users.get(row[0]), id_maps.items.get(row[1])
            if u is None or i is None:
                raise ParseError(path, reader.line_num, "malformed click row")
            sets[u].add(i)
    return ClickLog(len(id_maps.users), len(id_maps.items), [frozenset(s) for s in sets])


@dataclass
class PreparedDataset:
    """Everything one experiment needs: rating splits, the full click log and id maps."""

    train: SparseRatings
    validation: SparseRatings
    test: SparseRatings
    clicks: ClickLog
    id_maps: IdMaps
    split: SplitSpec
    name: str = "dataset"
    percent: float = 100.0
    scale: tuple[float, float] = (1.0, 5.0)
    _ppmi_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def ppmi(self, denominator_mode: str = "user_count"):
        from .ppmi import build_ppmi, count_cooccurrence

        if denominator_mode not in self._ppmi_cache:
            stats = count_cooccurrence(self.clicks)
            self._ppmi_cache[denominator_mode] = build_ppmi(stats, denominator_mode)
        return self._ppmi_cache[denominator_mode]

    def manifest(self) -> dict:
        n_rated = self.train.nnz + self.validation.nnz + self.test.nnz
        cells = self.train.n_users * self.train.n_items
        return {
            "name": self.name,
            "seed": self.split.seed,
            "mode": self.split.mode,
            "train_fraction": self.split.train_fraction,
            "validation_fraction_of_train": self.split.validation_fraction_of_train,
            "percent": self.percent,
            "scale": list(self.scale),
            "n_users": self.train.n_users,
            "n_items": self.train.n_items,
            "n_clicks": self.clicks.n_clicks,
            "counts": {"train": self.train.nnz, "validation": self.validation.nnz, "test": self.test.nnz},
            "density": {
                "ratings": n_rated / cells if cells else 0.0,
                "train": self.train.density,
                "clicks": self.clicks.n_clicks / cells if cells else 0.0,
            },
            "id_maps": self.id_maps.to_json(),
        }

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_ratings_csv(d / "train.csv", self.train, self.id_maps)
        write_ratings_csv(d / "validation.csv", self.validation, self.id_maps)
        write_ratings_csv(d / "test.csv", self.test, self.id_maps)
        write_clicks_csv(d / "clicks.csv", self.clicks, self.id_maps)
        with open(d / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(self.manifest(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, directory) -> "PreparedDataset":
        d = Path(directory)
        mpath = d / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(f"no manifest.json in {d}; run prepare first")
        with open(mpath, encoding="utf-8") as f:
            m = json.load(f)
        id_maps = IdMaps.from_json(m["id_maps"])
        split = SplitSpec(m["mode"], m["train_fraction"], m["validation_fraction_of_train"], m["seed"])
        return cls(
            read_ratings_csv(d / "train.csv", id_maps),
            read_ratings_csv(d / "validation.csv", id_maps),
            read_ratings_csv(d / "test.csv", id_maps),
            read_clicks_csv(d / "clicks.csv", id_maps),
            id_maps,
            split,
            name=m["name"],
            percent=m["percent"],
            scale=tuple(m["scale"]),
        )


def prepare_dataset(
    records: Sequence[InteractionRecord],
    percent: float,
    split: SplitSpec,
    name: str = "dataset",
    scale: tuple[float, float] = (1.0, 5.0),
) -> PreparedDataset:
    """Clicks from the full log, ratings subsampled at ``percent`` and split."""
    id_maps = IdMaps.from_records(records)
    clicks = binarize_to_clicks(records, id_maps)
    ratings = subsample_ratings(records, percent, split.seed, id_maps)
    train, val, test = split_ratings(ratings, split)
    _logger.info(
        "%s: %d users, %d items, %d clicks, %d ratings (%.4f%%) -> %d/%d/%d",
        name, len(id_maps.users), len(id_maps.items), clicks.n_clicks, ratings.nnz,
        100 * ratings.density, train.nnz, val.nnz, test.nnz,
    )
    return PreparedDataset(train, val, test, clicks, id_maps, split, name, percent, scale)
