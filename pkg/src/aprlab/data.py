"""Interaction logs, temporal leave-one-out splits and the popularity partition.

A :class:`Dataset` stores interactions as parallel numpy arrays over
contiguous 0-based user and item indices.  Item popularity is the number of
distinct users with feedback on the item; after de-duplication this equals
the interaction count per item.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

HEAD_FRACTION = 0.2
SPLIT_HEADER = "# aprlab-split"


class Interaction(NamedTuple):
    user: int
    item: int
    rating: float
    timestamp: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: tuple = ()
    item_ids: tuple = ()
    # CSR view of the positive sets, built in __post_init__
    indptr: np.ndarray = field(init=False, repr=False)
    indices: np.ndarray = field(init=False, repr=False)
    popularity: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        n = len(users)
        if not (len(items) == len(self.ratings) == len(self.timestamps) == n):
            raise DataError("interaction arrays differ in length")
        if n and (users.min() < 0 or users.max() >= self.num_users):
            raise DataError("user index out of range")
        if n and (items.min() < 0 or items.max() >= self.num_items):
            raise DataError("item index out of range")
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if n and ts.min() < 0:
            raise DataError("negative timestamp")

        order = np.lexsort((items, users))
        su, si = users[order], items[order]
        if n > 1 and np.any((su[1:] == su[:-1]) & (si[1:] == si[:-1])):
            raise DataError("duplicate (user, item) pair")
        indptr = np.zeros(self.num_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(su, minlength=self.num_users), out=indptr[1:])

        object.__setattr__(self, "users", _frozen(users))
        object.__setattr__(self, "items", _frozen(items))
        object.__setattr__(self, "ratings", _frozen(np.asarray(self.ratings, dtype=np.float64)))
        object.__setattr__(self, "timestamps", _frozen(ts))
        object.__setattr__(self, "indptr", _frozen(indptr))
        object.__setattr__(self, "indices", _frozen(si))
        object.__setattr__(
            self, "popularity", _frozen(np.bincount(items, minlength=self.num_items).astype(np.int64))
        )

    def __len__(self) -> int:
        return len(self.users)

    @property
    def user_degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def positives(self, u: int) -> np.ndarray:
        """Sorted item indices user ``u`` interacted with."""
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def positive_sets(self) -> dict[int, set[int]]:
        return {u: set(self.positives(u).tolist()) for u in range(self.num_users)}

    def interactions(self):
        for row in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist(), self.timestamps.tolist()):
            yield Interaction(*row)

    def pair_keys(self) -> np.ndarray:
        """Sorted ``u * N + i`` keys for fast membership tests."""
        rows = np.repeat(np.arange(self.num_users, dtype=np.int64), self.user_degree)
        return rows * self.num_items + self.indices

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            self.num_users,
            self.num_items,
            self.users[mask],
            self.items[mask],
            self.ratings[mask],
            self.timestamps[mask],
            self.user_ids,
            self.item_ids,
        )


@dataclass(frozen=True, eq=False)
class TrainTestSplit:
    train: Dataset
    test: dict[int, int]
    test_timestamp: dict[int, int]

    @property
    def test_users(self) -> list[int]:
        return sorted(self.test)


@dataclass(frozen=True)
class PopularityPartition:
    short_head: frozenset
    long_tail: frozenset
    cutoff_size: int
    num_items: int

    def head_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_items, dtype=bool)
        mask[list(self.short_head)] = True
        return mask


def _parse_lines(lines, source: str):
    latest: dict[tuple[str, str], tuple[float, int]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 4:
            raise DataError(f"{source}:{lineno}: expected 4 fields, got {len(parts)}")
        user, item, rating, ts = (p.strip() for p in parts)
        try:
            rating_v = float(rating)
            ts_v = int(ts)
        except ValueError:
            raise DataError(f"{source}:{lineno}: non-numeric rating or timestamp") from None
        if not math.isfinite(rating_v):
            raise DataError(f"{source}:{lineno}: non-numeric rating")
        if ts_v < 0:
            raise DataError(f"{source}:{lineno}: negative timestamp")
        key = (user, item)
        prev = latest.get(key)
        # dict keeps first-insertion order, which fixes the index assignment
        if prev is None or ts_v >= prev[1]:
            latest[key] = (rating_v, ts_v)
    return latest


def load_interactions(path, format: str = "tsv") -> Dataset:
    """Read ``user<TAB>item<TAB>rating<TAB>timestamp`` lines.

    Indices follow first-seen order of the external ids.  Repeated
    (user, item) pairs collapse to one interaction with the latest timestamp.
    """
    if format != "tsv":
        raise DataError(f"unsupported format {format!r}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, encoding="utf-8") as fh:
        latest = _parse_lines(fh, str(path))
    if not latest:
        raise DataError(f"{path}: no interactions")

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    n = len(latest)
    users = np.empty(n, dtype=np.int64)
    items = np.empty(n, dtype=np.int64)
    ratings = np.empty(n)
    stamps = np.empty(n, dtype=np.int64)
    for k, ((user, item), (rating, ts)) in enumerate(latest.items()):
        users[k] = user_index.setdefault(user, len(user_index))
        items[k] = item_index.setdefault(item, len(item_index))
        ratings[k] = rating
        stamps[k] = ts
    return Dataset(
        len(user_index), len(item_index), users, items, ratings, stamps,
        tuple(user_index), tuple(item_index),
    )


def temporal_leave_one_out(ds: Dataset) -> TrainTestSplit:
    """Hold out each user's latest interaction (ties: larger item index).

    Users with a single interaction keep it in train and get no test item.
    """
    order = np.lexsort((ds.items, ds.timestamps, ds.users))
    su = ds.users[order]
    last = np.ones(len(order), dtype=bool)
    last[:-1] = su[1:] != su[:-1]
    deg = ds.user_degree
    held = order[last & (deg[su] >= 2)]

    keep = np.ones(len(ds), dtype=bool)
    keep[held] = False
    test = {int(ds.users[r]): int(ds.items[r]) for r in held}
    test_ts = {int(ds.users[r]): int(ds.timestamps[r]) for r in held}
    return TrainTestSplit(ds.subset(keep), dict(sorted(test.items())), dict(sorted(test_ts.items())))


def partition_items(train: Dataset) -> PopularityPartition:
    n = train.num_items
    if n < 5:
        raise DataError(f"need at least 5 items to partition, got {n}")
    cutoff = int(math.floor(HEAD_FRACTION * n))
    ranked = np.lexsort((np.arange(n), -train.popularity))
    head = frozenset(ranked[:cutoff].tolist())
    tail = frozenset(ranked[cutoff:].tolist())
    return PopularityPartition(head, tail, cutoff, n)


def head_probability(ds: Dataset, part: PopularityPartition) -> float:
    """Share of interactions whose item is in the short head."""
    if len(ds) == 0:
        raise DataError("empty dataset")
    return float(ds.popularity[part.head_mask()].sum()) / len(ds)


def density(ds: Dataset) -> float:
    return len(ds) / (ds.num_users * ds.num_items)


def generate_synthetic(
    M: int, N: int, n_interactions: int, head_share: float, seed: int
) -> Dataset:
    """Two-tier implicit feedback generator.

    Items ``0 .. floor(0.2 N) - 1`` form the designated head block.  Each
    draw picks a user uniformly, then a head item with probability
    ``head_share`` (uniform within the block) or a tail item otherwise.
    Repeated pairs are redrawn.  The first ``M`` draws visit every user once
    (in random order) so that no user is empty.  Timestamps are the global
    draw counter, hence strictly increasing per user.
    """
    if not 0.0 < head_share < 1.0:
        raise DataError("head_share must lie in (0, 1)")
    n_head = int(math.floor(HEAD_FRACTION * N))
    if n_head < 1 or n_head >= N:
        raise DataError(f"N={N} too small for a two-tier catalogue")
    if n_interactions > M * N or n_interactions < M:
        raise DataError(f"cannot place {n_interactions} interactions on {M}x{N}")

    rng = np.random.default_rng(seed)
    seen: set[int] = set()
    head_count = np.zeros(M, dtype=np.int64)
    tail_count = np.zeros(M, dtype=np.int64)
    users = np.empty(n_interactions, dtype=np.int64)
    items = np.empty(n_interactions, dtype=np.int64)
    first_pass = rng.permutation(M)
    max_attempts = 1000 * n_interactions + 10_000
    attempts = 0
    k = 0
    while k < n_interactions:
        attempts += 1
        if attempts > max_attempts:
            raise DataError("synthetic sampler failed to place all interactions")
        u = int(first_pass[k]) if k < M else int(rng.integers(M))
        if rng.random() < head_share:
            if head_count[u] == n_head:
                continue
            i = int(rng.integers(n_head))
        else:
            if tail_count[u] == N - n_head:
                continue
            i = n_head + int(rng.integers(N - n_head))
        key = u * N + i
        if key in seen:
            continue
        seen.add(key)
        if i < n_head:
            head_count[u] += 1
        else:
            tail_count[u] += 1
        users[k], items[k] = u, i
        k += 1
    return Dataset(
        M, N, users, items, np.ones(n_interactions), np.arange(n_interactions, dtype=np.int64),
        tuple(str(u) for u in range(M)), tuple(str(i) for i in range(N)),
    )


def write_interactions(ds: Dataset, path, header: str | None = None) -> None:
    """Write index-keyed TSV; ``header`` becomes a leading ``#`` line."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(header + "\n")
        for u, i, r, t in zip(ds.users.tolist(), ds.items.tolist(), ds.ratings.tolist(), ds.timestamps.tolist()):
            fh.write(f"{u}\t{i}\t{r:g}\t{t}\n")


def save_split(split: TrainTestSplit, out_dir) -> None:
    """Persist ``train.tsv`` and ``test.tsv`` plus the index-to-id tables.

    Both files use internal indices as ids and begin with a ``#`` header
    carrying M and N, so a reload restores the same index space.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = split.train
    header = f"{SPLIT_HEADER} users={tr.num_users} items={tr.num_items}"
    write_interactions(tr, out / "train.tsv", header)
    with open(out / "test.tsv", "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for u, i in split.test.items():
            fh.write(f"{u}\t{i}\t1\t{split.test_timestamp[u]}\n")
    for name, ids in (("users.tsv", tr.user_ids), ("items.tsv", tr.item_ids)):
        if ids:
            with open(out / name, "w", encoding="utf-8") as fh:
                fh.writelines(f"{k}\t{x}\n" for k, x in enumerate(ids))


def _read_split_file(path: Path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith(SPLIT_HEADER):
            raise DataError(f"{path}: missing split header")
        try:
            fields = dict(kv.split("=") for kv in first[len(SPLIT_HEADER):].split())
            m, n = int(fields["users"]), int(fields["items"])
        except (ValueError, KeyError):
            raise DataError(f"{path}: bad split header") from None
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields")
            try:
                rows.append((int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
    return m, n, rows


def _read_ids(path: Path) -> tuple:
    if not path.exists():
        return ()
    with open(path, encoding="utf-8") as fh:
        return tuple(line.rstrip("\n").split("\t", 1)[1] for line in fh)


def load_split(split_dir) -> TrainTestSplit:
    d = Path(split_dir)
    m, n, rows = _read_split_file(d / "train.tsv")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    train = Dataset(
        m, n, arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2],
        arr[:, 3].astype(np.int64), _read_ids(d / "users.tsv"), _read_ids(d / "items.tsv"),
    )
    m2, n2, trows = _read_split_file(d / "test.tsv")
    if (m2, n2) != (m, n):
        raise DataError(f"{d}: train/test index spaces differ")
    test = {u: i for u, i, _, _ in trows}
    test_ts = {u: t for u, _, _, t in trows}
    return TrainTestSplit(train, dict(sorted(test.items())), dict(sorted(test_ts.items())))


def split_fingerprint(split: TrainTestSplit) -> str:
    """Content hash identifying the split (used to refuse cross-dataset comparisons)."""
    import hashlib

    h = hashlib.sha256()
    tr = split.train
    h.update(np.array([tr.num_users, tr.num_items], dtype=np.int64).tobytes())
    h.update(tr.indptr.tobytes())
    h.update(tr.indices.tobytes())
    h.update(np.array(sorted(split.test.items()), dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def dataset_stats(ds: Dataset) -> dict:
    part = partition_items(ds)
    p_sh = head_probability(ds, part)
    return {
        "users": ds.num_users,
        "items": ds.num_items,
        "interactions": len(ds),
        "density": density(ds),
        "p_sh": p_sh,
        "p_lt": 1.0 - p_sh,
        "short_head_size": part.cutoff_size,
    }


def default_ml100k_path() -> Path | None:
    env = os.environ.get("APRLAB_ML100K")
    if env:
        return Path(env)
    here = Path(__file__).resolve().parents[2] / "data" / "ml-100k" / "u.data"
    return here if here.exists() else None
