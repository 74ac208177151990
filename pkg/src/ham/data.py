"""Interaction-log ingestion, preprocessing, chronological splits and
sliding-window training instances."""

from __future__ import annotations

import enum
import io
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

COLUMNS = ("user", "item", "rating", "timestamp")


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, line_no: int, message: str, source: str | None = None):
        self.line_no = line_no
        self.source = source
        where = f"{source}:{line_no}" if source else f"line {line_no}"
        super().__init__(f"{where}: {message}")


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    rating: float
    timestamp: int

    def __post_init__(self):
        if not self.user or not self.item:
            raise ValueError("user and item keys must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


def parse_interactions(source, delimiter: str = ",", columns: Sequence[str] = COLUMNS,
                       skip_header: bool = False, name: str | None = None) -> list[InteractionRecord]:
    """Read one record per non-blank line.

    `source` may be a path, bytes, or a text/binary file object.  `columns`
    names the field order; extra columns are allowed if named ``"_"``.
    """
    if sorted(c for c in columns if c != "_") != sorted(COLUMNS):
        raise ValueError(f"columns must name each of {COLUMNS} exactly once, got {list(columns)}")
    pos = {c: i for i, c in enumerate(columns) if c != "_"}
    width = len(columns)

    if isinstance(source, (str, os.PathLike)):
        name = name or str(source)
        with open(source, "rb") as fh:
            raw = fh.read()
    elif isinstance(source, bytes):
        raw = source
    else:
        raw = source.read()
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw

    records = []
    for line_no, line in enumerate(io.StringIO(text), start=1):
        line = line.rstrip("\r\n")
        if skip_header and line_no == 1:
            continue
        if not line.strip():
            continue
        fields = [f.strip() for f in (line.split(delimiter) if delimiter != " " else line.split())]
        if len(fields) != width:
            raise ParseError(line_no, f"expected {width} fields, got {len(fields)}", name)
        try:
            rating = float(fields[pos["rating"]])
        except ValueError:
            raise ParseError(line_no, f"bad rating {fields[pos['rating']]!r}", name) from None
        try:
            ts = int(fields[pos["timestamp"]])
        except ValueError:
            try:
                # some dumps write integral timestamps as floats
                tsf = float(fields[pos["timestamp"]])
            except ValueError:
                raise ParseError(line_no, f"bad timestamp {fields[pos['timestamp']]!r}", name) from None
            if not tsf.is_integer():
                raise ParseError(line_no, f"bad timestamp {fields[pos['timestamp']]!r}", name)
            ts = int(tsf)
        if not np.isfinite(rating):
            raise ParseError(line_no, f"bad rating {fields[pos['rating']]!r}", name)
        try:
            records.append(InteractionRecord(fields[pos["user"]], fields[pos["item"]], rating, ts))
        except ValueError as e:
            raise ParseError(line_no, str(e), name) from None
    return records


@dataclass
class Dataset:
    """Per-user chronological sequences of dense internal item ids.

    ``user_keys[i]`` / ``item_keys[j]`` give the external key of internal
    user ``i`` / item ``j``.  The pad id used for short contexts is
    ``num_items`` (one past the last real item).
    """

    sequences: list[np.ndarray]
    user_keys: list[str]
    item_keys: list[str]
    _user_index: dict = field(init=False, repr=False)
    _item_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        if len(self.sequences) != len(self.user_keys):
            raise ValueError("one sequence per user required")
        self._user_index = {k: i for i, k in enumerate(self.user_keys)}
        self._item_index = {k: i for i, k in enumerate(self.item_keys)}
        if len(self._user_index) != len(self.user_keys) or len(self._item_index) != len(self.item_keys):
            raise ValueError("id maps must be bijections")
        n = len(self.item_keys)
        for s in self.sequences:
            if len(s) and (s.min() < 0 or s.max() >= n):
                raise ValueError("item id out of range")

    @property
    def num_users(self) -> int:
        return len(self.user_keys)

    @property
    def num_items(self) -> int:
        return len(self.item_keys)

    @property
    def pad_id(self) -> int:
        return self.num_items

    @property
    def num_interactions(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def user_id(self, key: str) -> int:
        return self._user_index[key]

    def item_id(self, key: str) -> int:
        return self._item_index[key]

    def summary(self) -> dict:
        m, n, nnz = self.num_users, self.num_items, self.num_interactions
        return {
            "users": m,
            "items": n,
            "interactions": nnz,
            "intrns_per_user": nnz / m if m else 0.0,
            "users_per_item": nnz / n if n else 0.0,
            "density": nnz / (m * n) if m and n else 0.0,
        }

    def to_records(self) -> list[InteractionRecord]:
        """Positive records in the same id order, timestamps = positions."""
        return [
            InteractionRecord(self.user_keys[u], self.item_keys[j], 5.0, t)
            for u, seq in enumerate(self.sequences)
            for t, j in enumerate(seq.tolist())
        ]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.user_keys == other.user_keys and self.item_keys == other.item_keys
                and len(self.sequences) == len(other.sequences)
                and all(np.array_equal(a, b) for a, b in zip(self.sequences, other.sequences)))


def preprocess(records: Sequence[InteractionRecord], min_user_interactions: int = 10,
               min_item_interactions: int = 5, positive_threshold: float = 4.0) -> Dataset:
    """Binarize, filter to a fixpoint of both frequency thresholds, remap ids.

    Only events with ``rating >= positive_threshold`` are kept.  Users and
    items are then removed alternately until every user has at least
    ``min_user_interactions`` events and every item at least
    ``min_item_interactions``.

    Internal user ids follow each user's first appearance in file order;
    item ids follow first appearance when walking users in id order, each
    sequence chronologically.  That makes the output a fixpoint of
    ``preprocess(dataset.to_records())``.
    """
    if not records:
        raise DataError("no interaction records")
    events = [(r.user, r.item) for r in records if r.rating >= positive_threshold]
    keep_idx = [i for i, r in enumerate(records) if r.rating >= positive_threshold]

    alive = np.ones(len(events), dtype=bool)
    while True:
        users = Counter(events[i][0] for i in np.flatnonzero(alive))
        bad_users = {u for u, c in users.items() if c < min_user_interactions}
        if bad_users:
            for i in np.flatnonzero(alive):
                if events[i][0] in bad_users:
                    alive[i] = False
        items = Counter(events[i][1] for i in np.flatnonzero(alive))
        bad_items = {j for j, c in items.items() if c < min_item_interactions}
        if bad_items:
            for i in np.flatnonzero(alive):
                if events[i][1] in bad_items:
                    alive[i] = False
        if not bad_users and not bad_items:
            break

    survivors = [keep_idx[i] for i in np.flatnonzero(alive)]
    if not survivors:
        raise EmptyDatasetError("no user survives filtering")

    by_user: dict[str, list[int]] = {}
    for idx in survivors:
        by_user.setdefault(records[idx].user, []).append(idx)

    user_keys = list(by_user)
    item_index: dict[str, int] = {}
    sequences = []
    for u in user_keys:
        # stable sort: timestamp ties keep file order
        idxs = sorted(by_user[u], key=lambda i: records[i].timestamp)
        seq = []
        for i in idxs:
            seq.append(item_index.setdefault(records[i].item, len(item_index)))
        sequences.append(seq)
    return Dataset(sequences, user_keys, list(item_index))


def save_dataset(dataset: Dataset, path, header_comments: Iterable[str] = ()) -> None:
    """Write ``m n`` then ``user item item ...`` lines; external keys go to
    ``<path>.users`` / ``<path>.items`` (one key per line, in id order)."""
    path = os.fspath(path)
    lines = [f"# {c}" for c in header_comments]
    lines.append(f"{dataset.num_users} {dataset.num_items}")
    for u, seq in enumerate(dataset.sequences):
        lines.append(" ".join([str(u)] + [str(j) for j in seq.tolist()]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    for suffix, keys in ((".users", dataset.user_keys), (".items", dataset.item_keys)):
        with open(path + suffix, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(k + "\n" for k in keys))


def load_dataset(path) -> Dataset:
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        body = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    if not body:
        raise DataError(f"{path}: missing header")
    try:
        m, n = (int(x) for x in body[0].split())
    except ValueError:
        raise DataError(f"{path}: bad header {body[0]!r}") from None
    if len(body) - 1 != m:
        raise DataError(f"{path}: header says {m} users, found {len(body) - 1}")
    sequences = []
    for u, line in enumerate(body[1:]):
        parts = [int(x) for x in line.split()]
        if parts[0] != u:
            raise DataError(f"{path}: user lines must be in id order (expected {u}, got {parts[0]})")
        sequences.append(parts[1:])

    def keys(suffix, count):
        if os.path.exists(path + suffix):
            with open(path + suffix, encoding="utf-8") as fh:
                ks = fh.read().splitlines()
            if len(ks) != count:
                raise DataError(f"{path + suffix}: expected {count} keys, found {len(ks)}")
            return ks
        return [str(i) for i in range(count)]

    return Dataset(sequences, keys(".users", m), keys(".items", n))


class SplitSetting(enum.Enum):
    CUT_80_20 = "80-20-cut"
    CUT_80_3 = "80-3-cut"
    LOS_3 = "3-los"

    @classmethod
    def parse(cls, value) -> "SplitSetting":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for s in cls:
            if key in (s.value, s.name.lower().replace("_", "-")):
                return s
        raise ValueError(f"unknown split setting {value!r}; choose from {[s.value for s in cls]}")


@dataclass(frozen=True)
class SplitPlan:
    """Per-user boundaries: train = [0, train_end), valid = [train_end,
    valid_end), test = [valid_end, test_end).  ``setting`` is None for
    hand-built plans."""

    train_end: np.ndarray
    valid_end: np.ndarray
    test_end: np.ndarray
    setting: SplitSetting | None = None

    def __len__(self):
        return len(self.train_end)

    def check(self, dataset: Dataset) -> None:
        lengths = np.array([len(s) for s in dataset.sequences])
        if len(lengths) != len(self):
            raise ValueError("plan does not match dataset user count")
        ok = (0 <= self.train_end) & (self.train_end <= self.valid_end) & \
             (self.valid_end <= self.test_end) & (self.test_end <= lengths)
        if not ok.all():
            raise ValueError(f"invalid split boundaries for users {np.flatnonzero(~ok)[:5].tolist()}")

    def ranges(self, user: int) -> tuple[range, range, range]:
        a, b, c = int(self.train_end[user]), int(self.valid_end[user]), int(self.test_end[user])
        return range(0, a), range(a, b), range(b, c)


def split_bounds(length: int, setting: SplitSetting) -> tuple[int, int, int]:
    if setting is SplitSetting.LOS_3:
        return max(length - 6, 0), max(length - 3, 0), length
    # integer arithmetic: float 0.7 * L can land just below an integer
    train_end = (7 * length) // 10
    valid_end = (8 * length) // 10
    if setting is SplitSetting.CUT_80_20:
        return train_end, valid_end, length
    return train_end, valid_end, min(valid_end + 3, length)


def split(dataset: Dataset, setting) -> SplitPlan:
    setting = SplitSetting.parse(setting)
    bounds = np.array([split_bounds(len(s), setting) for s in dataset.sequences], dtype=np.int64).reshape(-1, 3)
    return SplitPlan(bounds[:, 0], bounds[:, 1], bounds[:, 2], setting)


def holdout_plan(dataset: Dataset, n_valid: int = 1, n_test: int = 1) -> SplitPlan:
    """Leave the last ``n_test`` items for test and the ``n_valid`` before
    them for validation."""
    lengths = np.array([len(s) for s in dataset.sequences], dtype=np.int64)
    test_end = lengths
    valid_end = np.maximum(lengths - n_test, 0)
    train_end = np.maximum(valid_end - n_valid, 0)
    return SplitPlan(train_end, valid_end, test_end, None)


@dataclass(frozen=True)
class TrainingInstance:
    user: int
    context: tuple
    targets: tuple
    pad_count: int


def make_instances(dataset: Dataset, plan: SplitPlan, n_h: int, n_p: int,
                   include_validation: bool = False) -> list[TrainingInstance]:
    """Slide a window of ``n_h + n_p`` items one step at a time over each
    user's training range.

    Windows near the start of the range are left-padded with
    ``dataset.pad_id`` as long as at least one real context item remains,
    so every position after the first can be a target.  Output is ordered
    by user, then window start.
    """
    if n_h < 1 or n_p < 1:
        raise ValueError("n_h and n_p must be >= 1")
    pad = dataset.pad_id
    out = []
    ends = plan.valid_end if include_validation else plan.train_end
    for u, seq in enumerate(dataset.sequences):
        r = seq[: int(ends[u])].tolist()
        for t in range(1, len(r) - n_p + 1):
            lo = max(0, t - n_h)
            pad_count = n_h - (t - lo)
            ctx = (pad,) * pad_count + tuple(r[lo:t])
            out.append(TrainingInstance(u, ctx, tuple(r[t:t + n_p]), pad_count))
    return out


def instances_to_arrays(instances: Sequence[TrainingInstance], n_h: int, n_p: int):
    """Stack instances into (users, contexts, targets) int64 arrays."""
    users = np.fromiter((x.user for x in instances), dtype=np.int64, count=len(instances))
    ctx = np.array([x.context for x in instances], dtype=np.int64).reshape(len(instances), n_h)
    tgt = np.array([x.targets for x in instances], dtype=np.int64).reshape(len(instances), n_p)
    return users, ctx, tgt


def history_context(seq: np.ndarray, end: int, n_h: int, pad: int) -> np.ndarray:
    """The last ``n_h`` items before ``end``, left-padded."""
    lo = max(0, end - n_h)
    ctx = np.full(n_h, pad, dtype=np.int64)
    ctx[n_h - (end - lo):] = seq[lo:end]
    return ctx
