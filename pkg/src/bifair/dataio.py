"""Interaction ingestion, preprocessing, splits, and item grouping.

The preprocessing pipeline runs in a fixed order: rating filter, user
filter, per-user random split, unseen-item pruning, dense re-indexing.
All randomness flows from the config seed, so re-running with the same
inputs yields a byte-identical dataset directory.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_SPLIT_FILES = {"train": "split_train.csv", "val": "split_val.csv", "test": "split_test.csv"}


@dataclass
class RawInteractions:
    """Parsed interaction records plus parse diagnostics."""

    records: list[tuple[str, str, float, int | None]]
    malformed: int = 0

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class PreprocessConfig:
    min_rating: float = 3.0
    min_user_interactions: int = 20
    split_ratio: tuple[float, float, float] = (4.0, 3.0, 3.0)
    top_pop_fraction: float = 0.1
    seed: int = 0
    # "temporal" sorts each user's interactions by timestamp instead of shuffling
    split_mode: str = "random"
    # re-run the user filter after unseen-item pruning until stable
    fixpoint: bool = False

    def validate(self) -> None:
        if any(r < 0 for r in self.split_ratio) or self.split_ratio[0] <= 0:
            raise ValueError("split_ratio entries must be positive (train strictly so)")
        if sum(self.split_ratio) <= 0:
            raise ValueError("split_ratio must sum to a positive value")
        if not (0 < self.top_pop_fraction <= 1):
            raise ValueError("top_pop_fraction must lie in (0, 1]")
        if self.min_user_interactions < 1:
            raise ValueError("min_user_interactions must be >= 1")
        if self.split_mode not in ("random", "temporal"):
            raise ValueError(f"unknown split_mode {self.split_mode!r}")


@dataclass
class Dataset:
    """Dense-indexed interactions with per-user train/val/test item lists."""

    num_users: int
    num_items: int
    train: list[np.ndarray]
    val: list[np.ndarray]
    test: list[np.ndarray]
    user_map: dict[str, int]
    item_map: dict[str, int]
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        train_items: set[int] = set()
        for u in range(self.num_users):
            if len(self.train[u]) == 0:
                raise ValueError(f"user {u} has no training items")
            train_items.update(self.train[u].tolist())
        for name, splits in (("val", self.val), ("test", self.test)):
            for u in range(self.num_users):
                missing = set(splits[u].tolist()) - train_items
                if missing:
                    raise ValueError(f"{name} items {sorted(missing)} never occur in train")

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "num_users": self.num_users,
            "num_items": self.num_items,
            **self.meta,
            "user_map": self.user_map,
            "item_map": self.item_map,
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        for name, fname in _SPLIT_FILES.items():
            rows = getattr(self, name)
            with open(out / fname, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["user_idx", "item_idx"])
                for u in range(self.num_users):
                    for i in rows[u]:
                        writer.writerow([u, int(i)])

    @classmethod
    def load(cls, in_dir: str | Path) -> "Dataset":
        src = Path(in_dir)
        meta = json.loads((src / "meta.json").read_text())
        num_users = meta.pop("num_users")
        num_items = meta.pop("num_items")
        user_map = meta.pop("user_map")
        item_map = meta.pop("item_map")
        splits = {}
        for name, fname in _SPLIT_FILES.items():
            per_user: list[list[int]] = [[] for _ in range(num_users)]
            with open(src / fname, newline="") as fh:
                reader = csv.reader(fh)
                next(reader)
                for row in reader:
                    per_user[int(row[0])].append(int(row[1]))
            splits[name] = [np.array(sorted(items), dtype=np.int64) for items in per_user]
        return cls(num_users, num_items, splits["train"], splits["val"], splits["test"],
                   user_map, item_map, meta)


@dataclass
class GroupAssignment:
    """Total partition of items into disjoint groups."""

    num_groups: int
    group_of: np.ndarray
    labels: list[str]

    def validate(self, num_items: int) -> None:
        if len(self.group_of) != num_items:
            raise ValueError("group assignment does not cover all items")
        counts = np.bincount(self.group_of, minlength=self.num_groups)
        if (counts == 0).any():
            empty = np.flatnonzero(counts == 0).tolist()
            raise ValueError(f"groups {empty} are empty")

    def members(self, n: int) -> np.ndarray:
        return np.flatnonzero(self.group_of == n)


def _looks_numeric(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_interactions(path: str | Path, delimiter: str = ",") -> RawInteractions:
    """Parse a ``user,item,rating[,timestamp]`` text file.

    The header row is auto-detected by a non-numeric rating field.
    Malformed lines are counted and reported with a warning; an input
    that yields zero valid records is an error.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interactions file not found: {path}")
    records: list[tuple[str, str, float, int | None]] = []
    malformed = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        for lineno, row in enumerate(reader):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                malformed += 1
                continue
            user, item, rating = row[0].strip(), row[1].strip(), row[2].strip()
            if lineno == 0 and not _looks_numeric(rating):
                continue  # header
            if not user or not item or not _looks_numeric(rating):
                malformed += 1
                continue
            r = float(rating)
            if not math.isfinite(r):
                malformed += 1
                continue
            ts: int | None = None
            if len(row) >= 4 and row[3].strip():
                if _looks_numeric(row[3]):
                    ts = int(float(row[3]))
                else:
                    malformed += 1
                    continue
            records.append((user, item, r, ts))
    if malformed:
        warnings.warn(f"{path.name}: skipped {malformed} malformed line(s)")
    if not records:
        raise ValueError(f"{path}: zero valid records")
    return RawInteractions(records=records, malformed=malformed)


def load_item_metadata(path: str | Path, delimiter: str = ",") -> dict[str, str]:
    """Parse an ``item,label[,title]`` file into an item-key -> label map."""
    path = Path(path)
    labels: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        for lineno, row in enumerate(reader):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                continue
            item, label = row[0].strip(), row[1].strip()
            if lineno == 0 and item.lower() in ("item", "item_id", "item_key"):
                continue
            labels[item] = label
    return labels


def _proportional_sizes(n: int, ratio: tuple[float, float, float]) -> tuple[int, int, int]:
    # floor val/test; leftovers accrue to train
    total = sum(ratio)
    n_val = int(n * ratio[1] / total)
    n_test = int(n * ratio[2] / total)
    return n - n_val - n_test, n_val, n_test


def preprocess(raw: RawInteractions, cfg: PreprocessConfig) -> Dataset:
    """Filter, split, prune, and densely re-index raw interactions.

    Steps, in order: (1) drop records below ``min_rating``; (2) drop
    users with fewer than ``min_user_interactions`` remaining records;
    (3) per-user random (or temporal) split by ``split_ratio`` with
    remainders assigned to train; (4) prune val/test items that never
    occur in any train list; (5) build dense id maps over the survivors.
    """
    cfg.validate()
    if not raw.records:
        raise ValueError("no interaction records to preprocess")

    # collapse duplicate (user, item) pairs to the max rating; keep max timestamp
    by_user: dict[str, dict[str, tuple[float, int | None]]] = {}
    duplicates = 0
    for user, item, rating, ts in raw.records:
        if rating < cfg.min_rating:
            continue
        slot = by_user.setdefault(user, {})
        if item in slot:
            duplicates += 1
            prev_r, prev_ts = slot[item]
            ts = max(t for t in (prev_ts, ts) if t is not None) if (prev_ts is not None or ts is not None) else None
            slot[item] = (max(prev_r, rating), ts)
        else:
            slot[item] = (rating, ts)
    if duplicates:
        warnings.warn(f"collapsed {duplicates} duplicate (user,item) record(s) to max rating")

    def split_users(users: dict[str, dict[str, tuple[float, int | None]]]):
        rng = np.random.default_rng(cfg.seed)
        train_keys: dict[str, list[str]] = {}
        val_keys: dict[str, list[str]] = {}
        test_keys: dict[str, list[str]] = {}
        for user in sorted(users):
            items = sorted(users[user])
            if cfg.split_mode == "temporal":
                items.sort(key=lambda it: (users[user][it][1] if users[user][it][1] is not None else 0, it))
            else:
                perm = rng.permutation(len(items))
                items = [items[j] for j in perm]
            n_train, n_val, n_test = _proportional_sizes(len(items), cfg.split_ratio)
            train_keys[user] = items[:n_train]
            val_keys[user] = items[n_train:n_train + n_val]
            test_keys[user] = items[n_train + n_val:]
        return train_keys, val_keys, test_keys

    users = {u: items for u, items in by_user.items() if len(items) >= cfg.min_user_interactions}
    if not users:
        raise ValueError("all users filtered out; lower min_user_interactions or min_rating")

    while True:
        train_keys, val_keys, test_keys = split_users(users)
        seen_in_train = set()
        for keys in train_keys.values():
            seen_in_train.update(keys)
        for user in users:
            val_keys[user] = [k for k in val_keys[user] if k in seen_in_train]
            test_keys[user] = [k for k in test_keys[user] if k in seen_in_train]
        if not cfg.fixpoint:
            break
        survivors = {
            u: items for u, items in users.items()
            if len(train_keys[u]) + len(val_keys[u]) + len(test_keys[u]) >= cfg.min_user_interactions
        }
        if len(survivors) == len(users):
            break
        if not survivors:
            raise ValueError("fixpoint filtering removed every user")
        users = survivors

    user_map = {u: idx for idx, u in enumerate(sorted(users))}
    surviving_items = sorted(seen_in_train)
    item_map = {it: idx for idx, it in enumerate(surviving_items)}

    def to_dense(keys: dict[str, list[str]]) -> list[np.ndarray]:
        out: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * len(user_map)
        for user, idx in user_map.items():
            out[idx] = np.array(sorted(item_map[k] for k in keys[user]), dtype=np.int64)
        return out

    ds = Dataset(
        num_users=len(user_map),
        num_items=len(item_map),
        train=to_dense(train_keys),
        val=to_dense(val_keys),
        test=to_dense(test_keys),
        user_map=user_map,
        item_map=item_map,
        meta={
            "seed": cfg.seed,
            "min_rating": cfg.min_rating,
            "min_user_interactions": cfg.min_user_interactions,
            "split_ratio": list(cfg.split_ratio),
            "split_mode": cfg.split_mode,
        },
    )
    ds.validate()
    return ds


def train_item_counts(ds: Dataset) -> np.ndarray:
    counts = np.zeros(ds.num_items, dtype=np.int64)
    for items in ds.train:
        np.add.at(counts, items, 1)
    return counts


def assign_popularity_groups(ds: Dataset, top_fraction: float = 0.1) -> GroupAssignment:
    """Two groups by train-interaction count: head (top fraction) and tail.

    Items are ranked by descending count with ties broken by ascending
    item index; the head holds exactly ceil(top_fraction * num_items) items.
    """
    if not (0 < top_fraction < 1):
        raise ValueError("top_fraction must lie in (0, 1)")
    counts = train_item_counts(ds)
    order = np.lexsort((np.arange(ds.num_items), -counts))
    head_size = math.ceil(top_fraction * ds.num_items)
    group_of = np.ones(ds.num_items, dtype=np.int64)
    group_of[order[:head_size]] = 0
    ga = GroupAssignment(num_groups=2, group_of=group_of, labels=["head", "tail"])
    ga.validate(ds.num_items)
    return ga


def assign_attribute_groups(metadata: dict[str, str], ds: Dataset) -> GroupAssignment:
    """One group per distinct label, ordered by first appearance over item index."""
    group_of = np.empty(ds.num_items, dtype=np.int64)
    labels: list[str] = []
    label_to_group: dict[str, int] = {}
    key_of = {idx: key for key, idx in ds.item_map.items()}
    for i in range(ds.num_items):
        label = metadata.get(key_of[i], "unknown")
        if label not in label_to_group:
            label_to_group[label] = len(labels)
            labels.append(label)
        group_of[i] = label_to_group[label]
    if len(labels) == 1:
        warnings.warn("all items share one label; fairness metrics will be degenerate")
    ga = GroupAssignment(num_groups=len(labels), group_of=group_of, labels=labels)
    ga.validate(ds.num_items)
    return ga
