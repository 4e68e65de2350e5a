"""Shared builders for small synthetic fixtures."""

import numpy as np
import pytest

from bifair.dataio import Dataset, GroupAssignment
from bifair.recmodel import Batch


def make_dataset(num_users=4, num_items=8, hist_len=3, seed=0) -> Dataset:
    """Random dense dataset; every item occurs in someone's train list."""
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for u in range(num_users):
        hist = rng.choice(num_items, size=min(hist_len, num_items), replace=False)
        train.append(np.sort(hist).astype(np.int64))
    covered = set()
    for t in train:
        covered.update(t.tolist())
    missing = [i for i in range(num_items) if i not in covered]
    for k, item in enumerate(missing):  # top up coverage round-robin
        u = k % num_users
        train[u] = np.sort(np.unique(np.append(train[u], item)))
    all_train = [set(t.tolist()) for t in train]
    for u in range(num_users):
        pool = sorted(set().union(*all_train))
        picks = rng.choice(pool, size=min(2, len(pool)), replace=False)
        val.append(np.sort(picks[:1]).astype(np.int64))
        test.append(np.sort(picks[1:]).astype(np.int64))
    return Dataset(
        num_users=num_users, num_items=num_items,
        train=train, val=val, test=test,
        user_map={f"u{u}": u for u in range(num_users)},
        item_map={f"i{i}": i for i in range(num_items)},
    )


def make_groups(num_items, num_groups=2, seed=0) -> GroupAssignment:
    rng = np.random.default_rng(seed)
    group_of = rng.integers(0, num_groups, size=num_items)
    group_of[:num_groups] = np.arange(num_groups)  # every group populated
    return GroupAssignment(num_groups=num_groups,
                           group_of=group_of.astype(np.int64),
                           labels=[f"g{n}" for n in range(num_groups)])


def make_batch(ds: Dataset, groups: GroupAssignment, num_pairs=6, num_negs=3, seed=0) -> Batch:
    rng = np.random.default_rng(seed)
    users = rng.integers(0, ds.num_users, size=num_pairs)
    pos = np.array([rng.choice(ds.train[u]) for u in users])
    negs = np.empty((num_pairs, num_negs), dtype=np.int64)
    for row, p in enumerate(pos):
        negs[row] = rng.choice([i for i in range(ds.num_items) if i != p],
                               size=num_negs, replace=True)
    return Batch(users=users, pos=pos, negs=negs, pair_group=groups.group_of[pos])


@pytest.fixture
def tiny_world():
    ds = make_dataset(num_users=4, num_items=8, hist_len=3, seed=1)
    groups = make_groups(ds.num_items, num_groups=2, seed=2)
    rng = np.random.default_rng(3)
    Z = rng.standard_normal((ds.num_items, 5))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    return ds, groups, Z
