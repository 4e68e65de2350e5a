"""Walk through the data layer: synthesize ratings, preprocess, group items.

Run from the repository root:  python demos/01_data_pipeline.py
"""

import numpy as np

from bifair.dataio import (PreprocessConfig, assign_attribute_groups,
                           assign_popularity_groups, load_interactions,
                           load_item_metadata, preprocess)
from bifair.synthdata import SynthDataConfig, generate, write_raw_files

# --- 1. synthesize a small interaction log -------------------------------
cfg = SynthDataConfig(num_users=200, num_items=120, num_genres=3, seed=7)
data = generate(cfg)
print(f"generated {len(data.interactions)} raw ratings")

inter_path, meta_path = write_raw_files(data, "runs/demo01/raw")
raw = load_interactions(inter_path)
print(f"parsed {len(raw)} records ({raw.malformed} malformed)")

# --- 2. preprocess: rating filter, user filter, split, prune, re-index ---
prep = PreprocessConfig(min_rating=3, min_user_interactions=20,
                        split_ratio=(4, 3, 3), seed=0)
ds = preprocess(raw, prep)
print(f"dataset: {ds.num_users} users x {ds.num_items} items")
print(f"train/val/test sizes: {sum(len(t) for t in ds.train)} / "
      f"{sum(len(v) for v in ds.val)} / {sum(len(t) for t in ds.test)}")

# every val/test item is guaranteed to occur in someone's train list
train_items = set()
for t in ds.train:
    train_items.update(t.tolist())
assert all(set(v.tolist()) <= train_items for v in ds.val)

# --- 3. group items two ways ----------------------------------------------
pop = assign_popularity_groups(ds, top_fraction=0.1)
print(f"popularity groups: head={len(pop.members(0))} tail={len(pop.members(1))}")

genre = assign_attribute_groups(load_item_metadata(meta_path), ds)
print(f"genre groups: {dict(zip(genre.labels, np.bincount(genre.group_of).tolist()))}")
